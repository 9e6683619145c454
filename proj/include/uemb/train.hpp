#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "uemb/contrastive.hpp"
#include "uemb/encoder.hpp"
#include "uemb/error.hpp"
#include "uemb/gradcache.hpp"
#include "uemb/sampler.hpp"

namespace uemb {

struct TrainConfig {
  std::size_t steps = 2000;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  SamplingPlan plan;  // plan.seed seeds the batch stream
  LossConfig loss;
  std::size_t chunk_size = 64;
  /// Train only the adapter; base weights and biases stay fixed.
  bool freeze_base = false;

  void validate() const {
    if (steps == 0) throw ValidationError("train: steps must be at least 1");
    if (!(learning_rate > 0.0)) throw ValidationError("train: learning rate must be positive");
    if (chunk_size == 0) throw ValidationError("train: chunk size must be at least 1");
    plan.validate();
    loss.validate();
  }
};

/// One data source: row i of `queries` pairs with row i of `targets`.
struct TrainingSource {
  std::string id;
  double weight = 1.0;
  DenseMatrix queries;
  DenseMatrix targets;
  /// Identity of each target, for false-negative masking. Empty means the
  /// row index is the identity.
  std::vector<std::string> target_ids;

  void validate() const {
    if (queries.rows() != targets.rows()) {
      throw DimensionError("source '" + id + "': query and target row counts differ");
    }
    if (!target_ids.empty() && target_ids.size() != targets.rows()) {
      throw DimensionError("source '" + id + "': target id count does not match rows");
    }
  }
};

struct TrainResult {
  ToyEncoderParams params;
  std::vector<double> losses;  // one per step
};

inline SourceTable source_table_of(std::span<const TrainingSource> sources) {
  SourceTable table;
  for (const auto& s : sources) table.add(s.id, s.weight, s.queries.rows());
  return table;
}

/// Gathers the examples a BatchSpec names into one FeatureBatch. Target i is
/// the positive of query i. Target ids are qualified by source.
inline FeatureBatch gather_feature_batch(const BatchSpec& spec,
                                         std::span<const TrainingSource> sources) {
  const std::size_t n = spec.example_count();
  if (sources.empty()) throw ValidationError("gather_feature_batch: no sources");
  const std::size_t d = sources.front().queries.cols();
  FeatureBatch fb{DenseMatrix(n, d), DenseMatrix(n, d), std::vector<std::size_t>(n),
                  std::vector<std::string>(n), {}};
  std::size_t row = 0;
  for (const auto& sb : spec.sub_batches) {
    const TrainingSource* src = nullptr;
    for (const auto& s : sources) {
      if (s.id == sb.source_id) src = &s;
    }
    if (src == nullptr) throw ValidationError("batch names unknown source '" + sb.source_id + "'");
    for (auto ex : sb.examples) {
      std::copy_n(src->queries.row(ex).begin(), d, fb.query_features.row(row).begin());
      std::copy_n(src->targets.row(ex).begin(), d, fb.target_features.row(row).begin());
      fb.positive_index[row] = row;
      fb.target_ids[row] =
          src->id + '/' + (src->target_ids.empty() ? std::to_string(ex) : src->target_ids[ex]);
      ++row;
    }
  }
  return fb;
}

/// Runs `steps` iterations of batch assembly, gradient-cached InfoNCE and an
/// optimizer update. Deterministic for a given config, data and initial
/// parameters. A non-finite loss aborts with the step index.
inline TrainResult train(const TrainConfig& config, std::span<const TrainingSource> sources,
                         ToyEncoderParams initial) {
  config.validate();
  if (sources.empty()) throw ValidationError("train: no training sources");
  for (const auto& s : sources) {
    s.validate();
    if (s.queries.cols() != initial.input_dim()) {
      throw DimensionError("source '" + s.id + "': feature dim does not match encoder input");
    }
  }
  if (config.freeze_base && !initial.adapter) {
    throw ValidationError("train: freeze_base requires an adapter");
  }

  BatchSampler sampler(config.plan, source_table_of(sources));
  ToyEncoder encoder(std::move(initial));
  Optimizer opt(config.optimizer, config.learning_rate);
  TrainResult result;
  result.losses.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const FeatureBatch fb = gather_feature_batch(sampler.next(), sources);
    auto gc = grad_cache_run(encoder, fb, config.chunk_size, config.loss);
    if (!std::isfinite(gc.loss)) {
      throw DegenerateInputError("train: non-finite loss at step " + std::to_string(step));
    }
    result.losses.push_back(gc.loss);
    opt.step(encoder.params(), gc.gradients, config.freeze_base);
  }
  result.params = encoder.params();
  return result;
}

}  // namespace uemb
