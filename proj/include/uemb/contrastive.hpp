#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uemb/error.hpp"
#include "uemb/tensor.hpp"

namespace uemb {

enum class HardNegativePolicy {
  /// Every target row is a negative for every query (unless masked).
  pooled,
  /// A row listed as some query's hard negative is a negative only for the
  /// queries that list it; in-batch positives stay shared.
  per_query,
};

struct LossConfig {
  double temperature = 0.02;
  bool false_negative_masking = true;
  HardNegativePolicy hard_negative_policy = HardNegativePolicy::pooled;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw ValidationError("loss temperature must be a positive finite number");
    }
  }
};

/// Query and target embeddings for one InfoNCE evaluation.
///
/// Query i is scored against every target row; positive_index[i] names its
/// positive and all other rows form its negative set, minus anything marked in
/// `excluded`. Queries never act as negatives.
struct ContrastiveBatch {
  DenseMatrix queries;  // B x D
  DenseMatrix targets;  // M x D
  std::vector<std::size_t> positive_index;
  /// Identity of each target row, used for false-negative masking. Empty
  /// means all rows are distinct.
  std::vector<std::string> target_ids;
  /// Optional per-query hard-negative rows into `targets`.
  std::vector<std::vector<std::size_t>> hard_negative_rows;
  /// B x M flags; a set flag removes target j from query i's denominator.
  /// Empty means nothing is excluded.
  std::vector<std::uint8_t> excluded;

  std::size_t query_count() const { return queries.rows(); }
  std::size_t target_count() const { return targets.rows(); }

  void validate() const {
    const std::size_t b = queries.rows();
    const std::size_t m = targets.rows();
    if (b == 0) throw DegenerateInputError("contrastive batch: no queries");
    if (queries.cols() != targets.cols()) {
      throw DimensionError("contrastive batch: query dim " + std::to_string(queries.cols()) +
                           " vs target dim " + std::to_string(targets.cols()));
    }
    if (positive_index.size() != b) {
      throw DimensionError("contrastive batch: " + std::to_string(positive_index.size()) +
                           " positive indices for " + std::to_string(b) + " queries");
    }
    for (std::size_t i = 0; i < b; ++i) {
      if (positive_index[i] >= m) {
        throw DimensionError("contrastive batch: positive index out of range for query " +
                             std::to_string(i));
      }
    }
    if (!target_ids.empty() && target_ids.size() != m) {
      throw DimensionError("contrastive batch: target id count does not match target rows");
    }
    if (!hard_negative_rows.empty()) {
      if (hard_negative_rows.size() != b) {
        throw DimensionError("contrastive batch: hard-negative lists do not match queries");
      }
      for (const auto& rows : hard_negative_rows) {
        for (auto r : rows) {
          if (r >= m) throw DimensionError("contrastive batch: hard-negative row out of range");
        }
      }
    }
    if (!excluded.empty() && excluded.size() != b * m) {
      throw DimensionError("contrastive batch: exclusion mask has wrong size");
    }
  }
};

struct LossOutput {
  double loss = 0.0;
  DenseMatrix d_query;   // B x D
  DenseMatrix d_target;  // M x D
  DenseMatrix d_logits;  // B x M, zero where a candidate is excluded
};

/// Excludes from query i's negatives every row whose id equals the id of its
/// positive. Batches without ids come back unchanged.
inline ContrastiveBatch mask_false_negatives(ContrastiveBatch batch) {
  batch.validate();
  if (batch.target_ids.empty()) return batch;
  const std::size_t b = batch.query_count();
  const std::size_t m = batch.target_count();
  if (batch.excluded.empty()) batch.excluded.assign(b * m, 0);
  for (std::size_t i = 0; i < b; ++i) {
    const auto pos = batch.positive_index[i];
    for (std::size_t j = 0; j < m; ++j) {
      if (j != pos && batch.target_ids[j] == batch.target_ids[pos]) batch.excluded[i * m + j] = 1;
    }
  }
  return batch;
}

namespace detail {

/// B x M flags, 1 where target j takes part in query i's softmax.
inline std::vector<std::uint8_t> candidate_mask(const ContrastiveBatch& batch,
                                                const LossConfig& cfg) {
  const std::size_t b = batch.query_count();
  const std::size_t m = batch.target_count();
  std::vector<std::uint8_t> allowed(b * m, 1);
  if (!batch.excluded.empty()) {
    for (std::size_t k = 0; k < b * m; ++k) allowed[k] = batch.excluded[k] ? 0 : 1;
  }
  if (cfg.false_negative_masking && !batch.target_ids.empty()) {
    for (std::size_t i = 0; i < b; ++i) {
      const auto& pos_id = batch.target_ids[batch.positive_index[i]];
      for (std::size_t j = 0; j < m; ++j) {
        if (j != batch.positive_index[i] && batch.target_ids[j] == pos_id) allowed[i * m + j] = 0;
      }
    }
  }
  if (cfg.hard_negative_policy == HardNegativePolicy::per_query && !batch.hard_negative_rows.empty()) {
    std::vector<std::uint8_t> is_positive(m, 0);
    for (auto p : batch.positive_index) is_positive[p] = 1;
    std::vector<std::uint8_t> is_hard(m, 0);
    for (const auto& rows : batch.hard_negative_rows) {
      for (auto r : rows) is_hard[r] = is_positive[r] ? 0 : 1;
    }
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::uint8_t> own(m, 0);
      for (auto r : batch.hard_negative_rows[i]) own[r] = 1;
      for (std::size_t j = 0; j < m; ++j) {
        if (is_hard[j] && !own[j]) allowed[i * m + j] = 0;
      }
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    allowed[i * m + batch.positive_index[i]] = 1;
    std::size_t active = 0;
    for (std::size_t j = 0; j < m; ++j) active += allowed[i * m + j];
    if (active < 2) {
      throw DegenerateInputError("InfoNCE: query " + std::to_string(i) + " has no negatives");
    }
  }
  return allowed;
}

struct ForwardState {
  DenseMatrix cosines;
  std::vector<std::uint8_t> allowed;
  std::vector<double> row_loss;  // log-sum-exp of the row minus the positive logit
  double loss = 0.0;
};

// Each row is evaluated on logits shifted by the positive's, z_j = l_j - l_pos.
// When the positive leads, the row loss is log1p(sum exp z_j), which keeps its
// full relative precision as the row saturates; lse - l_pos would round to 0.
inline ForwardState info_nce_state(const ContrastiveBatch& batch, const LossConfig& cfg) {
  cfg.validate();
  batch.validate();
  ForwardState st;
  st.allowed = candidate_mask(batch, cfg);
  st.cosines = similarity_matrix(batch.queries, batch.targets);
  const std::size_t b = batch.query_count();
  const std::size_t m = batch.target_count();
  st.row_loss.resize(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t pos = batch.positive_index[i];
    double top = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != pos && st.allowed[i * m + j]) {
        top = std::max(top, (st.cosines(i, j) - st.cosines(i, pos)) / cfg.temperature);
      }
    }
    double acc = top > 0.0 ? std::exp(-top) : 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != pos && st.allowed[i * m + j]) {
        acc += std::exp((st.cosines(i, j) - st.cosines(i, pos)) / cfg.temperature - top);
      }
    }
    st.row_loss[i] = top > 0.0 ? top + std::log(acc) : std::log1p(acc);
    total += st.row_loss[i];
  }
  st.loss = total / static_cast<double>(b);
  return st;
}

}  // namespace detail

/// Mean over queries of the InfoNCE loss with logits cos(q, t) / temperature,
/// evaluated as a cross-entropy in log space.
inline double info_nce_forward(const ContrastiveBatch& batch, const LossConfig& cfg) {
  return detail::info_nce_state(batch, cfg).loss;
}

/// Loss plus gradients with respect to the logits and both embedding matrices.
inline LossOutput info_nce_backward(const ContrastiveBatch& batch, const LossConfig& cfg) {
  auto st = detail::info_nce_state(batch, cfg);
  const std::size_t b = batch.query_count();
  const std::size_t m = batch.target_count();
  const std::size_t d = batch.queries.cols();
  const double inv_b = 1.0 / static_cast<double>(b);

  LossOutput out{st.loss, DenseMatrix(b, d), DenseMatrix(m, d), DenseMatrix(b, m)};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!st.allowed[i * m + j]) continue;
      const std::size_t pos = batch.positive_index[i];
      // softmax p_j - [j == pos]; for the positive that is exp(-L) - 1.
      const double g = j == pos ? std::expm1(-st.row_loss[i])
                                : std::exp((st.cosines(i, j) - st.cosines(i, pos)) / cfg.temperature -
                                           st.row_loss[i]);
      out.d_logits(i, j) = g * inv_b;
    }
  }

  std::vector<double> qn(b), tn(m);
  for (std::size_t i = 0; i < b; ++i) qn[i] = l2_norm(batch.queries.row(i));
  for (std::size_t j = 0; j < m; ++j) tn[j] = l2_norm(batch.targets.row(j));

  // d cos(q,t)/dq = t/(|q||t|) - cos q/|q|^2, and symmetrically for t.
  for (std::size_t i = 0; i < b; ++i) {
    const auto q = batch.queries.row(i);
    auto dq = out.d_query.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const double g = out.d_logits(i, j) / cfg.temperature;
      if (g == 0.0) continue;
      const auto t = batch.targets.row(j);
      auto dt = out.d_target.row(j);
      const double c = st.cosines(i, j);
      const double inv_qt = 1.0 / (qn[i] * tn[j]);
      const double q_self = c / (qn[i] * qn[i]);
      const double t_self = c / (tn[j] * tn[j]);
      for (std::size_t k = 0; k < d; ++k) {
        dq[k] += g * (t[k] * inv_qt - q_self * q[k]);
        dt[k] += g * (q[k] * inv_qt - t_self * t[k]);
      }
    }
  }
  return out;
}

}  // namespace uemb
