#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "uemb/error.hpp"
#include "uemb/random.hpp"

namespace uemb {

struct SourceEntry {
  std::string id;
  double weight = 0.0;
  std::size_t count = 0;  // number of examples the source holds
};

/// Per-source sampling weights. Draw probability is weight / sum(weights).
class SourceTable {
 public:
  SourceTable() = default;
  explicit SourceTable(std::vector<SourceEntry> entries) : entries_(std::move(entries)) {
    validate();
  }

  void add(std::string id, double weight, std::size_t count) {
    entries_.push_back({std::move(id), weight, count});
    validate();
  }

  std::span<const SourceEntry> entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  double total_weight() const {
    double total = 0.0;
    for (const auto& e : entries_) total += e.weight;
    return total;
  }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].id == id) return i;
    }
    throw ValidationError("unknown source '" + id + "'");
  }

  /// Throws unless at least one weight is positive and all are finite and >= 0.
  void require_drawable() const {
    if (!(total_weight() > 0.0)) throw ValidationError("source table: all weights are zero");
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (!std::isfinite(e.weight) || e.weight < 0.0) {
        throw ValidationError("source '" + e.id + "': weight must be finite and non-negative");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (entries_[j].id == e.id) throw ValidationError("duplicate source id '" + e.id + "'");
      }
    }
  }

  std::vector<SourceEntry> entries_;
};

/// Batch composition. sub_batch == 0 means every example picks its own
/// source, which is the same as sub_batch == 1.
struct SamplingPlan {
  std::size_t full_batch = 1024;
  std::size_t sub_batch = 64;
  std::uint64_t seed = 0;
  /// Lets a source smaller than the sub-batch fill it by drawing with replacement.
  bool allow_replacement = false;

  std::size_t effective_sub_batch() const { return sub_batch == 0 ? 1 : sub_batch; }
  std::size_t sub_batch_count() const { return full_batch / effective_sub_batch(); }

  void validate() const {
    if (full_batch == 0) throw ValidationError("sampling plan: full batch must be at least 1");
    if (full_batch % effective_sub_batch() != 0) {
      throw ValidationError("sampling plan: sub-batch " + std::to_string(sub_batch) +
                            " does not divide batch " + std::to_string(full_batch));
    }
  }
};

inline SamplingPlan reseed(SamplingPlan plan, std::uint64_t new_seed) {
  plan.seed = new_seed;
  return plan;
}

struct SubBatch {
  std::string source_id;
  std::vector<std::size_t> examples;  // indices into the source

  friend bool operator==(const SubBatch&, const SubBatch&) = default;
};

struct BatchSpec {
  std::vector<SubBatch> sub_batches;

  std::size_t example_count() const {
    std::size_t n = 0;
    for (const auto& sb : sub_batches) n += sb.examples.size();
    return n;
  }

  friend bool operator==(const BatchSpec&, const BatchSpec&) = default;
};

namespace detail {

inline std::size_t draw_source(std::span<const SourceEntry> entries, double total, Rng& rng) {
  const double u = rng.uniform() * total;
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].weight <= 0.0) continue;
    cumulative += entries[i].weight;
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;  // u rounded up to the total
}

/// k distinct values from [0, n), Floyd's algorithm, in insertion order.
inline std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> picked;
  picked.reserve(k);
  auto contains = [&picked](std::size_t v) {
    return std::find(picked.begin(), picked.end(), v) != picked.end();
  };
  for (std::size_t j = n - k; j < n; ++j) {
    const auto t = static_cast<std::size_t>(rng.below(j + 1));
    picked.push_back(contains(t) ? j : t);
  }
  return picked;
}

}  // namespace detail

/// One full batch: sub_batch_count() sub-batches, each from a single source
/// chosen with probability proportional to its weight. Examples inside a
/// sub-batch are distinct; sub-batches may repeat examples.
inline BatchSpec assemble_batch(const SamplingPlan& plan, const SourceTable& table, Rng& rng) {
  plan.validate();
  table.require_drawable();
  const std::size_t s = plan.effective_sub_batch();
  for (const auto& e : table.entries()) {
    if (e.weight > 0.0 && e.count < s && !plan.allow_replacement) {
      throw ValidationError("source '" + e.id + "' has " + std::to_string(e.count) +
                            " examples, fewer than sub-batch size " + std::to_string(s));
    }
    if (e.weight > 0.0 && e.count == 0) {
      throw ValidationError("source '" + e.id + "' has no examples");
    }
  }
  const double total = table.total_weight();
  BatchSpec batch;
  batch.sub_batches.reserve(plan.sub_batch_count());
  for (std::size_t b = 0; b < plan.sub_batch_count(); ++b) {
    const auto& src = table.entries()[detail::draw_source(table.entries(), total, rng)];
    SubBatch sb{src.id, {}};
    if (src.count >= s) {
      sb.examples = detail::draw_distinct(src.count, s, rng);
    } else {
      sb.examples.resize(s);
      for (auto& ex : sb.examples) ex = static_cast<std::size_t>(rng.below(src.count));
    }
    batch.sub_batches.push_back(std::move(sb));
  }
  return batch;
}

/// Stateful stream of batches for one training run.
class BatchSampler {
 public:
  BatchSampler(SamplingPlan plan, SourceTable table)
      : plan_(plan), table_(std::move(table)), rng_(plan.seed) {
    plan_.validate();
    table_.require_drawable();
  }

  BatchSpec next() { return assemble_batch(plan_, table_, rng_); }

  const SamplingPlan& plan() const noexcept { return plan_; }
  const SourceTable& table() const noexcept { return table_; }

 private:
  SamplingPlan plan_;
  SourceTable table_;
  Rng rng_;
};

/// Share of sub-batch draws taken by each source. When a table is given,
/// sources that were never drawn are listed with frequency 0.
inline std::map<std::string, double> source_frequency_report(std::span<const BatchSpec> batches,
                                                             const SourceTable* table = nullptr) {
  std::map<std::string, double> freq;
  if (table != nullptr) {
    for (const auto& e : table->entries()) freq[e.id] = 0.0;
  }
  std::size_t draws = 0;
  for (const auto& b : batches) {
    for (const auto& sb : b.sub_batches) {
      freq[sb.source_id] += 1.0;
      ++draws;
    }
  }
  if (draws == 0) return freq;
  for (auto& [id, f] : freq) f /= static_cast<double>(draws);
  return freq;
}

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t degrees_of_freedom = 0;
  double p_value = 1.0;
};

/// Pearson goodness-of-fit of observed sub-batch counts against the
/// normalized weight table. Zero-weight sources are left out of the test.
inline ChiSquareResult chi_square_against_table(const std::map<std::string, std::size_t>& counts,
                                                const SourceTable& table) {
  table.require_drawable();
  std::size_t n = 0;
  for (const auto& [id, c] : counts) n += c;
  const double total = table.total_weight();
  ChiSquareResult r;
  std::size_t cells = 0;
  for (const auto& e : table.entries()) {
    auto it = counts.find(e.id);
    const double observed = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    if (e.weight <= 0.0) {
      if (observed > 0.0) {
        r.statistic = std::numeric_limits<double>::infinity();
        r.p_value = 0.0;
        return r;
      }
      continue;
    }
    const double expected = static_cast<double>(n) * e.weight / total;
    r.statistic += (observed - expected) * (observed - expected) / expected;
    ++cells;
  }
  if (cells < 2) return r;
  r.degrees_of_freedom = cells - 1;
  boost::math::chi_squared dist(static_cast<double>(r.degrees_of_freedom));
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

inline std::map<std::string, std::size_t> source_draw_counts(std::span<const BatchSpec> batches) {
  std::map<std::string, std::size_t> counts;
  for (const auto& b : batches) {
    for (const auto& sb : b.sub_batches) ++counts[sb.source_id];
  }
  return counts;
}

}  // namespace uemb
