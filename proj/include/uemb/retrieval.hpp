#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "uemb/embedding_set.hpp"
#include "uemb/error.hpp"
#include "uemb/task.hpp"
#include "uemb/tensor.hpp"

namespace uemb {

/// Candidates a query is ranked against.
struct CandidatePool {
  std::vector<std::string> ids;
  DenseMatrix embeddings;  // one row per id

  void validate() const {
    if (ids.empty()) throw DegenerateInputError("candidate pool is empty");
    if (ids.size() != embeddings.rows()) {
      throw DimensionError("candidate pool: id count does not match rows");
    }
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw ValidationError("candidate pool: duplicate id '" + id + "'");
    }
  }
};

struct RankedCandidate {
  std::string id;
  double score = 0.0;

  friend bool operator==(const RankedCandidate&, const RankedCandidate&) = default;
};

/// Pool ids by descending score; equal scores are ordered by ascending id.
using Ranking = std::vector<RankedCandidate>;

/// Exact cosine ranking of every pool member.
inline Ranking rank_candidates(std::span<const double> query, const CandidatePool& pool) {
  pool.validate();
  if (query.size() != pool.embeddings.cols()) {
    throw DimensionError("rank_candidates: query dim " + std::to_string(query.size()) +
                         " vs pool dim " + std::to_string(pool.embeddings.cols()));
  }
  const double qn = l2_norm(query);
  if (!(qn > 0.0)) throw DegenerateInputError("rank_candidates: zero-norm query");
  Ranking r;
  r.reserve(pool.ids.size());
  for (std::size_t j = 0; j < pool.ids.size(); ++j) {
    const auto row = pool.embeddings.row(j);
    const double tn = l2_norm(row);
    if (!(tn > 0.0)) {
      throw DegenerateInputError("rank_candidates: zero-norm candidate '" + pool.ids[j] + "'");
    }
    r.push_back({pool.ids[j], std::clamp(dot(query, row) / (qn * tn), -1.0, 1.0)});
  }
  std::sort(r.begin(), r.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return r;
}

namespace detail {

inline void require_golds_ranked(const Ranking& ranking, const std::set<std::string>& gold) {
  if (gold.empty()) throw ValidationError("metric: empty gold set");
  for (const auto& g : gold) {
    const bool present = std::any_of(ranking.begin(), ranking.end(),
                                     [&g](const RankedCandidate& c) { return c.id == g; });
    if (!present) throw ValidationError("metric: gold id '" + g + "' is not in the pool");
  }
}

}  // namespace detail

/// 1 when the top-ranked candidate is gold, else 0.
inline double hit_at_1(const Ranking& ranking, const std::set<std::string>& gold) {
  detail::require_golds_ranked(ranking, gold);
  return gold.contains(ranking.front().id) ? 1.0 : 0.0;
}

/// Binary-relevance NDCG with a log2(rank + 1) discount.
inline double ndcg_at_k(const Ranking& ranking, const std::set<std::string>& gold,
                        std::size_t k = 5) {
  detail::require_golds_ranked(ranking, gold);
  if (k == 0) throw ValidationError("ndcg_at_k: k must be at least 1");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    if (gold.contains(ranking[i].id)) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, gold.size()); ++i) {
    ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / ideal;
}

/// Fraction of gold ids found in the top k.
inline double recall_at_k(const Ranking& ranking, const std::set<std::string>& gold, std::size_t k) {
  detail::require_golds_ranked(ranking, gold);
  std::size_t found = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    if (gold.contains(ranking[i].id)) ++found;
  }
  return static_cast<double>(found) / static_cast<double>(gold.size());
}

inline double score_ranking(const Metric& metric, const Ranking& ranking,
                            const std::set<std::string>& gold) {
  switch (metric.kind) {
    case Metric::Kind::hit: return hit_at_1(ranking, gold);
    case Metric::Kind::ndcg: return ndcg_at_k(ranking, gold, metric.k);
    case Metric::Kind::recall: return recall_at_k(ranking, gold, metric.k);
  }
  return 0.0;
}

/// Gold targets of one query, and its own pool when the task uses per-query pools.
struct QueryJudgement {
  std::string query_id;
  std::vector<std::string> gold;
  std::vector<std::string> pool;
};

struct TaskResult {
  std::string task;
  std::string category;
  std::string group;
  std::string metric;
  double value = 0.0;
  std::size_t query_count = 0;

  friend bool operator==(const TaskResult&, const TaskResult&) = default;
};

/// Mean metric over the judged queries. Queries are scored independently and
/// may run on up to `threads` workers; the mean is reduced in judgement order.
inline TaskResult evaluate_task(const TaskManifest& manifest, const EmbeddingSet& queries,
                                const EmbeddingSet& candidates,
                                std::span<const QueryJudgement> judgements,
                                std::size_t threads = 1) {
  if (judgements.empty()) throw ValidationError("task '" + manifest.name + "': no judged queries");
  if (queries.size() > 0 && candidates.size() > 0 && queries.dim() != candidates.dim()) {
    throw DimensionError("task '" + manifest.name + "': query and candidate dims differ");
  }
  CandidatePool shared;
  if (manifest.pool_mode == PoolMode::shared) {
    shared = {candidates.ids(), candidates.matrix()};
    shared.validate();
  }

  auto score_one = [&](const QueryJudgement& j) {
    const auto q = queries.find(j.query_id);
    if (!q) {
      throw ValidationError("task '" + manifest.name + "': no embedding for query '" + j.query_id + "'");
    }
    const std::set<std::string> gold(j.gold.begin(), j.gold.end());
    if (manifest.pool_mode == PoolMode::shared) {
      return score_ranking(manifest.metric, rank_candidates(queries.matrix().row(*q), shared), gold);
    }
    if (j.pool.empty()) {
      throw ValidationError("task '" + manifest.name + "': query '" + j.query_id + "' has no pool");
    }
    std::vector<std::size_t> rows;
    rows.reserve(j.pool.size());
    for (const auto& id : j.pool) {
      const auto r = candidates.find(id);
      if (!r) {
        throw ValidationError("task '" + manifest.name + "': no embedding for candidate '" + id + "'");
      }
      rows.push_back(*r);
    }
    const CandidatePool pool{j.pool, candidates.matrix().gather_rows(rows)};
    return score_ranking(manifest.metric, rank_candidates(queries.matrix().row(*q), pool), gold);
  };

  std::vector<double> scores(judgements.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, judgements.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < judgements.size(); ++i) scores[i] = score_one(judgements[i]);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < judgements.size(); i += workers) scores[i] = score_one(judgements[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  double total = 0.0;
  for (double s : scores) total += s;
  return {manifest.name, manifest.category, manifest.group, manifest.metric.name(),
          total / static_cast<double>(scores.size()), scores.size()};
}

struct CategorySummary {
  std::string name;
  std::string group;
  double value = 0.0;
  std::size_t task_count = 0;

  friend bool operator==(const CategorySummary&, const CategorySummary&) = default;
};

struct GroupSummary {
  std::string name;
  double value = 0.0;
  std::size_t task_count = 0;

  friend bool operator==(const GroupSummary&, const GroupSummary&) = default;
};

/// Per-task scores with category, group and overall averages.
struct EvalReport {
  std::vector<TaskResult> tasks;
  std::vector<CategorySummary> categories;
  std::vector<GroupSummary> groups;
  double overall = 0.0;
  std::size_t task_count = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct WeightedScore {
  double value = 0.0;
  std::size_t count = 0;
};

/// sum(value * count) / sum(count).
inline double weighted_mean(std::span<const WeightedScore> parts) {
  double num = 0.0;
  std::size_t den = 0;
  for (const auto& p : parts) {
    num += p.value * static_cast<double>(p.count);
    den += p.count;
  }
  if (den == 0) throw DegenerateInputError("weighted_mean: zero total count");
  return num / static_cast<double>(den);
}

/// Builds the report. `group_of_category` assigns every category to one
/// meta-task group; a task whose category is unassigned is an orphan and
/// raises. Category, group and overall values are count-weighted means of
/// the level below, listed in first-appearance order.
inline EvalReport aggregate(std::vector<TaskResult> results,
                            const std::map<std::string, std::string>& group_of_category) {
  EvalReport report;
  std::vector<std::string> cat_order, group_order;
  std::map<std::string, std::vector<WeightedScore>> cat_members, group_members;
  for (auto& r : results) {
    auto it = group_of_category.find(r.category);
    if (it == group_of_category.end()) {
      throw ValidationError("aggregate: task '" + r.task + "' has unassigned category '" +
                            r.category + "'");
    }
    r.group = it->second;
    if (!cat_members.contains(r.category)) cat_order.push_back(r.category);
    cat_members[r.category].push_back({r.value, 1});
  }
  for (const auto& c : cat_order) {
    const auto& members = cat_members[c];
    const auto& group = group_of_category.at(c);
    CategorySummary cs{c, group, weighted_mean(members), members.size()};
    if (!group_members.contains(group)) group_order.push_back(group);
    group_members[group].push_back({cs.value, cs.task_count});
    report.categories.push_back(cs);
  }
  std::vector<WeightedScore> top;
  for (const auto& g : group_order) {
    const auto& members = group_members[g];
    std::size_t n = 0;
    for (const auto& m : members) n += m.count;
    report.groups.push_back({g, weighted_mean(members), n});
    top.push_back({report.groups.back().value, n});
  }
  report.task_count = results.size();
  report.overall = top.empty() ? 0.0 : weighted_mean(top);
  report.tasks = std::move(results);
  return report;
}

/// Convenience overload that groups categories by their I-/V-/D- prefix.
inline EvalReport aggregate(std::vector<TaskResult> results) {
  std::map<std::string, std::string> groups;
  for (const auto& r : results) {
    if (!r.group.empty()) {
      groups[r.category] = r.group;
    } else if (auto g = default_group_of(r.category)) {
      groups[r.category] = *g;
    }
  }
  return aggregate(std::move(results), groups);
}

}  // namespace uemb
