#pragma once

#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

#include "uemb/embedding_set.hpp"
#include "uemb/random.hpp"
#include "uemb/retrieval.hpp"
#include "uemb/tensor.hpp"
#include "uemb/train.hpp"

namespace uemb {

/// Latent-cluster retrieval task: every query and target is its cluster's
/// center plus isotropic Gaussian noise, and a query's positive is a target
/// from the same cluster. Clusters are dealt round-robin to sources, so a
/// single-source sub-batch only sees a slice of the clusters.
struct ClusterTaskOptions {
  std::size_t clusters = 32;
  std::size_t dim = 32;
  std::size_t sources = 4;
  std::size_t examples_per_source = 512;
  double noise = 0.1;
  std::size_t heldout_per_cluster = 8;
};

struct ClusterTask {
  DenseMatrix centers;
  std::vector<TrainingSource> sources;
  /// Fresh queries, a pool with one fresh target per cluster, and the gold
  /// target of each query.
  EmbeddingSet heldout_queries;
  EmbeddingSet heldout_pool;
  std::vector<QueryJudgement> judgements;
};

inline std::string cluster_id(std::size_t c) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "c%03zu", c);
  return buf;
}

inline ClusterTask make_cluster_task(const ClusterTaskOptions& opt, Rng& rng) {
  if (opt.clusters == 0 || opt.sources == 0 || opt.dim == 0 || opt.sources > opt.clusters) {
    throw ValidationError("cluster task: need clusters >= sources >= 1 and dim >= 1");
  }
  ClusterTask task;
  task.centers = DenseMatrix(opt.clusters, opt.dim);
  for (double& v : task.centers.values()) v = rng.normal();

  auto sample_near = [&](std::size_t c, std::span<double> out) {
    for (std::size_t k = 0; k < opt.dim; ++k) out[k] = task.centers(c, k) + rng.normal(0.0, opt.noise);
  };

  for (std::size_t s = 0; s < opt.sources; ++s) {
    std::vector<std::size_t> owned;
    for (std::size_t c = s; c < opt.clusters; c += opt.sources) owned.push_back(c);
    TrainingSource src{"source" + std::to_string(s), 1.0, DenseMatrix(opt.examples_per_source, opt.dim),
                       DenseMatrix(opt.examples_per_source, opt.dim), {}};
    for (std::size_t e = 0; e < opt.examples_per_source; ++e) {
      const std::size_t c = owned[rng.below(owned.size())];
      sample_near(c, src.queries.row(e));
      sample_near(c, src.targets.row(e));
      src.target_ids.push_back(cluster_id(c));
    }
    task.sources.push_back(std::move(src));
  }

  std::vector<std::string> pool_ids;
  DenseMatrix pool(opt.clusters, opt.dim);
  for (std::size_t c = 0; c < opt.clusters; ++c) {
    pool_ids.push_back(cluster_id(c));
    sample_near(c, pool.row(c));
  }
  std::vector<std::string> query_ids;
  DenseMatrix queries(opt.clusters * opt.heldout_per_cluster, opt.dim);
  for (std::size_t c = 0; c < opt.clusters; ++c) {
    for (std::size_t k = 0; k < opt.heldout_per_cluster; ++k) {
      const std::size_t row = c * opt.heldout_per_cluster + k;
      query_ids.push_back("q" + cluster_id(c).substr(1) + "_" + std::to_string(k));
      sample_near(c, queries.row(row));
      task.judgements.push_back({query_ids.back(), {cluster_id(c)}, {}});
    }
  }
  task.heldout_queries = EmbeddingSet(std::move(query_ids), std::move(queries));
  task.heldout_pool = EmbeddingSet(std::move(pool_ids), std::move(pool));
  return task;
}

}  // namespace uemb
