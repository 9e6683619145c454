#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

#include "uemb/contrastive.hpp"
#include "uemb/error.hpp"
#include "uemb/tensor.hpp"

namespace uemb {

/// An encoder usable by grad_cache_run: encode rows without keeping
/// activations, and re-encode rows to turn output gradients into parameter
/// gradients accumulated into a caller-owned buffer.
template <class E>
concept CachingEncoder = requires(const E& e, const DenseMatrix& x, typename E::Gradients& g) {
  { e.encode_batch(x) } -> std::same_as<DenseMatrix>;
  { e.zero_gradients() } -> std::same_as<typename E::Gradients>;
  e.accumulate_gradients(x, x, g);
};

/// Raw inputs for one contrastive step: query and target features that the
/// encoder turns into the embeddings of a ContrastiveBatch.
struct FeatureBatch {
  DenseMatrix query_features;
  DenseMatrix target_features;
  std::vector<std::size_t> positive_index;
  std::vector<std::string> target_ids;
  std::vector<std::vector<std::size_t>> hard_negative_rows;
};

template <class Gradients>
struct GradCacheResult {
  double loss = 0.0;
  Gradients gradients;
};

namespace detail {

template <CachingEncoder E>
DenseMatrix encode_in_chunks(const E& encoder, const DenseMatrix& features, std::size_t chunk) {
  if (features.rows() == 0) return encoder.encode_batch(features);
  DenseMatrix out;
  for (std::size_t first = 0; first < features.rows(); first += chunk) {
    const std::size_t n = std::min(chunk, features.rows() - first);
    DenseMatrix part = encoder.encode_batch(features.slice_rows(first, n));
    if (first == 0) out = DenseMatrix(features.rows(), part.cols());
    std::copy(part.values().begin(), part.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(first * out.cols()));
  }
  return out;
}

template <CachingEncoder E>
void backprop_in_chunks(const E& encoder, const DenseMatrix& features, const DenseMatrix& d_emb,
                        std::size_t chunk, typename E::Gradients& grads) {
  for (std::size_t first = 0; first < features.rows(); first += chunk) {
    const std::size_t n = std::min(chunk, features.rows() - first);
    encoder.accumulate_gradients(features.slice_rows(first, n), d_emb.slice_rows(first, n), grads);
  }
}

}  // namespace detail

/// Two-pass gradient cache.
///
/// Pass 1 embeds queries and targets chunk by chunk without activation state
/// and computes the loss together with its gradient with respect to every
/// embedding. Pass 2 re-encodes each chunk and back-propagates the cached
/// embedding gradients into the parameters. Chunks are reduced sequentially,
/// queries first, so a single chunk reproduces full-batch backprop exactly.
/// chunk_size larger than the batch is clamped.
template <CachingEncoder E>
GradCacheResult<typename E::Gradients> grad_cache_run(const E& encoder, const FeatureBatch& batch,
                                                      std::size_t chunk_size,
                                                      const LossConfig& cfg) {
  if (chunk_size == 0) throw ValidationError("grad_cache_run: chunk size must be at least 1");
  const std::size_t largest = std::max(batch.query_features.rows(), batch.target_features.rows());
  const std::size_t chunk = std::min(chunk_size, std::max<std::size_t>(largest, 1));

  ContrastiveBatch emb{detail::encode_in_chunks(encoder, batch.query_features, chunk),
                       detail::encode_in_chunks(encoder, batch.target_features, chunk),
                       batch.positive_index,
                       batch.target_ids,
                       batch.hard_negative_rows,
                       {}};
  const LossOutput lo = info_nce_backward(emb, cfg);

  GradCacheResult<typename E::Gradients> result{lo.loss, encoder.zero_gradients()};
  detail::backprop_in_chunks(encoder, batch.query_features, lo.d_query, chunk, result.gradients);
  detail::backprop_in_chunks(encoder, batch.target_features, lo.d_target, chunk, result.gradients);
  return result;
}

}  // namespace uemb
