#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "uemb/error.hpp"
#include "uemb/random.hpp"
#include "uemb/tensor.hpp"

namespace uemb {

/// Additive low-rank update (alpha / rank) * A * B on the output projection.
struct LowRankAdapter {
  DenseMatrix a;  // H x r
  DenseMatrix b;  // r x D_out
  double alpha = 32.0;

  std::size_t rank() const { return a.cols(); }
  double scale() const { return alpha / static_cast<double>(rank()); }

  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

/// Two-layer tanh perceptron over pre-extracted feature vectors:
/// y = tanh(x W1 + b1) W_eff + b2.
struct ToyEncoderParams {
  DenseMatrix w1;  // D_in x H
  RowVector b1;    // H
  DenseMatrix w2;  // H x D_out
  RowVector b2;    // D_out
  std::optional<LowRankAdapter> adapter;

  std::size_t input_dim() const { return w1.rows(); }
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t output_dim() const { return w2.cols(); }

  void validate() const {
    if (b1.dim() != w1.cols() || w2.rows() != w1.cols() || b2.dim() != w2.cols()) {
      throw DimensionError("encoder parameters: inconsistent shapes");
    }
    if (adapter) {
      if (adapter->rank() == 0 || adapter->a.rows() != w2.rows() ||
          adapter->b.rows() != adapter->rank() || adapter->b.cols() != w2.cols()) {
        throw DimensionError("encoder parameters: adapter shapes do not match W2");
      }
      if (!(adapter->alpha > 0.0)) throw ValidationError("adapter alpha must be positive");
    }
  }

  friend bool operator==(const ToyEncoderParams&, const ToyEncoderParams&) = default;
};

/// Visits every trainable tensor in a fixed order: w1, b1, w2, b2, then the
/// adapter's a and b. Adapter alpha is a hyperparameter and is not visited.
template <class Params, class Fn>
  requires std::same_as<std::remove_const_t<Params>, ToyEncoderParams>
void for_each_tensor(Params& p, Fn&& fn) {
  fn(std::string_view("w1"), p.w1.values());
  fn(std::string_view("b1"), p.b1.values());
  fn(std::string_view("w2"), p.w2.values());
  fn(std::string_view("b2"), p.b2.values());
  if (p.adapter) {
    fn(std::string_view("adapter.a"), p.adapter->a.values());
    fn(std::string_view("adapter.b"), p.adapter->b.values());
  }
}

inline bool is_adapter_tensor(std::string_view name) { return name.starts_with("adapter."); }

/// Same shapes as `p`, all zeros.
inline ToyEncoderParams zeros_like(const ToyEncoderParams& p) {
  ToyEncoderParams z{DenseMatrix(p.w1.rows(), p.w1.cols()), RowVector(p.b1.dim()),
                     DenseMatrix(p.w2.rows(), p.w2.cols()), RowVector(p.b2.dim()), std::nullopt};
  if (p.adapter) {
    z.adapter = LowRankAdapter{DenseMatrix(p.adapter->a.rows(), p.adapter->a.cols()),
                               DenseMatrix(p.adapter->b.rows(), p.adapter->b.cols()),
                               p.adapter->alpha};
  }
  return z;
}

/// W2 + (alpha / r) A B, or W2 itself when there is no adapter.
inline DenseMatrix effective_weight(const ToyEncoderParams& p) {
  if (!p.adapter) return p.w2;
  const auto& ad = *p.adapter;
  DenseMatrix w = p.w2;
  const double s = ad.scale();
  for (std::size_t h = 0; h < w.rows(); ++h) {
    for (std::size_t o = 0; o < w.cols(); ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < ad.rank(); ++k) acc += ad.a(h, k) * ad.b(k, o);
      if (acc != 0.0) w(h, o) += s * acc;
    }
  }
  return w;
}

/// Folds the adapter into W2.
inline ToyEncoderParams merge_adapter(const ToyEncoderParams& p) {
  if (!p.adapter) throw ValidationError("merge_adapter: no adapter present");
  ToyEncoderParams merged = p;
  merged.w2 = effective_weight(p);
  merged.adapter.reset();
  return merged;
}

/// Random encoder: Xavier-uniform weights, zero biases. With adapter_rank > 0
/// an adapter is attached with A uniform in +-1/sqrt(H) and B = 0, so the
/// adapted encoder starts out identical to the base one.
inline ToyEncoderParams init_toy_encoder(std::size_t input_dim, std::size_t hidden_dim,
                                         std::size_t output_dim, Rng& rng,
                                         std::size_t adapter_rank = 0, double adapter_alpha = 32.0) {
  if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) {
    throw ValidationError("init_toy_encoder: dimensions must be positive");
  }
  auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    DenseMatrix w(fan_in, fan_out);
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    return w;
  };
  ToyEncoderParams p{xavier(input_dim, hidden_dim), RowVector(hidden_dim),
                     xavier(hidden_dim, output_dim), RowVector(output_dim), std::nullopt};
  if (adapter_rank > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    DenseMatrix a(hidden_dim, adapter_rank);
    for (double& v : a.values()) v = rng.uniform(-bound, bound);
    p.adapter = LowRankAdapter{std::move(a), DenseMatrix(adapter_rank, output_dim), adapter_alpha};
  }
  p.validate();
  return p;
}

namespace detail {

inline void hidden_layer(const ToyEncoderParams& p, std::span<const double> x, std::span<double> h) {
  for (std::size_t j = 0; j < h.size(); ++j) h[j] = p.b1[j];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const auto w_row = p.w1.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += xi * w_row[j];
  }
  for (double& v : h) v = std::tanh(v);
}

inline void output_layer(const DenseMatrix& w_eff, const RowVector& b2, std::span<const double> h,
                         std::span<double> y) {
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = b2[o];
  for (std::size_t j = 0; j < h.size(); ++j) {
    const double hj = h[j];
    const auto w_row = w_eff.row(j);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += hj * w_row[o];
  }
}

}  // namespace detail

inline RowVector encode(const ToyEncoderParams& p, std::span<const double> features) {
  if (features.size() != p.input_dim()) {
    throw DimensionError("encode: expected " + std::to_string(p.input_dim()) +
                         " features, got " + std::to_string(features.size()));
  }
  const auto w_eff = effective_weight(p);
  std::vector<double> h(p.hidden_dim()), y(p.output_dim());
  detail::hidden_layer(p, features, h);
  detail::output_layer(w_eff, p.b2, h, y);
  return RowVector(std::move(y));
}

/// Row-wise encode. Rows do not interact, so any row split gives the same bits.
inline DenseMatrix encode_batch(const ToyEncoderParams& p, const DenseMatrix& features) {
  if (features.cols() != p.input_dim()) {
    throw DimensionError("encode_batch: expected " + std::to_string(p.input_dim()) +
                         " features, got " + std::to_string(features.cols()));
  }
  const auto w_eff = effective_weight(p);
  DenseMatrix out(features.rows(), p.output_dim());
  std::vector<double> h(p.hidden_dim());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    detail::hidden_layer(p, features.row(r), h);
    detail::output_layer(w_eff, p.b2, h, out.row(r));
  }
  if (!std::all_of(out.values().begin(), out.values().end(), [](double v) { return std::isfinite(v); })) {
    throw DegenerateInputError("encode_batch: non-finite output");
  }
  return out;
}

/// Recomputes activations for `features` and adds d(loss)/d(params) for the
/// given output gradients into `grads`, one row at a time in row order.
inline void accumulate_encoder_gradients(const ToyEncoderParams& p, const DenseMatrix& features,
                                         const DenseMatrix& d_out, ToyEncoderParams& grads) {
  if (features.rows() != d_out.rows() || d_out.cols() != p.output_dim() ||
      features.cols() != p.input_dim()) {
    throw DimensionError("accumulate_encoder_gradients: shape mismatch");
  }
  const auto w_eff = effective_weight(p);
  const std::size_t hid = p.hidden_dim();
  const std::size_t out_dim = p.output_dim();
  std::vector<double> h(hid), dh(hid);
  // d_out flows into W_eff; W2 and the adapter share that gradient.
  DenseMatrix d_weff(hid, out_dim);
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const auto x = features.row(r);
    const auto dy = d_out.row(r);
    detail::hidden_layer(p, x, h);
    for (std::size_t o = 0; o < out_dim; ++o) grads.b2[o] += dy[o];
    for (std::size_t j = 0; j < hid; ++j) {
      auto gw = d_weff.row(j);
      const auto w_row = w_eff.row(j);
      double acc = 0.0;
      for (std::size_t o = 0; o < out_dim; ++o) {
        gw[o] += h[j] * dy[o];
        acc += w_row[o] * dy[o];
      }
      dh[j] = acc * (1.0 - h[j] * h[j]);
    }
    for (std::size_t j = 0; j < hid; ++j) grads.b1[j] += dh[j];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      auto gw = grads.w1.row(i);
      for (std::size_t j = 0; j < hid; ++j) gw[j] += xi * dh[j];
    }
  }
  for (std::size_t k = 0; k < d_weff.size(); ++k) grads.w2.values()[k] += d_weff.values()[k];
  if (p.adapter) {
    const auto& ad = *p.adapter;
    auto& ga = *grads.adapter;
    const double s = ad.scale();
    // dA = s dW B^T, dB = s A^T dW
    for (std::size_t j = 0; j < hid; ++j) {
      for (std::size_t k = 0; k < ad.rank(); ++k) {
        double acc = 0.0;
        for (std::size_t o = 0; o < out_dim; ++o) acc += d_weff(j, o) * ad.b(k, o);
        ga.a(j, k) += s * acc;
      }
    }
    for (std::size_t k = 0; k < ad.rank(); ++k) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hid; ++j) acc += ad.a(j, k) * d_weff(j, o);
        ga.b(k, o) += s * acc;
      }
    }
  }
}

/// Adapter for generic code (the gradient cache) that needs an encoder with
/// batch encode and gradient accumulation.
class ToyEncoder {
 public:
  using Gradients = ToyEncoderParams;

  explicit ToyEncoder(ToyEncoderParams params) : params_(std::move(params)) { params_.validate(); }

  DenseMatrix encode_batch(const DenseMatrix& features) const {
    return uemb::encode_batch(params_, features);
  }
  Gradients zero_gradients() const { return zeros_like(params_); }
  void accumulate_gradients(const DenseMatrix& features, const DenseMatrix& d_out,
                            Gradients& grads) const {
    accumulate_encoder_gradients(params_, features, d_out, grads);
  }

  const ToyEncoderParams& params() const noexcept { return params_; }
  ToyEncoderParams& params() noexcept { return params_; }

 private:
  ToyEncoderParams params_;
};

enum class OptimizerKind { adam, sgd };

/// First-order optimizer over the tensors visited by for_each_tensor.
/// Adam uses beta1 = 0.9, beta2 = 0.999, eps = 1e-8 with bias correction.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  }

  /// Applies one update. With freeze_base set, only adapter tensors move.
  void step(ToyEncoderParams& params, ToyEncoderParams& grads, bool freeze_base = false) {
    ++t_;
    std::vector<std::span<double>> g_views;
    for_each_tensor(grads, [&](std::string_view, std::span<double> g) { g_views.push_back(g); });
    std::size_t idx = 0;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for_each_tensor(params, [&](std::string_view name, std::span<double> w) {
      const auto g = g_views.at(idx);
      if (m_.size() <= idx) {
        m_.emplace_back(w.size(), 0.0);
        v_.emplace_back(w.size(), 0.0);
      }
      auto& m = m_[idx];
      auto& v = v_[idx];
      ++idx;
      if (freeze_base && !is_adapter_tensor(name)) return;
      for (std::size_t k = 0; k < w.size(); ++k) {
        if (kind_ == OptimizerKind::sgd) {
          w[k] -= lr_ * g[k];
          continue;
        }
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
        const double m_hat = m[k] / bc1;
        const double v_hat = v[k] / bc2;
        w[k] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
      }
    });
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace uemb
