#pragma once

// Classification heads: softmax cross-entropy over a dense layer, and the
// additive-margin cosine heads CosFace (s*(cos - m)) and ArcFace
// (s*cos(theta + m)) over unit class-weight rows.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/layers.hpp"
#include "voxprint/tensor.hpp"

namespace voxprint {

enum class LossFamily { softmax, cosface, arcface };

inline std::string to_string(LossFamily f) {
  switch (f) {
    case LossFamily::softmax: return "softmax";
    case LossFamily::cosface: return "cosface";
    case LossFamily::arcface: return "arcface";
  }
  return "?";
}

inline LossFamily parse_loss_family(std::string_view s) {
  if (s == "softmax") return LossFamily::softmax;
  if (s == "cosface") return LossFamily::cosface;
  if (s == "arcface") return LossFamily::arcface;
  throw ConfigError("unknown loss '" + std::string(s) + "' (expected softmax, cosface or arcface)");
}

struct LossConfig {
  LossFamily family = LossFamily::cosface;
  double s = 22.0;
  double m = 0.2;
  int num_classes = 2;

  [[nodiscard]] bool uses_cosine_head() const { return family != LossFamily::softmax; }

  void validate() const {
    if (!(s > 0.0)) throw ConfigError("LossConfig requires s > 0");
    if (num_classes < 2) throw ConfigError("LossConfig requires num_classes >= 2");
    if (family == LossFamily::cosface && !(m >= 0.0 && m < 1.0)) {
      throw ConfigError("cosface margin must lie in [0, 1)");
    }
    if (family == LossFamily::arcface && !(m >= 0.0 && m < std::numbers::pi / 2)) {
      throw ConfigError("arcface margin must lie in [0, pi/2)");
    }
  }
};

inline constexpr double kArcClamp = 1e-7;

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ArgumentError("label " + std::to_string(y) + " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace detail

template <typename T>
struct CrossEntropy {
  double loss = 0.0;
  Tensor<T> grad_logits;
};

/// Mean negative log-likelihood of softmax(logits) at the labels, with the
/// usual (softmax - onehot)/n gradient.
template <typename T>
CrossEntropy<T> softmax_ce(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "logits must be [N,K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  detail::check_labels(labels, N, K);
  CrossEntropy<T> r{0.0, Tensor<T>(logits.shape())};
  std::vector<double> p(K);
  for (std::size_t n = 0; n < N; ++n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at(n, k)));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      p[k] = std::exp(static_cast<double>(logits.at(n, k)) - mx);
      z += p[k];
    }
    const auto y = static_cast<std::size_t>(labels[n]);
    r.loss += std::log(z) - (static_cast<double>(logits.at(n, y)) - mx);
    for (std::size_t k = 0; k < K; ++k) {
      r.grad_logits.at(n, k) = static_cast<T>((p[k] / z - (k == y ? 1.0 : 0.0)) / static_cast<double>(N));
    }
  }
  r.loss /= static_cast<double>(N);
  return r;
}

template <typename T>
struct CosineLogits {
  Tensor<T> cos_theta;           // [N,K], clamped to [-1, 1]
  std::vector<bool> clamped;     // entries where the raw dot product left [-1, 1]
};

/// cos_theta = embeddings * weights^T for unit rows.
template <typename T>
CosineLogits<T> cosine_logits(const Tensor<T>& embeddings, const Tensor<T>& weights) {
  CosineLogits<T> r{dense_forward<T>(embeddings, weights, nullptr), {}};
  r.clamped.resize(r.cos_theta.size());
  for (std::size_t i = 0; i < r.cos_theta.size(); ++i) {
    T& c = r.cos_theta[i];
    if (c > T{1} || c < T{-1}) {
      r.clamped[i] = true;
      c = std::clamp(c, T{-1}, T{1});
    }
  }
  return r;
}

/// logit(i,j) = s * (cos(i,j) - m [j == y_i]).
template <typename T>
Tensor<T> cosface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m) {
  require(cos_theta.rank() == 2, "cos_theta must be [N,K]");
  detail::check_labels(labels, cos_theta.dim(0), cos_theta.dim(1));
  Tensor<T> z(cos_theta.shape());
  for (std::size_t n = 0; n < cos_theta.dim(0); ++n) {
    for (std::size_t k = 0; k < cos_theta.dim(1); ++k) {
      const double margin = static_cast<int>(k) == labels[n] ? m : 0.0;
      z.at(n, k) = static_cast<T>(s * (static_cast<double>(cos_theta.at(n, k)) - margin));
    }
  }
  return z;
}

/// Target entry s * cos(acos(c) + m) with c clamped into (-1, 1) by 1e-7;
/// other entries s * cos.
template <typename T>
Tensor<T> arcface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m) {
  require(cos_theta.rank() == 2, "cos_theta must be [N,K]");
  detail::check_labels(labels, cos_theta.dim(0), cos_theta.dim(1));
  Tensor<T> z(cos_theta.shape());
  for (std::size_t n = 0; n < cos_theta.dim(0); ++n) {
    for (std::size_t k = 0; k < cos_theta.dim(1); ++k) {
      const double c = static_cast<double>(cos_theta.at(n, k));
      if (static_cast<int>(k) == labels[n]) {
        const double theta = std::acos(std::clamp(c, -1.0 + kArcClamp, 1.0 - kArcClamp));
        z.at(n, k) = static_cast<T>(s * std::cos(theta + m));
      } else {
        z.at(n, k) = static_cast<T>(s * c);
      }
    }
  }
  return z;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad_embeddings;
  Tensor<T> grad_weights;
  Tensor<T> grad_bias;  // empty for the cosine heads
  Tensor<T> scores;     // margin-free class scores used for prediction
};

/// Loss and exact gradients for one batch. `bias` is used by the softmax
/// family only; the cosine families expect unit rows in `weights`.
template <typename T>
LossResult<T> loss_forward_backward(const LossConfig& cfg, const Tensor<T>& embeddings, const Tensor<T>& weights,
                                    const Tensor<T>* bias, std::span<const int> labels) {
  cfg.validate();
  require(weights.rank() == 2 && weights.dim(0) == static_cast<std::size_t>(cfg.num_classes),
          "head weights must be [num_classes, D], got " + shape_string(weights.shape()));
  LossResult<T> r;

  if (cfg.family == LossFamily::softmax) {
    r.scores = dense_forward<T>(embeddings, weights, bias);
    auto ce = softmax_ce(r.scores, labels);
    auto g = dense_backward<T>(embeddings, weights, ce.grad_logits);
    r.loss = ce.loss;
    r.grad_embeddings = std::move(g.grad_x);
    r.grad_weights = std::move(g.grad_weight);
    if (bias != nullptr) r.grad_bias = std::move(g.grad_bias);
    return r;
  }

  auto cl = cosine_logits(embeddings, weights);
  const Tensor<T> z = cfg.family == LossFamily::cosface ? cosface_logits(cl.cos_theta, labels, cfg.s, cfg.m)
                                                        : arcface_logits(cl.cos_theta, labels, cfg.s, cfg.m);
  auto ce = softmax_ce(z, labels);

  // Chain rule through the margin map back to cos_theta.
  Tensor<T> grad_cos = ce.grad_logits;
  const std::size_t N = z.dim(0), K = z.dim(1);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      double dz = cfg.s;
      if (cfg.family == LossFamily::arcface && static_cast<int>(k) == labels[n]) {
        const double c = static_cast<double>(cl.cos_theta.at(n, k));
        if (c <= -1.0 + kArcClamp || c >= 1.0 - kArcClamp) {
          dz = 0.0;
        } else {
          const double theta = std::acos(c);
          dz = cfg.s * std::sin(theta + cfg.m) / std::sin(theta);
        }
      }
      if (cl.clamped[n * K + k]) dz = 0.0;
      grad_cos.at(n, k) = static_cast<T>(static_cast<double>(grad_cos.at(n, k)) * dz);
    }
  }
  auto g = dense_backward<T>(embeddings, weights, grad_cos);
  r.loss = ce.loss;
  r.grad_embeddings = std::move(g.grad_x);
  r.grad_weights = std::move(g.grad_weight);
  r.scores = std::move(cl.cos_theta);
  return r;
}

/// Rescales every row to unit length (the cosine-head weight schedule).
template <typename T>
void renormalize_rows(Tensor<T>& w) {
  require(w.rank() == 2, "renormalize_rows expects a matrix");
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    T s{};
    for (std::size_t c = 0; c < w.dim(1); ++c) s += w.at(r, c) * w.at(r, c);
    const T norm = std::sqrt(s);
    if (!(norm > T{})) throw DegenerateError("class weight row " + std::to_string(r) + " has zero norm");
    for (std::size_t c = 0; c < w.dim(1); ++c) w.at(r, c) /= norm;
  }
}

}  // namespace voxprint
