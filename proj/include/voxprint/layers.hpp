#pragma once

// Forward and backward passes of the fixed layer set: 3x3 convolution,
// 2x2 max-pool, global average pool, dense, ReLU, inverted dropout and row
// L2 normalization. All functions are pure; gradients are returned, not
// accumulated.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/tensor.hpp"

namespace voxprint {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedConstMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

inline constexpr std::size_t kIm2colBudget = 1U << 18;  // elements per tile

inline std::size_t conv_tile_rows(std::size_t channels, std::size_t height, std::size_t width) {
  const std::size_t per_row = channels * 9 * width;
  return std::clamp<std::size_t>(kIm2colBudget / std::max<std::size_t>(per_row, 1), 1, height);
}

/// cols(c*9 + ky*3 + kx, (y-y0)*W + x) = in(c, y+ky-1, x+kx-1), zero outside.
template <typename T>
void im2col_rows(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t y0, std::size_t y1, T* cols) {
  const std::size_t P = (y1 - y0) * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = in + c * H * W;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * P;
        for (std::size_t y = y0; y < y1; ++y) {
          T* row = dst + (y - y0) * W;
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(row, row + W, T{});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * W;
          if (kx == 0) {
            row[0] = T{};
            std::copy(src, src + W - 1, row + 1);
          } else if (kx == 1) {
            std::copy(src, src + W, row);
          } else {
            std::copy(src + 1, src + W, row);
            row[W - 1] = T{};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_rows_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t y0, std::size_t y1, T* out) {
  const std::size_t P = (y1 - y0) * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = out + c * H * W;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * P;
        for (std::size_t y = y0; y < y1; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          const T* row = src + (y - y0) * W;
          T* dst = plane + static_cast<std::size_t>(sy) * W;
          if (kx == 0) {
            for (std::size_t x = 1; x < W; ++x) dst[x - 1] += row[x];
          } else if (kx == 1) {
            for (std::size_t x = 0; x < W; ++x) dst[x] += row[x];
          } else {
            for (std::size_t x = 0; x + 1 < W; ++x) dst[x + 1] += row[x];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() == 4, "conv2d input must be [N,C,H,W], got " + shape_string(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == 3 && weight.dim(3) == 3,
          "conv2d weight must be [F,C,3,3], got " + shape_string(weight.shape()));
  require(weight.dim(1) == x.dim(1), "conv2d channel mismatch: input " + shape_string(x.shape()) + ", weight " +
                                         shape_string(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv2d bias must be [F]");
}

}  // namespace detail

/// 3x3 cross-correlation, stride 1, zero padding 1.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_conv_shapes(x, weight, bias);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = weight.dim(0);
  Tensor<T> y({N, F, H, W});
  const std::size_t tile = detail::conv_tile_rows(C, H, W);
  std::vector<T> cols(C * 9 * tile * W);
  detail::MapConstMat<T> wmat(weight.ptr(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(C * 9));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.ptr(), static_cast<Eigen::Index>(F));

  for (std::size_t n = 0; n < N; ++n) {
    const T* in = x.ptr() + n * C * H * W;
    T* out = y.ptr() + n * F * H * W;
    for (std::size_t y0 = 0; y0 < H; y0 += tile) {
      const std::size_t y1 = std::min(H, y0 + tile);
      const std::size_t P = (y1 - y0) * W;
      detail::im2col_rows(in, C, H, W, y0, y1, cols.data());
      detail::MapConstMat<T> cm(cols.data(), static_cast<Eigen::Index>(C * 9), static_cast<Eigen::Index>(P));
      detail::StridedMat<T> ym(out + y0 * W, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(P),
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(H * W)));
      ym.noalias() = wmat * cm;
      ym.colwise() += b;
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> grad_x;  // empty when not requested
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                             bool need_grad_x = true) {
  detail::check_conv_shapes(x, weight, Tensor<T>({weight.dim(0)}));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = weight.dim(0);
  require(grad_out.shape() == Shape({N, F, H, W}), "conv2d grad_out shape mismatch: " + shape_string(grad_out.shape()));

  ConvGrads<T> g;
  g.grad_weight = Tensor<T>(weight.shape());
  g.grad_bias = Tensor<T>({F});
  if (need_grad_x) g.grad_x = Tensor<T>(x.shape());

  const std::size_t tile = detail::conv_tile_rows(C, H, W);
  std::vector<T> cols(C * 9 * tile * W);
  std::vector<T> gcols(need_grad_x ? cols.size() : 0);
  detail::MapConstMat<T> wmat(weight.ptr(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(C * 9));
  detail::MapMat<T> gw(g.grad_weight.ptr(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(C * 9));

  for (std::size_t n = 0; n < N; ++n) {
    const T* in = x.ptr() + n * C * H * W;
    const T* go = grad_out.ptr() + n * F * H * W;
    for (std::size_t f = 0; f < F; ++f) {
      T s{};
      const T* p = go + f * H * W;
      for (std::size_t i = 0; i < H * W; ++i) s += p[i];
      g.grad_bias[f] += s;
    }
    for (std::size_t y0 = 0; y0 < H; y0 += tile) {
      const std::size_t y1 = std::min(H, y0 + tile);
      const std::size_t P = (y1 - y0) * W;
      detail::im2col_rows(in, C, H, W, y0, y1, cols.data());
      detail::MapConstMat<T> cm(cols.data(), static_cast<Eigen::Index>(C * 9), static_cast<Eigen::Index>(P));
      detail::StridedConstMat<T> gm(go + y0 * W, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(P),
                                    Eigen::OuterStride<>(static_cast<Eigen::Index>(H * W)));
      gw.noalias() += gm * cm.transpose();
      if (need_grad_x) {
        detail::MapMat<T> gc(gcols.data(), static_cast<Eigen::Index>(C * 9), static_cast<Eigen::Index>(P));
        gc.noalias() = wmat.transpose() * gm;
        detail::col2im_rows_add(gcols.data(), C, H, W, y0, y1, g.grad_x.ptr() + n * C * H * W);
      }
    }
  }
  return g;
}

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input offset within each (n, c) plane
};

/// 2x2 max-pool, stride 2. Ties go to the first position in row-major order.
template <typename T>
PoolResult<T> maxpool2_forward(const Tensor<T>& x) {
  require(x.rank() == 4, "maxpool2 input must be [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2 needs even spatial dims, got " + shape_string(x.shape()));
  const std::size_t OH = H / 2, OW = W / 2;
  PoolResult<T> r{Tensor<T>({N, C, OH, OW}), std::vector<std::uint32_t>(N * C * OH * OW)};
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* in = x.ptr() + p * H * W;
    T* out = r.output.ptr() + p * OH * OW;
    std::uint32_t* am = r.argmax.data() + p * OH * OW;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        for (std::size_t off : {best + 1, best + W, best + W + 1}) {
          if (in[off] > in[best]) best = off;
        }
        out[oy * OW + ox] = in[best];
        am[oy * OW + ox] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax, const Tensor<T>& grad_out) {
  require(input_shape.size() == 4, "maxpool2 input shape must be [N,C,H,W]");
  const std::size_t N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  require(grad_out.shape() == Shape({N, C, H / 2, W / 2}), "maxpool2 grad_out shape mismatch");
  require(argmax.size() == grad_out.size(), "maxpool2 argmax size mismatch");
  Tensor<T> gx(input_shape);
  const std::size_t plane_out = (H / 2) * (W / 2);
  for (std::size_t p = 0; p < N * C; ++p) {
    T* dst = gx.ptr() + p * H * W;
    for (std::size_t i = 0; i < plane_out; ++i) dst[argmax[p * plane_out + i]] += grad_out[p * plane_out + i];
  }
  return gx;
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  require(x.rank() == 4, "global_avg_pool input must be [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C});
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* in = x.ptr() + p * HW;
    T s{};
    for (std::size_t i = 0; i < HW; ++i) s += in[i];
    y[p] = s / static_cast<T>(HW);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  require(input_shape.size() == 4 && grad_out.shape() == Shape({input_shape[0], input_shape[1]}),
          "global_avg_pool grad_out shape mismatch");
  const std::size_t HW = input_shape[2] * input_shape[3];
  Tensor<T> gx(input_shape);
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    const T g = grad_out[p] / static_cast<T>(HW);
    std::fill_n(gx.ptr() + p * HW, HW, g);
  }
  return gx;
}

/// y = x W^T + b with x [N,I], W [O,I], b [O].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1),
          "dense shape mismatch: input " + shape_string(x.shape()) + ", weight " + shape_string(weight.shape()));
  const auto N = static_cast<Eigen::Index>(x.dim(0));
  const auto I = static_cast<Eigen::Index>(x.dim(1));
  const auto O = static_cast<Eigen::Index>(weight.dim(0));
  Tensor<T> y({x.dim(0), weight.dim(0)});
  detail::MapMat<T> ym(y.ptr(), N, O);
  ym.noalias() = detail::MapConstMat<T>(x.ptr(), N, I) * detail::MapConstMat<T>(weight.ptr(), O, I).transpose();
  if (bias != nullptr) {
    require(bias->rank() == 1 && bias->dim(0) == weight.dim(0), "dense bias must be [O]");
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->ptr(), O);
  }
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out) {
  require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1), "dense shape mismatch");
  require(grad_out.shape() == Shape({x.dim(0), weight.dim(0)}), "dense grad_out shape mismatch");
  const auto N = static_cast<Eigen::Index>(x.dim(0));
  const auto I = static_cast<Eigen::Index>(x.dim(1));
  const auto O = static_cast<Eigen::Index>(weight.dim(0));
  DenseGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({weight.dim(0)})};
  detail::MapConstMat<T> gm(grad_out.ptr(), N, O);
  detail::MapMat<T>(g.grad_x.ptr(), N, I).noalias() = gm * detail::MapConstMat<T>(weight.ptr(), O, I);
  detail::MapMat<T>(g.grad_weight.ptr(), O, I).noalias() = gm.transpose() * detail::MapConstMat<T>(x.ptr(), N, I);
  // Plain row-order sum: Eigen's vectorized colwise().sum() peels by buffer
  // alignment, which made the result depend on where the heap placed it.
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    const T* row = grad_out.ptr() + n * weight.dim(0);
    for (std::size_t o = 0; o < weight.dim(0); ++o) g.grad_bias[o] += row[o];
  }
  return g;
}

template <typename T>
Tensor<T> relu_forward(Tensor<T> x) {
  for (auto& v : x.data()) v = v > T{} ? v : T{};
  return x;
}

/// Gradient through ReLU; `activation` may be the input or the output of the
/// forward pass since both are positive on the same support.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& activation, Tensor<T> grad_out) {
  require(activation.shape() == grad_out.shape(), "relu grad shape mismatch");
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    if (!(activation[i] > T{})) grad_out[i] = T{};
  }
  return grad_out;
}

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // 0 or 1/(1-p); empty in eval mode
};

/// Inverted dropout: kept units are scaled by 1/(1-p). Identity in eval mode.
template <typename T>
DropoutResult<T> dropout_forward(const Tensor<T>& x, double p, bool train_mode, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  if (!train_mode || p == 0.0) return {x, {}};
  DropoutResult<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.mask[i] = uniform01(rng) < p ? T{} : keep_scale;
    r.output[i] = x[i] * r.mask[i];
  }
  return r;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, Tensor<T> grad_out) {
  if (mask.empty()) return grad_out;
  require(mask.shape() == grad_out.shape(), "dropout grad shape mismatch");
  for (std::size_t i = 0; i < grad_out.size(); ++i) grad_out[i] *= mask[i];
  return grad_out;
}

inline constexpr double kMinEmbeddingNorm = 1e-12;

template <typename T>
struct L2Result {
  Tensor<T> output;
  std::vector<T> norms;
};

template <typename T>
L2Result<T> l2_normalize_forward(const Tensor<T>& x) {
  require(x.rank() == 2, "l2_normalize input must be [N,D]");
  const std::size_t N = x.dim(0), D = x.dim(1);
  L2Result<T> r{Tensor<T>(x.shape()), std::vector<T>(N)};
  for (std::size_t n = 0; n < N; ++n) {
    T s{};
    for (std::size_t d = 0; d < D; ++d) s += x.at(n, d) * x.at(n, d);
    const T norm = std::sqrt(s);
    if (!(norm > static_cast<T>(kMinEmbeddingNorm))) {
      throw DegenerateError("embedding row " + std::to_string(n) + " has (near) zero norm");
    }
    r.norms[n] = norm;
    for (std::size_t d = 0; d < D; ++d) r.output.at(n, d) = x.at(n, d) / norm;
  }
  return r;
}

/// grad_x = (I - u u^T) grad_out / |x| with u the normalized row.
template <typename T>
Tensor<T> l2_normalize_backward(const L2Result<T>& fwd, const Tensor<T>& grad_out) {
  require(grad_out.shape() == fwd.output.shape(), "l2_normalize grad shape mismatch");
  const std::size_t N = grad_out.dim(0), D = grad_out.dim(1);
  Tensor<T> gx(grad_out.shape());
  for (std::size_t n = 0; n < N; ++n) {
    T dot{};
    for (std::size_t d = 0; d < D; ++d) dot += fwd.output.at(n, d) * grad_out.at(n, d);
    for (std::size_t d = 0; d < D; ++d) {
      gx.at(n, d) = (grad_out.at(n, d) - fwd.output.at(n, d) * dot) / fwd.norms[n];
    }
  }
  return gx;
}

}  // namespace voxprint
