#pragma once

// VGG-style embedding network: blocks of 3x3 conv + ReLU with 2x2 max-pool
// between blocks, global average pooling, dense(hidden) + ReLU + dropout,
// dense(embedding) + ReLU, L2 normalization, and a classification head.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/layers.hpp"
#include "voxprint/losses.hpp"
#include "voxprint/tensor.hpp"
#include "voxprint/text.hpp"

namespace voxprint {

struct ConvBlock {
  int conv_count = 1;
  int channels = 8;
  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

enum class HeadKind { dense, cosine };

struct NetworkConfig {
  std::vector<ConvBlock> blocks;
  bool use_global_avg_pool = true;
  int hidden_dim = 1024;
  double dropout_p = 0.3;
  int embedding_dim = 256;
  int num_classes = 2;
  int input_channels = 3;
  bool relu_on_embedding = true;
  HeadKind head = HeadKind::dense;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;

  /// The modified VGG16: 12 conv layers in five blocks, no pool after the
  /// last block.
  static NetworkConfig vgg16m(int num_classes) {
    NetworkConfig c;
    c.blocks = {{2, 64}, {2, 128}, {2, 256}, {3, 512}, {3, 512}};
    c.num_classes = num_classes;
    return c;
  }

  static NetworkConfig tiny(int num_classes) {
    NetworkConfig c;
    c.blocks = {{1, 8}, {1, 16}};
    c.num_classes = num_classes;
    return c;
  }

  /// Narrow five-block variant with the vgg16m pooling layout, small enough
  /// for desk-scale training runs.
  static NetworkConfig desk(int num_classes) {
    NetworkConfig c;
    c.blocks = {{1, 8}, {1, 16}, {1, 16}, {1, 32}, {2, 32}};
    c.num_classes = num_classes;
    return c;
  }

  static NetworkConfig preset(std::string_view name, int num_classes) {
    if (name == "vgg16m") return vgg16m(num_classes);
    if (name == "tiny") return tiny(num_classes);
    if (name == "desk") return desk(num_classes);
    throw ConfigError("unknown network preset '" + std::string(name) + "' (expected vgg16m, desk or tiny)");
  }

  void validate() const {
    if (blocks.empty()) throw ConfigError("NetworkConfig needs at least one conv block");
    for (const auto& b : blocks) {
      if (b.conv_count < 1 || b.channels < 1) throw ConfigError("conv blocks need positive counts and channels");
    }
    if (!use_global_avg_pool) throw ConfigError("global average pooling is mandatory");
    if (hidden_dim < 1 || embedding_dim < 1) throw ConfigError("NetworkConfig requires positive hidden/embedding dims");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("NetworkConfig requires 0 <= dropout_p < 1");
    if (num_classes < 2) throw ConfigError("NetworkConfig requires num_classes >= 2");
    if (input_channels < 1) throw ConfigError("NetworkConfig requires input_channels >= 1");
  }

  /// Serialized as "net.*" keys.
  [[nodiscard]] KeyValues to_key_values() const {
    std::string b;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      b += (i ? "," : "") + std::to_string(blocks[i].conv_count) + "x" + std::to_string(blocks[i].channels);
    }
    return {{"net.blocks", b},
            {"net.global_avg_pool", use_global_avg_pool ? "1" : "0"},
            {"net.hidden_dim", std::to_string(hidden_dim)},
            {"net.dropout_p", format_real(dropout_p)},
            {"net.embedding_dim", std::to_string(embedding_dim)},
            {"net.num_classes", std::to_string(num_classes)},
            {"net.input_channels", std::to_string(input_channels)},
            {"net.relu_on_embedding", relu_on_embedding ? "1" : "0"},
            {"net.head", head == HeadKind::dense ? "dense" : "cosine"}};
  }

  static NetworkConfig from_key_values(const KeyValues& kv) {
    auto get = [&](const char* key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw FormatError(std::string("missing key ") + key);
      return it->second;
    };
    NetworkConfig c;
    for (auto item : split(get("net.blocks"), ',')) {
      const auto x = item.find('x');
      if (x == std::string_view::npos) throw FormatError("bad block spec '" + std::string(item) + "'");
      c.blocks.push_back({static_cast<int>(parse_int(item.substr(0, x))), static_cast<int>(parse_int(item.substr(x + 1)))});
    }
    c.use_global_avg_pool = get("net.global_avg_pool") == "1";
    c.hidden_dim = static_cast<int>(parse_int(get("net.hidden_dim")));
    c.dropout_p = parse_real(get("net.dropout_p"));
    c.embedding_dim = static_cast<int>(parse_int(get("net.embedding_dim")));
    c.num_classes = static_cast<int>(parse_int(get("net.num_classes")));
    c.input_channels = static_cast<int>(parse_int(get("net.input_channels")));
    c.relu_on_embedding = get("net.relu_on_embedding") == "1";
    const auto& head = get("net.head");
    if (head != "dense" && head != "cosine") throw FormatError("bad head kind '" + head + "'");
    c.head = head == "dense" ? HeadKind::dense : HeadKind::cosine;
    c.validate();
    return c;
  }
};

inline HeadKind head_for(LossFamily family) {
  return family == LossFamily::softmax ? HeadKind::dense : HeadKind::cosine;
}

/// Everything the backward pass needs from one forward pass.
template <typename T>
struct ForwardCache {
  std::vector<Tensor<T>> conv_in;             // input of every conv layer
  std::vector<Tensor<T>> block_out;           // post-ReLU output of each block's last conv
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  Shape gap_in_shape;
  Tensor<T> fc1_in, fc1_out;                  // fc1_out is post-ReLU
  Tensor<T> dropout_mask;
  Tensor<T> fc2_in, fc2_out;                  // fc2_out is post-ReLU when enabled
  L2Result<T> l2;
};

template <typename T>
class Network {
 public:
  Network() = default;

  /// He-uniform weights, zero biases, unit-row random cosine head.
  static Network create(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Network net;
    net.config_ = cfg;
    std::mt19937_64 rng(seed);
    auto he_uniform = [&](Shape shape, std::size_t fan_in) {
      Tensor<T> t(std::move(shape));
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : t.data()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
      return t;
    };

    std::size_t in_c = static_cast<std::size_t>(cfg.input_channels);
    for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
      for (int i = 0; i < cfg.blocks[b].conv_count; ++i) {
        const auto out_c = static_cast<std::size_t>(cfg.blocks[b].channels);
        const std::string stem = "conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1);
        net.params_.emplace_back(stem + ".weight", he_uniform({out_c, in_c, 3, 3}, in_c * 9));
        net.params_.emplace_back(stem + ".bias", Tensor<T>({out_c}));
        in_c = out_c;
      }
    }
    const auto hidden = static_cast<std::size_t>(cfg.hidden_dim);
    const auto embed = static_cast<std::size_t>(cfg.embedding_dim);
    const auto classes = static_cast<std::size_t>(cfg.num_classes);
    net.params_.emplace_back("fc1.weight", he_uniform({hidden, in_c}, in_c));
    net.params_.emplace_back("fc1.bias", Tensor<T>({hidden}));
    net.params_.emplace_back("fc2.weight", he_uniform({embed, hidden}, hidden));
    net.params_.emplace_back("fc2.bias", Tensor<T>({embed}));
    net.params_.emplace_back("head.weight", he_uniform({classes, embed}, embed));
    if (cfg.head == HeadKind::dense) {
      net.params_.emplace_back("head.bias", Tensor<T>({classes}));
    } else {
      renormalize_rows(net.params_.back().value);
    }
    return net;
  }

  /// Rebuilds a network from named parameters, checking shapes against the
  /// config.
  static Network from_parameters(const NetworkConfig& cfg, std::vector<Parameter<T>> params) {
    Network reference = create(cfg, 0);
    if (params.size() != reference.params_.size()) throw FormatError("parameter count does not match network config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != reference.params_[i].name || params[i].value.shape() != reference.params_[i].value.shape()) {
        throw FormatError("parameter '" + params[i].name + "' does not match network config");
      }
      params[i].grad = Tensor<T>(params[i].value.shape());
    }
    reference.params_ = std::move(params);
    return reference;
  }

  [[nodiscard]] const NetworkConfig& config() const { return config_; }
  [[nodiscard]] std::vector<Parameter<T>>& parameters() { return params_; }
  [[nodiscard]] const std::vector<Parameter<T>>& parameters() const { return params_; }

  [[nodiscard]] const Parameter<T>& param(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p;
    }
    throw ArgumentError("no parameter named '" + std::string(name) + "'");
  }
  [[nodiscard]] Parameter<T>& param(std::string_view name) {
    return const_cast<Parameter<T>&>(std::as_const(*this).param(name));
  }

  [[nodiscard]] const Tensor<T>& head_weight() const { return param("head.weight").value; }
  [[nodiscard]] const Tensor<T>* head_bias() const {
    return config_.head == HeadKind::dense ? &param("head.bias").value : nullptr;
  }

  [[nodiscard]] std::size_t parameter_count(bool include_head = true) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (include_head || p.name.rfind("head.", 0) != 0) n += p.value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T{});
  }

  /// Unit-norm embeddings [N, embedding_dim] for an [N, C, H, W] batch. When
  /// `cache` is given, intermediate activations are kept for backward().
  /// Dropout is active only when `rng` is non-null (training mode).
  Tensor<T> forward_embed(const Tensor<T>& x, std::mt19937_64* rng = nullptr, ForwardCache<T>* cache = nullptr) const {
    require(x.rank() == 4 && x.dim(1) == static_cast<std::size_t>(config_.input_channels),
            "network input must be [N," + std::to_string(config_.input_channels) + ",H,W], got " + shape_string(x.shape()));
    std::size_t pi = 0;
    Tensor<T> h = x;
    if (cache) {
      *cache = ForwardCache<T>{};
      std::size_t convs = 0;
      for (const auto& b : config_.blocks) convs += static_cast<std::size_t>(b.conv_count);
      cache->conv_in.reserve(convs);
      cache->block_out.reserve(config_.blocks.size());
    }
    for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
      if (b > 0) {
        auto pooled = maxpool2_forward(cache ? cache->block_out.back() : h);
        if (cache) cache->pool_argmax.push_back(std::move(pooled.argmax));
        h = std::move(pooled.output);
      }
      for (int i = 0; i < config_.blocks[b].conv_count; ++i) {
        const Tensor<T>* in = &h;
        if (cache) {
          cache->conv_in.push_back(std::move(h));
          in = &cache->conv_in.back();
        }
        h = relu_forward(conv2d_forward(*in, params_[pi].value, params_[pi + 1].value));
        pi += 2;
      }
      if (cache) cache->block_out.push_back(std::move(h));
    }
    const Tensor<T>& last = cache ? cache->block_out.back() : h;
    if (cache) cache->gap_in_shape = last.shape();
    Tensor<T> v = global_avg_pool_forward(last);

    if (cache) cache->fc1_in = v;
    v = relu_forward(dense_forward(v, params_[pi].value, &params_[pi + 1].value));
    if (cache) cache->fc1_out = v;
    auto dropped = rng ? dropout_forward(v, config_.dropout_p, true, *rng) : DropoutResult<T>{std::move(v), {}};
    if (cache) cache->dropout_mask = std::move(dropped.mask);
    v = std::move(dropped.output);

    if (cache) cache->fc2_in = v;
    v = dense_forward(v, params_[pi + 2].value, &params_[pi + 3].value);
    if (config_.relu_on_embedding) v = relu_forward(std::move(v));
    if (cache) cache->fc2_out = v;

    auto l2 = l2_normalize_forward(v);
    Tensor<T> out = l2.output;
    if (cache) cache->l2 = std::move(l2);
    return out;
  }

  /// Accumulates parameter gradients (excluding the head) for d(loss)/d(embedding).
  void backward(const ForwardCache<T>& cache, const Tensor<T>& grad_embedding) {
    std::size_t pi = params_.size() - (config_.head == HeadKind::dense ? 2 : 1);
    Tensor<T> g = l2_normalize_backward(cache.l2, grad_embedding);
    if (config_.relu_on_embedding) g = relu_backward(cache.fc2_out, std::move(g));

    pi -= 2;
    auto d2 = dense_backward(cache.fc2_in, params_[pi].value, g);
    accumulate(pi, std::move(d2.grad_weight), std::move(d2.grad_bias));
    g = dropout_backward(cache.dropout_mask, std::move(d2.grad_x));
    g = relu_backward(cache.fc1_out, std::move(g));

    pi -= 2;
    auto d1 = dense_backward(cache.fc1_in, params_[pi].value, g);
    accumulate(pi, std::move(d1.grad_weight), std::move(d1.grad_bias));
    g = global_avg_pool_backward(cache.gap_in_shape, d1.grad_x);

    std::size_t conv = cache.conv_in.size();
    for (std::size_t b = config_.blocks.size(); b-- > 0;) {
      for (int i = config_.blocks[b].conv_count; i-- > 0;) {
        --conv;
        const Tensor<T>& out = (i == config_.blocks[b].conv_count - 1) ? cache.block_out[b] : cache.conv_in[conv + 1];
        g = relu_backward(out, std::move(g));
        pi -= 2;
        auto gc = conv2d_backward(cache.conv_in[conv], params_[pi].value, g, conv > 0);
        accumulate(pi, std::move(gc.grad_weight), std::move(gc.grad_bias));
        g = std::move(gc.grad_x);
      }
      if (b > 0) g = maxpool2_backward(cache.block_out[b - 1].shape(), cache.pool_argmax[b - 1], g);
    }
  }

  /// Adds head-parameter gradients produced by the loss.
  void accumulate_head(const Tensor<T>& grad_weight, const Tensor<T>* grad_bias) {
    add_into(param("head.weight").grad, grad_weight);
    if (config_.head == HeadKind::dense && grad_bias != nullptr && !grad_bias->empty()) {
      add_into(param("head.bias").grad, *grad_bias);
    }
  }

 private:
  static void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    require(dst.shape() == src.shape(), "gradient shape mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void accumulate(std::size_t pi, Tensor<T> gw, Tensor<T> gb) {
    add_into(params_[pi].grad, gw);
    add_into(params_[pi + 1].grad, gb);
  }

  NetworkConfig config_;
  std::vector<Parameter<T>> params_;
};

/// Eval-mode embeddings.
template <typename T>
Tensor<T> forward_embed(const Network<T>& net, const Tensor<T>& x) {
  return net.forward_embed(x);
}

template <typename To, typename From>
Network<To> network_cast(const Network<From>& net) {
  std::vector<Parameter<To>> params;
  for (const auto& p : net.parameters()) params.emplace_back(p.name, p.value.template cast<To>());
  return Network<To>::from_parameters(net.config(), std::move(params));
}

}  // namespace voxprint
