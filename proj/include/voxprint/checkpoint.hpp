#pragma once

// Checkpoint file:
//   "VPCK", u16 version, u32 text length, key=value text block,
//   u32 tensor count, then per tensor: u16 name length, name, u32 rank,
//   u32 dims[rank], little-endian f32 values.
// The text block holds the NetworkConfig ("net.*") plus free-form metadata.
// Tensors are the network parameters in order, optionally followed by extra
// named tensors (e.g. enrollment centroids).

#include <filesystem>
#include <string>
#include <vector>

#include "voxprint/binary_io.hpp"
#include "voxprint/network.hpp"
#include "voxprint/text.hpp"

namespace voxprint {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig config;
  KeyValues metadata;  // keys must not start with "net."
  std::vector<Parameter<float>> tensors;

  [[nodiscard]] Network<float> network() const {
    const std::size_t n = Network<float>::create(config, 0).parameters().size();
    if (tensors.size() < n) throw FormatError("checkpoint holds fewer tensors than the network needs");
    std::vector<Parameter<float>> params(tensors.begin(), tensors.begin() + static_cast<std::ptrdiff_t>(n));
    return Network<float>::from_parameters(config, std::move(params));
  }

  [[nodiscard]] const Tensor<float>* extra(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.value;
    }
    return nullptr;
  }

  [[nodiscard]] const std::string& meta(std::string_view key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw FormatError("checkpoint metadata lacks '" + std::string(key) + "'");
    return it->second;
  }
};

inline Checkpoint make_checkpoint(const Network<float>& net, KeyValues metadata = {}) {
  return Checkpoint{net.config(), std::move(metadata), net.parameters()};
}

inline Bytes encode_checkpoint(const Checkpoint& ck) {
  KeyValues kv = ck.config.to_key_values();
  for (const auto& [k, v] : ck.metadata) {
    if (k.rfind("net.", 0) == 0) throw ArgumentError("metadata key '" + k + "' collides with network config");
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ArgumentError("metadata entries must be single-line key=value text");
    }
    kv.emplace(k, v);
  }
  const std::string text = format_key_values(kv);

  ByteWriter w;
  w.bytes("VPCK");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32_array(t.value.data());
  }
  return std::move(w).take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "VPCK") throw FormatError("not a checkpoint file (bad magic)");
  if (const auto v = r.u16(); v != kCheckpointVersion) {
    throw UnsupportedError("checkpoint version " + std::to_string(v) + " is not supported");
  }
  const KeyValues kv = parse_key_values(r.str(r.u32()));
  Checkpoint ck;
  ck.config = NetworkConfig::from_key_values(kv);
  for (const auto& [k, v] : kv) {
    if (k.rfind("net.", 0) != 0) ck.metadata.emplace(k, v);
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("bad tensor rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError("zero dimension in tensor '" + name + "'");
    }
    if (shape_size(shape) * 4 > r.remaining()) throw FormatError("tensor '" + name + "' overruns file");
    Tensor<float> value(shape);
    r.f32_array(value.data());
    ck.tensors.emplace_back(std::move(name), std::move(value));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");
  static_cast<void>(ck.network());  // validates names and shapes
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace voxprint
