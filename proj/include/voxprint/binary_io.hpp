#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "voxprint/errors.hpp"

namespace voxprint {

using Bytes = std::vector<std::uint8_t>;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
constexpr U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    }
    return out;
  }
}

}  // namespace detail

/// Appends little-endian scalars to a growing byte buffer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(detail::to_little(v)); }
  void u32(std::uint32_t v) { put(detail::to_little(v)); }
  void i16(std::int16_t v) { u16(std::bit_cast<std::uint16_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void bytes(std::span<const std::uint8_t> s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void f32_array(std::span<const float> values) {
    const std::size_t at = buf_.size();
    buf_.resize(at + values.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
      if (!values.empty()) std::memcpy(buf_.data() + at, values.data(), values.size() * 4);
    } else {
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto w = detail::to_little(std::bit_cast<std::uint32_t>(values[i]));
        std::memcpy(buf_.data() + at + 4 * i, &w, 4);
      }
    }
  }

  [[nodiscard]] std::size_t size() const { return buf_.size(); }
  [[nodiscard]] const Bytes& data() const& { return buf_; }
  [[nodiscard]] Bytes take() && { return std::move(buf_); }

 private:
  template <typename U>
  void put(U v) {
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    buf_.insert(buf_.end(), raw, raw + sizeof(U));
  }

  Bytes buf_;
};

/// Bounds-checked little-endian cursor. Overruns raise FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return detail::to_little(take<std::uint16_t>()); }
  std::uint32_t u32() { return detail::to_little(take<std::uint32_t>()); }
  std::int16_t i16() { return std::bit_cast<std::int16_t>(u16()); }
  float f32() { return std::bit_cast<float>(u32()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> span(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void f32_array(std::span<float> out) {
    auto raw = span(out.size() * 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t w;
      std::memcpy(&w, raw.data() + 4 * i, 4);
      out[i] = std::bit_cast<float>(detail::to_little(w));
    }
  }

  void skip(std::size_t n) { span(n); }
  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw FormatError("unexpected end of data");
  }

  template <typename U>
  U take() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
  auto b = read_file(path);
  return {b.begin(), b.end()};
}

/// 64-bit FNV-1a, used for cache freshness checks.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), h);
}

}  // namespace voxprint
