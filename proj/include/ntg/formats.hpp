#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ntg/error.hpp"
#include "ntg/grid.hpp"

namespace ntg {

// ---------------------------------------------------------------------------
// Seeded weight stream

/// xorshift64* generator whose output is fixed bit-for-bit by the seed.
class WeightStream {
 public:
  static constexpr std::uint64_t kMultiplier = 0x2545F4914F6CDD1DULL;
  static constexpr std::uint64_t kSeedMix = 0x9E3779B97F4A7C15ULL;

  explicit WeightStream(std::uint64_t seed) : state_(seed ^ kSeedMix) {
    if (state_ == 0) state_ = 1;
  }

  std::uint64_t next_u64() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * kMultiplier;
  }

  /// Uniform sample in [-1, 1) from the top 24 bits of the next output.
  double next_uniform() {
    const auto top = static_cast<double>(next_u64() >> 40);
    return top / 8388608.0 - 1.0;  // 2^23
  }

  /// Uniform sample in [0, 1).
  double next_unit() { return (next_uniform() + 1.0) * 0.5; }

  /// Integer in [0, n).
  std::size_t next_index(std::size_t n) {
    auto v = static_cast<std::size_t>(next_unit() * static_cast<double>(n));
    return v >= n ? n - 1 : v;
  }

  /// Fills `out` with He-scaled uniform samples, u * sqrt(2 / fan_in).
  void fill_he(std::span<double> out, std::size_t fan_in) {
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : out) v = next_uniform() * scale;
  }

 private:
  std::uint64_t state_;
};

/// Derives an independent stream seed for a named sub-component.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Binary file helpers

namespace detail {

inline std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  if (!raw.empty()) std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

/// Writes to a sibling temp file then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) {
    for (char c : s) bytes_.push_back(static_cast<std::byte>(c));
  }
  std::vector<std::byte> take() { return std::move(bytes_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  }
  std::vector<std::byte> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get_le(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get_le(4, what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(n, '\0');
    std::memcpy(s.data(), bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(FormatIssue::truncated, std::string("unexpected end of data reading ") + what);
    }
  }
  std::uint64_t get_le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// PGM (binary P5, maxval 255)

/// Maps a [0,1] value to a byte: clamp, scale by 255, round half to even.
inline std::uint8_t quantize_byte(double v) {
  const double scaled = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(scaled);
}

inline std::vector<std::byte> encode_pgm(const Grid& image) {
  if (image.channels() != 1) {
    throw ShapeError("write_pgm: expected a single-channel grid, got " + image.shape().to_string());
  }
  std::string header = "P5\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  std::vector<std::byte> bytes;
  bytes.reserve(header.size() + image.size());
  for (char c : header) bytes.push_back(static_cast<std::byte>(c));
  for (double v : image.values()) bytes.push_back(static_cast<std::byte>(quantize_byte(v)));
  return bytes;
}

inline Grid decode_pgm(std::span<const std::byte> bytes) {
  std::size_t pos = 0;
  auto peek = [&]() -> int { return pos < bytes.size() ? static_cast<int>(bytes[pos]) : -1; };
  auto skip_space_and_comments = [&] {
    for (;;) {
      int c = peek();
      if (c == '#') {
        while (peek() != -1 && peek() != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        return;
      }
    }
  };
  auto read_uint = [&](const char* what) -> std::size_t {
    skip_space_and_comments();
    if (peek() < '0' || peek() > '9') throw FormatError(FormatIssue::truncated, std::string("PGM header: missing ") + what);
    std::size_t v = 0;
    while (peek() >= '0' && peek() <= '9') {
      v = v * 10 + static_cast<std::size_t>(peek() - '0');
      if (v > (1u << 24)) throw FormatError(FormatIssue::dims_overflow, std::string("PGM header: ") + what + " too large");
      ++pos;
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != std::byte{'P'}) throw FormatError(FormatIssue::bad_magic, "not a PGM file");
  const char kind = static_cast<char>(bytes[1]);
  if (kind == '2') throw FormatError(FormatIssue::unsupported, "ASCII PGM (P2) is not supported; expected binary P5");
  if (kind == '6' || kind == '3') throw FormatError(FormatIssue::unsupported, "color PPM (P3/P6) is not supported; expected P5");
  if (kind != '5') throw FormatError(FormatIssue::bad_magic, "unknown netpbm variant P" + std::string(1, kind));
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval != 255) throw FormatError(FormatIssue::unsupported, "maxval " + std::to_string(maxval) + " (only 255 is supported)");
  if (width == 0 || height == 0) throw FormatError(FormatIssue::dims_overflow, "zero image dimension");
  // Exactly one whitespace byte separates the header from the raster.
  if (pos >= bytes.size()) throw FormatError(FormatIssue::truncated, "PGM header ends before raster");
  ++pos;
  const std::size_t n = width * height;
  if (bytes.size() - pos < n) {
    throw FormatError(FormatIssue::truncated, "PGM raster has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                                                  std::to_string(n));
  }
  if (bytes.size() - pos > n) throw FormatError(FormatIssue::trailing_bytes, "PGM raster followed by extra data");
  Grid g(1, height, width);
  for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<double>(static_cast<std::uint8_t>(bytes[pos + i])) / 255.0;
  return g;
}

inline Grid read_pgm(const std::filesystem::path& path) { return decode_pgm(detail::read_file(path)); }

inline void write_pgm(const Grid& image, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_pgm(image));
}

// ---------------------------------------------------------------------------
// NTX1 container

/// One array record: dims (row-major) plus values held in double precision.
struct NtxArray {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  bool operator==(const NtxArray&) const = default;
};

/// Sections keyed (and therefore serialized) in name order.
using NtxMap = std::map<std::string, NtxArray>;

inline constexpr std::uint16_t kNtxVersion = 1;
inline constexpr std::size_t kNtxMaxRank = 8;
inline constexpr std::uint64_t kNtxMaxElements = 1ULL << 31;

inline NtxArray to_ntx(const Grid& g) {
  return NtxArray{{static_cast<std::uint32_t>(g.channels()), static_cast<std::uint32_t>(g.height()),
                   static_cast<std::uint32_t>(g.width())},
                  std::vector<double>(g.values().begin(), g.values().end())};
}

/// Rank 1..3 arrays become grids with leading unit dims; rank 4 collapses the
/// trailing two (kernel banks out x in x kh x kw -> out x in x kh*kw).
inline Grid grid_from_ntx(const NtxArray& a) {
  const auto& d = a.dims;
  switch (d.size()) {
    case 1: return Grid(1, 1, d[0], a.values);
    case 2: return Grid(1, d[0], d[1], a.values);
    case 3: return Grid(d[0], d[1], d[2], a.values);
    case 4: return Grid(d[0], d[1], static_cast<std::size_t>(d[2]) * d[3], a.values);
    default: throw ShapeError("NTX1 array of rank " + std::to_string(d.size()) + " cannot be viewed as a grid");
  }
}

inline std::vector<std::byte> encode_ntx1(const NtxMap& sections) {
  if (sections.size() > std::numeric_limits<std::uint16_t>::max()) throw ArgumentError("NTX1: too many sections");
  detail::ByteWriter w;
  w.raw("NTX1");
  w.u16(kNtxVersion);
  w.u16(static_cast<std::uint16_t>(sections.size()));
  for (const auto& [name, arr] : sections) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ArgumentError("NTX1: section name too long");
    if (arr.dims.empty() || arr.dims.size() > kNtxMaxRank) {
      throw ArgumentError("NTX1: section '" + name + "' has unsupported rank " + std::to_string(arr.dims.size()));
    }
    if (arr.count() != arr.values.size()) {
      throw ShapeError("NTX1: section '" + name + "' dims do not match its value count");
    }
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u16(kNtxVersion);
    w.u16(static_cast<std::uint16_t>(arr.dims.size()));
    for (auto dim : arr.dims) w.u32(dim);
    for (double v : arr.values) {
      if (!std::isfinite(v)) throw NumericError(name, "NTX1: section '" + name + "' contains a non-finite value");
      w.f32(static_cast<float>(v));
    }
  }
  return w.take();
}

inline NtxMap decode_ntx1(std::span<const std::byte> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(std::min<std::size_t>(4, r.remaining()), "magic") != "NTX1") {
    throw FormatError(FormatIssue::bad_magic, "missing NTX1 magic");
  }
  const std::uint16_t version = r.u16("version");
  if (version != kNtxVersion) throw FormatError(FormatIssue::bad_version, "version " + std::to_string(version));
  const std::uint16_t count = r.u16("section count");
  NtxMap out;
  for (std::uint16_t s = 0; s < count; ++s) {
    const std::uint16_t name_len = r.u16("section name length");
    std::string name = r.raw(name_len, "section name");
    const std::uint16_t arr_version = r.u16("array version");
    if (arr_version != kNtxVersion) {
      throw FormatError(FormatIssue::bad_version, "section '" + name + "' version " + std::to_string(arr_version));
    }
    const std::uint16_t rank = r.u16("rank");
    if (rank == 0 || rank > kNtxMaxRank) {
      throw FormatError(FormatIssue::bad_rank, "section '" + name + "' rank " + std::to_string(rank));
    }
    NtxArray arr;
    std::uint64_t elements = 1;
    for (std::uint16_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32("dims");
      arr.dims.push_back(d);
      elements *= d;
      if (elements > kNtxMaxElements) {
        throw FormatError(FormatIssue::dims_overflow, "section '" + name + "' has too many elements");
      }
    }
    if (elements * 4 > r.remaining()) {
      throw FormatError(FormatIssue::truncated, "section '" + name + "' payload needs " + std::to_string(elements * 4) +
                                                    " bytes, " + std::to_string(r.remaining()) + " left");
    }
    arr.values.resize(static_cast<std::size_t>(elements));
    for (auto& v : arr.values) v = static_cast<double>(r.f32("payload"));
    if (!out.emplace(std::move(name), std::move(arr)).second) {
      throw FormatError(FormatIssue::duplicate_name, "section name repeated");
    }
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatIssue::trailing_bytes, std::to_string(r.remaining()) + " bytes after last section");
  }
  return out;
}

inline NtxMap read_ntx1(const std::filesystem::path& path) { return decode_ntx1(detail::read_file(path)); }

inline void write_ntx1(const NtxMap& sections, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_ntx1(sections));
}

}  // namespace ntg
