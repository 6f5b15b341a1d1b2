// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// On-disk formats. Everything is little-endian.
//
// Tensor container (.arbt):
//   "ARBT" | u16 version | u8 dtype (0 = f32) | u8 rank | u64 dims[rank] |
//   row-major payload
//
// Quantized layer container (.arbq):
//   "ARBQ" | u16 version | u8 method | u8 salient_order | u8 cgb | u8 pad |
//   u64 rows | u64 cols | u32 block | u32 iterations | u32 name_len | name |
//   budget: u64 plane_bits, u64 bitmap_bits, u64 scale_bits,
//           f64 avg_weight_bits, u64 total_bytes |
//   u64 payload_len | payload | u32 crc32(payload)
//
//   payload: salient column bitmap (1 row) | group bitmap (rows) |
//            plane 1 (rows x cols) | plane 2 on salient columns only
//            (rows x salient count) | per block: u8 zone presence bits,
//            then per present zone: u8 planes | u8 flags (1 = mean,
//            2 = column scales) | f32 alpha[planes][rows] |
//            f32 mu[rows] | f32 alpha_c[planes][block width]
//
// Bitmaps store rows of ceil(cols / 8) bytes, least-significant bit first.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "arbq/errors.hpp"
#include "arbq/partition.hpp"
#include "arbq/pipeline.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint16_t kQuantVersion = 1;

// ---------------------------------------------------------------------------
// Little-endian byte buffers.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void bytes(std::span<const std::uint8_t> s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t>& data() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError(IoErrc::kTruncated, "unexpected end of data");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::kOpenFailed, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::kOpenFailed, "cannot create '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError(IoErrc::kOpenFailed, "write failed for '" + path.string() + "'");
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  std::size_t off = 0;
  while (off < data.size()) {
    const std::size_t n = std::min<std::size_t>(data.size() - off, 1u << 30);
    crc = crc32(crc, data.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Tensor container.

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  /// Rank-2 tensor as a matrix.
  Matrix matrix() const {
    if (dims.size() != 2) throw IoError(IoErrc::kBadRank, "expected a rank-2 tensor");
    Matrix M(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    for (Eigen::Index i = 0; i < M.size(); ++i) M.data()[i] = static_cast<double>(data[static_cast<std::size_t>(i)]);
    return M;
  }

  /// Rank-3 tensor as batches; a rank-2 tensor is one batch.
  std::vector<Matrix> batches() const {
    if (dims.size() == 2) return {matrix()};
    if (dims.size() != 3) throw IoError(IoErrc::kBadRank, "expected a rank-2 or rank-3 tensor");
    std::vector<Matrix> out;
    const std::size_t per = static_cast<std::size_t>(dims[1] * dims[2]);
    for (std::uint64_t b = 0; b < dims[0]; ++b) {
      Matrix M(static_cast<Eigen::Index>(dims[1]), static_cast<Eigen::Index>(dims[2]));
      for (std::size_t i = 0; i < per; ++i) M.data()[i] = static_cast<double>(data[b * per + i]);
      out.push_back(std::move(M));
    }
    return out;
  }

  static Tensor from_matrix(const Matrix& M) {
    Tensor t;
    t.dims = {static_cast<std::uint64_t>(M.rows()), static_cast<std::uint64_t>(M.cols())};
    t.data.resize(static_cast<std::size_t>(M.size()));
    for (Eigen::Index i = 0; i < M.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(M.data()[i]);
    return t;
  }

  static Tensor from_batches(const std::vector<Matrix>& batches) {
    if (batches.empty()) throw ValidationError("no batches to store");
    Tensor t;
    const auto L = batches.front().rows();
    const auto m = batches.front().cols();
    t.dims = {batches.size(), static_cast<std::uint64_t>(L), static_cast<std::uint64_t>(m)};
    for (const auto& B : batches) {
      require_shape(B.rows() == L && B.cols() == m, "batches differ in shape");
      for (Eigen::Index i = 0; i < B.size(); ++i) t.data.push_back(static_cast<float>(B.data()[i]));
    }
    return t;
  }
};

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > 255) throw ValidationError("tensor rank must be 1..255");
  if (t.numel() != t.data.size()) throw ValidationError("tensor data length differs from dims");
  ByteWriter w;
  w.bytes("ARBT", 4);
  w.u16(kTensorVersion);
  w.u8(0);
  w.u8(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.u64(d);
  for (float v : t.data) w.f32(v);
  return std::move(w.data());
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ARBT", 4) != 0)
    throw IoError(IoErrc::kBadMagic, "not a tensor container");
  r.bytes(4);
  const auto version = r.u16();
  if (version != kTensorVersion)
    throw IoError(IoErrc::kUnsupportedVersion, "unsupported tensor version " + std::to_string(version));
  const auto dtype = r.u8();
  if (dtype != 0) throw IoError(IoErrc::kUnknownDtype, "unknown dtype tag " + std::to_string(dtype));
  const auto rank = r.u8();
  if (rank == 0) throw IoError(IoErrc::kBadRank, "tensor rank is zero");
  Tensor t;
  for (int i = 0; i < rank; ++i) t.dims.push_back(r.u64());
  const std::uint64_t n = t.numel();
  if (n > r.remaining() / 4) throw IoError(IoErrc::kTruncated, "tensor payload is truncated");
  t.data.resize(static_cast<std::size_t>(n));
  for (auto& v : t.data) v = r.f32();
  if (r.remaining() != 0) throw IoError(IoErrc::kMalformed, "trailing bytes after tensor payload");
  return t;
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }
inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }
inline void write_tensor(const std::filesystem::path& path, const Matrix& M) {
  write_tensor(path, Tensor::from_matrix(M));
}

// ---------------------------------------------------------------------------
// Quantized layer container.

struct QuantHeader {
  std::uint16_t version = kQuantVersion;
  Method method = Method::kArbRc;
  int salient_order = 2;
  bool cgb = true;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::uint32_t block = 0;
  std::uint32_t iterations = 0;
  std::string name;
  BitBudget budget;
  std::uint64_t payload_len = 0;
};

namespace detail {

inline void put_bits(ByteWriter& w, const BitMatrix& b) { w.bytes(b.bytes()); }

template <typename Bits>
Bits get_bits(ByteReader& r, std::size_t rows, std::size_t cols) {
  Bits b(rows, cols);
  auto src = r.bytes(b.bytes().size());
  std::copy(src.begin(), src.end(), b.mutable_bytes().begin());
  // Padding bits must be zero.
  const std::size_t tail = cols % 8;
  if (tail != 0) {
    for (std::size_t row = 0; row < rows; ++row)
      if (b.row_span(row).back() >> tail) throw IoError(IoErrc::kMalformed, "non-zero bitmap padding");
  }
  return b;
}

inline QuantHeader read_quant_header(ByteReader& r) {
  auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), "ARBQ", 4) != 0) throw IoError(IoErrc::kBadMagic, "not a quantized layer container");
  QuantHeader h;
  h.version = r.u16();
  if (h.version != kQuantVersion)
    throw IoError(IoErrc::kUnsupportedVersion, "unsupported quantized layer version " + std::to_string(h.version));
  const auto tag = r.u8();
  if (tag > 3) throw IoError(IoErrc::kMalformed, "unknown method tag " + std::to_string(tag));
  h.method = static_cast<Method>(tag);
  h.salient_order = r.u8();
  if (h.salient_order != 1 && h.salient_order != 2) throw IoError(IoErrc::kMalformed, "bad salient order");
  h.cgb = r.u8() != 0;
  r.u8();
  h.rows = r.u64();
  h.cols = r.u64();
  h.block = r.u32();
  h.iterations = r.u32();
  if (h.rows == 0 || h.cols == 0 || h.block == 0) throw IoError(IoErrc::kMalformed, "empty layer shape");
  const auto name_len = r.u32();
  auto name = r.bytes(name_len);
  h.name.assign(name.begin(), name.end());
  h.budget.plane_bits = r.u64();
  h.budget.bitmap_bits = r.u64();
  h.budget.scale_bits = r.u64();
  h.budget.avg_weight_bits = r.f64();
  h.budget.total_bytes = r.u64();
  h.payload_len = r.u64();
  return h;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_quant(const QuantizedLayer& q) {
  const std::size_t n = q.rows;
  const std::size_t m = q.cols;
  require_shape(q.maps.rows() == n && q.maps.cols() == m && q.plane1.rows() == n && q.plane1.cols() == m &&
                    q.plane2.rows() == n && q.plane2.cols() == m,
                "quantized layer parts differ in shape");
  ByteWriter p;
  detail::put_bits(p, q.maps.salient_cols);
  detail::put_bits(p, q.maps.group);
  detail::put_bits(p, q.plane1);
  std::vector<std::size_t> salient;
  q.maps.salient_cols.for_each_set(0, [&](std::size_t c) { salient.push_back(c); });
  BitMatrix compact(n, salient.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < salient.size(); ++j) compact.set(r, j, q.plane2.get(r, salient[j]));
  detail::put_bits(p, compact);
  const std::size_t nblocks = (m + q.block - 1) / q.block;
  require_shape(q.blocks.size() == nblocks, "block count differs from shape");
  for (std::size_t b = 0; b < nblocks; ++b) {
    const BlockParams& bp = q.blocks[b];
    require_shape(bp.begin == b * q.block && bp.width == std::min(q.block, m - bp.begin), "block bounds are invalid");
    std::uint8_t present = 0;
    for (const auto& zp : bp.zones) present = static_cast<std::uint8_t>(present | (1u << zp.zone));
    p.u8(present);
    for (const auto& zp : bp.zones) {
      require_shape(zp.alpha.size() == static_cast<std::size_t>(zp.planes), "zone plane count mismatch");
      p.u8(static_cast<std::uint8_t>(zp.planes));
      p.u8(static_cast<std::uint8_t>((zp.mu.empty() ? 0 : 1) | (zp.alpha_c.empty() ? 0 : 2)));
      for (const auto& a : zp.alpha) {
        require_shape(a.size() == n, "row scale length mismatch");
        for (float v : a) p.f32(v);
      }
      if (!zp.mu.empty()) {
        require_shape(zp.mu.size() == n, "mean length mismatch");
        for (float v : zp.mu) p.f32(v);
      }
      for (const auto& ac : zp.alpha_c) {
        require_shape(ac.size() == bp.width, "column scale length mismatch");
        for (float v : ac) p.f32(v);
      }
    }
  }

  ByteWriter w;
  w.bytes("ARBQ", 4);
  w.u16(kQuantVersion);
  w.u8(static_cast<std::uint8_t>(q.method));
  w.u8(static_cast<std::uint8_t>(q.salient_order));
  w.u8(q.cgb ? 1 : 0);
  w.u8(0);
  w.u64(n);
  w.u64(m);
  w.u32(static_cast<std::uint32_t>(q.block));
  w.u32(static_cast<std::uint32_t>(q.iterations));
  w.u32(static_cast<std::uint32_t>(q.name.size()));
  w.bytes(q.name.data(), q.name.size());
  w.u64(q.budget.plane_bits);
  w.u64(q.budget.bitmap_bits);
  w.u64(q.budget.scale_bits);
  w.f64(q.budget.avg_weight_bits);
  w.u64(q.budget.total_bytes);
  w.u64(p.data().size());
  w.bytes(p.data());
  w.u32(crc32_of(p.data()));
  return std::move(w.data());
}

inline QuantHeader decode_quant_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  return detail::read_quant_header(r);
}

inline QuantizedLayer decode_quant(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const QuantHeader h = detail::read_quant_header(r);
  if (h.payload_len > r.remaining()) throw IoError(IoErrc::kTruncated, "payload is truncated");
  auto payload = r.bytes(static_cast<std::size_t>(h.payload_len));
  const std::uint32_t stored = r.u32();
  if (r.remaining() != 0) throw IoError(IoErrc::kMalformed, "trailing bytes after checksum");
  if (crc32_of(payload) != stored) throw IoError(IoErrc::kChecksumMismatch, "payload checksum mismatch");

  QuantizedLayer q;
  q.name = h.name;
  q.method = h.method;
  q.salient_order = h.salient_order;
  q.iterations = static_cast<int>(h.iterations);
  q.block = h.block;
  q.cgb = h.cgb;
  q.rows = static_cast<std::size_t>(h.rows);
  q.cols = static_cast<std::size_t>(h.cols);
  q.budget = h.budget;
  const std::size_t n = q.rows;
  const std::size_t m = q.cols;

  ByteReader p(payload);
  q.maps.salient_cols = detail::get_bits<BitMask>(p, 1, m);
  q.maps.group = detail::get_bits<BitMask>(p, n, m);
  q.plane1 = detail::get_bits<SignPlane>(p, n, m);
  std::vector<std::size_t> salient;
  q.maps.salient_cols.for_each_set(0, [&](std::size_t c) { salient.push_back(c); });
  const auto compact = detail::get_bits<BitMatrix>(p, n, salient.size());
  q.plane2 = SignPlane(n, m);
  q.plane2.fill(true);
  for (std::size_t r2 = 0; r2 < n; ++r2)
    for (std::size_t j = 0; j < salient.size(); ++j) q.plane2.set(r2, salient[j], compact.get(r2, j));

  const std::size_t nblocks = (m + q.block - 1) / q.block;
  q.blocks.resize(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) {
    BlockParams& bp = q.blocks[b];
    bp.begin = b * q.block;
    bp.width = std::min(q.block, m - bp.begin);
    const std::uint8_t present = p.u8();
    if (present >> kZoneCount) throw IoError(IoErrc::kMalformed, "unknown zone bits");
    for (int z = 0; z < kZoneCount; ++z) {
      if (!(present & (1u << z))) continue;
      ZoneParams zp;
      zp.zone = z;
      zp.planes = p.u8();
      if (zp.planes != 1 && zp.planes != 2) throw IoError(IoErrc::kMalformed, "bad zone plane count");
      const std::uint8_t flags = p.u8();
      if (flags > 3) throw IoError(IoErrc::kMalformed, "unknown zone flags");
      auto read_floats = [&](std::size_t count) {
        std::vector<float> v(count);
        for (auto& x : v) x = p.f32();
        return v;
      };
      for (int k = 0; k < zp.planes; ++k) zp.alpha.push_back(read_floats(n));
      if (flags & 1) zp.mu = read_floats(n);
      if (flags & 2)
        for (int k = 0; k < zp.planes; ++k) zp.alpha_c.push_back(read_floats(bp.width));
      bp.zones.push_back(std::move(zp));
    }
  }
  if (p.remaining() != 0) throw IoError(IoErrc::kMalformed, "trailing bytes inside payload");
  return q;
}

inline void write_quant(const std::filesystem::path& path, const QuantizedLayer& q) { write_file(path, encode_quant(q)); }
inline QuantizedLayer read_quant(const std::filesystem::path& path) { return decode_quant(read_file(path)); }

// ---------------------------------------------------------------------------
// Config files: key=value lines, '#' comments.

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' is out of range");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  if (out.empty()) throw ConfigError("'" + key + "' expects a comma-separated list");
  return out;
}

inline std::string render_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

}  // namespace detail

inline std::string render_config(const QuantConfig& c) {
  std::ostringstream o;
  o << "method=" << to_string(c.method) << "\n";
  o << "salient_order=" << c.salient_order << "\n";
  o << "iterations=" << c.iterations << "\n";
  o << "block_size=" << c.block_size << "\n";
  o << "salient_fractions=" << detail::render_list(c.salient_fractions) << "\n";
  o << "percentile_grid=" << detail::render_list(c.percentile_grid) << "\n";
  o << "damping=" << detail::fmt_double(c.damping) << "\n";
  o << "cgb=" << (c.cgb ? "true" : "false") << "\n";
  o << "seed=" << c.seed << "\n";
  o << "calib_batches=" << c.calib_batches << "\n";
  o << "calib_seq_len=" << c.calib_seq_len << "\n";
  o << "calib_outlier_fraction=" << detail::fmt_double(c.calib_outlier_fraction) << "\n";
  o << "calib_outlier_scale=" << detail::fmt_double(c.calib_outlier_scale) << "\n";
  o << "scale_bits=" << c.scale_bits << "\n";
  return o.str();
}

/// Keys not present keep their defaults. Unknown keys are rejected.
inline QuantConfig parse_config(const std::string& text) {
  QuantConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (key == "method") {
      c.method = parse_method(val);
    } else if (key == "salient_order") {
      c.salient_order = static_cast<int>(detail::parse_uint(key, val));
    } else if (key == "iterations") {
      c.iterations = static_cast<int>(detail::parse_uint(key, val));
    } else if (key == "block_size") {
      c.block_size = detail::parse_uint(key, val);
    } else if (key == "salient_fractions") {
      c.salient_fractions = detail::parse_list(key, val);
    } else if (key == "percentile_grid") {
      c.percentile_grid = detail::parse_list(key, val);
    } else if (key == "damping") {
      c.damping = detail::parse_double(key, val);
    } else if (key == "cgb") {
      c.cgb = detail::parse_bool(key, val);
    } else if (key == "seed") {
      c.seed = detail::parse_uint(key, val);
    } else if (key == "calib_batches") {
      c.calib_batches = detail::parse_uint(key, val);
    } else if (key == "calib_seq_len") {
      c.calib_seq_len = detail::parse_uint(key, val);
    } else if (key == "calib_outlier_fraction") {
      c.calib_outlier_fraction = detail::parse_double(key, val);
    } else if (key == "calib_outlier_scale") {
      c.calib_outlier_scale = detail::parse_double(key, val);
    } else if (key == "scale_bits") {
      c.scale_bits = static_cast<int>(detail::parse_uint(key, val));
    } else {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline QuantConfig read_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180).

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

  void row(const std::vector<std::string>& fields) {
    if (fields.size() != header_.size()) throw ValidationError("CSV row width differs from header");
    rows_.push_back(fields);
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& f) {
      for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + csv_escape(f[i]);
      out += "\r\n";
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void save(const std::filesystem::path& path) const {
    const std::string s = str();
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Parses RFC 4180 text into rows of fields (header included).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"' && field.empty()) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (ch == '\r' || ch == '\n') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (field_started || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      field_started = false;
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (quoted) throw IoError(IoErrc::kMalformed, "unterminated quoted CSV field");
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_csv(std::string(bytes.begin(), bytes.end()));
}

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{
      "layer",        "method",        "rows",           "cols",        "block_size",   "cgb",
      "iterations",   "salient_order", "salient_cols",   "salient_fraction", "l1",      "l2",
      "output_mse",   "shift_before",  "shift_after",    "trace_metric", "trace_initial", "trace_final",
      "trace_monotone", "trace",       "plane_bits",     "bitmap_bits", "scale_bits",   "total_bytes",
      "avg_weight_bits", "profile_corr"};
  return cols;
}

inline std::vector<std::string> report_row(const QuantReport& r) {
  using detail::fmt_double;
  std::string trace;
  for (std::size_t i = 0; i < r.trace.size(); ++i) trace += (i ? ";" : "") + fmt_double(r.trace[i]);
  return {r.layer,
          to_string(r.method),
          std::to_string(r.rows),
          std::to_string(r.cols),
          std::to_string(r.block),
          r.cgb ? "true" : "false",
          std::to_string(r.iterations),
          std::to_string(r.salient_order),
          std::to_string(r.salient_cols),
          fmt_double(r.salient_fraction),
          fmt_double(r.metrics.l1),
          fmt_double(r.metrics.l2),
          fmt_double(r.metrics.output_mse),
          fmt_double(r.metrics.shift_before),
          fmt_double(r.metrics.shift_after),
          r.trace_metric,
          fmt_double(r.trace.empty() ? 0.0 : r.trace.front()),
          fmt_double(r.trace.empty() ? 0.0 : r.trace.back()),
          r.trace_monotone ? "true" : "false",
          trace,
          std::to_string(r.budget.plane_bits),
          std::to_string(r.budget.bitmap_bits),
          std::to_string(r.budget.scale_bits),
          std::to_string(r.budget.total_bytes),
          fmt_double(r.budget.avg_weight_bits),
          fmt_double(r.metrics.profile_corr)};
}

inline const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> cols{"layer",        "l1",          "l2",          "output_mse",
                                             "shift_before", "shift_after", "profile_corr"};
  return cols;
}

inline std::vector<std::string> eval_row(const std::string& layer, const LayerMetrics& m) {
  using detail::fmt_double;
  return {layer,
          fmt_double(m.l1),
          fmt_double(m.l2),
          fmt_double(m.output_mse),
          fmt_double(m.shift_before),
          fmt_double(m.shift_after),
          fmt_double(m.profile_corr)};
}

// ---------------------------------------------------------------------------
// Weight manifests:
//   layer <name> <rows> <cols> [xN]   shape only; weights are synthesized
//   layer <name> @<path>              weights from a rank-2 tensor file
//   fp16 <name> <rows> <cols> [xN]    kept in half precision
// Paths are relative to the manifest. '#' starts a comment.

struct ManifestEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t count = 1;
  std::filesystem::path file;  // empty for shape-only entries
};

struct Manifest {
  std::vector<ManifestEntry> layers;
  std::vector<TensorShape> fp16;

  ModelShapes shapes() const {
    ModelShapes s;
    for (const auto& l : layers) s.linear.push_back({l.name, l.rows, l.cols, l.count});
    s.fp16 = fp16;
    return s;
  }
};

inline Manifest parse_manifest(const std::string& text, const std::filesystem::path& base = {}) {
  Manifest man;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw IoError(IoErrc::kMalformed, "manifest line " + std::to_string(lineno) + ": " + what);
  };
  auto parse_count = [&](const std::string& tok) -> std::size_t {
    if (tok.size() < 2 || tok[0] != 'x') fail("expected xN, got '" + tok + "'");
    const std::string digits = tok.substr(1);
    if (!std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      fail("bad repeat count '" + tok + "'");
    const auto n = std::stoull(digits);
    if (n == 0) fail("repeat count must be >= 1");
    return static_cast<std::size_t>(n);
  };
  auto parse_dim = [&](const std::string& tok) -> std::size_t {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      fail("bad dimension '" + tok + "'");
    const auto d = std::stoull(tok);
    if (d == 0) fail("dimensions must be >= 1");
    return static_cast<std::size_t>(d);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok[0] == "layer") {
      if (tok.size() == 3 && tok[2].starts_with("@")) {
        ManifestEntry e;
        e.name = tok[1];
        e.file = base / tok[2].substr(1);
        const Tensor t = read_tensor(e.file);
        if (t.dims.size() != 2) throw IoError(IoErrc::kBadRank, "layer '" + e.name + "' is not a rank-2 tensor");
        e.rows = static_cast<std::size_t>(t.dims[0]);
        e.cols = static_cast<std::size_t>(t.dims[1]);
        man.layers.push_back(std::move(e));
      } else if (tok.size() == 4 || tok.size() == 5) {
        ManifestEntry e;
        e.name = tok[1];
        e.rows = parse_dim(tok[2]);
        e.cols = parse_dim(tok[3]);
        if (tok.size() == 5) e.count = parse_count(tok[4]);
        man.layers.push_back(std::move(e));
      } else {
        fail("expected 'layer <name> <rows> <cols> [xN]' or 'layer <name> @<path>'");
      }
    } else if (tok[0] == "fp16") {
      if (tok.size() != 4 && tok.size() != 5) fail("expected 'fp16 <name> <rows> <cols> [xN]'");
      TensorShape s{tok[1], parse_dim(tok[2]), parse_dim(tok[3]), 1};
      if (tok.size() == 5) s.count = parse_count(tok[4]);
      man.fp16.push_back(std::move(s));
    } else {
      fail("unknown entry '" + tok[0] + "'");
    }
  }
  return man;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()), path.parent_path());
}

/// File-system safe form of a layer name.
inline std::string sanitize_name(const std::string& name) {
  std::string out = name;
  for (char& ch : out)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '_')) ch = '_';
  return out.empty() ? std::string("layer") : out;
}

}  // namespace arbq
