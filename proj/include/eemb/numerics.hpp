#pragma once

// Deterministic float32 kernels and the INT4 activation quantization scheme.
//
// Every reduction in this module runs in fixed ascending-index order, so a
// batched execution path and a per-sample path produce bitwise-identical
// results on the same inputs. Build with fp contraction disabled (see
// top-level CMakeLists) or call sites may fuse mul+add differently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/io.hpp"

namespace eemb {

using Vec = std::vector<float>;

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;  // row-major

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0f) {}

  float& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  const float* row(std::size_t i) const { return values.data() + i * cols; }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
  }

  bool operator==(const Mat& o) const = default;
};

// splitmix64. The exact recurrence is the portability contract: the same seed
// produces the same stream on every platform.
//
//   state += 0x9E3779B97F4A7C15
//   z  = state
//   z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   out = z ^ (z >> 31)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1) with 24-bit resolution; exactly representable in float.
  float next_unit() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n). Modulo bias is < 2^-40 for the n used here.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Derives stage-local seeds from one root seed; FNV-1a over the stage name,
// mixed through one splitmix64 step.
inline std::uint64_t derive_seed(std::uint64_t root, const std::string& stage) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  Rng mix(root ^ h);
  return mix.next_u64();
}

// y_i = sum_j m[i,j] * x_j, accumulated strictly in ascending j.
inline Vec matvec(const Mat& m, const Vec& x) {
  if (m.cols != x.size())
    throw std::invalid_argument("matvec: dimension mismatch (" + std::to_string(m.cols) +
                                " cols vs " + std::to_string(x.size()) + ")");
  Vec y(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* r = m.row(i);
    float acc = 0.0f;
    for (std::size_t j = 0; j < m.cols; ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

// y_j = sum_i m[i,j] * x_i (transposed product), ascending i per output.
inline Vec matvec_transposed(const Mat& m, const Vec& x) {
  if (m.rows != x.size())
    throw std::invalid_argument("matvec_transposed: dimension mismatch");
  Vec y(m.cols, 0.0f);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* r = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) y[j] += r[j] * x[i];
  }
  return y;
}

inline float dot(const Vec& x, const Vec& y) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

inline float norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

// Unit-norm copy; the zero vector maps to itself (no NaN enters rankings).
inline Vec l2_normalize(const Vec& x) {
  float n = norm2(x);
  if (n == 0.0f) return x;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / n;
  return y;
}

// Cosine similarity in [-1, 1]; 0 when either vector has zero norm.
inline float cosine(const Vec& x, const Vec& y) {
  if (x.size() != y.size()) throw std::invalid_argument("cosine: dimension mismatch");
  float nx = norm2(x);
  float ny = norm2(y);
  if (nx == 0.0f || ny == 0.0f) return 0.0f;
  float c = dot(x, y) / (nx * ny);
  if (c > 1.0f) c = 1.0f;
  if (c < -1.0f) c = -1.0f;
  return c;
}

// Symmetric per-tensor INT4. Codes live in [-7, 7] (-8 unused), packed two
// per byte, low nibble = even index. scale = max|x| / 7, or 1.0 for the
// all-zero tensor.
struct QuantBlock {
  float scale = 1.0f;
  std::uint32_t count = 0;
  std::vector<std::uint8_t> packed;  // ceil(count / 2) bytes

  bool operator==(const QuantBlock& o) const = default;
};

namespace detail {
inline std::uint8_t encode_nibble(int code) { return static_cast<std::uint8_t>(code) & 0x0F; }
inline int decode_nibble(std::uint8_t nib) {
  // two's-complement sign extension of a 4-bit field
  return (nib & 0x08) ? static_cast<int>(nib) - 16 : static_cast<int>(nib);
}
}  // namespace detail

inline QuantBlock quantize_int4(const Vec& x) {
  QuantBlock q;
  q.count = static_cast<std::uint32_t>(x.size());
  float max_abs = 0.0f;
  for (float v : x) {
    float a = std::fabs(v);
    if (a > max_abs) max_abs = a;
  }
  q.scale = (max_abs == 0.0f) ? 1.0f : max_abs / 7.0f;
  q.packed.assign((x.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    // round half away from zero, clamp to [-7, 7]
    int code = static_cast<int>(std::round(x[i] / q.scale));
    if (code > 7) code = 7;
    if (code < -7) code = -7;
    std::uint8_t nib = detail::encode_nibble(code);
    if (i % 2 == 0)
      q.packed[i / 2] |= nib;
    else
      q.packed[i / 2] |= static_cast<std::uint8_t>(nib << 4);
  }
  return q;
}

inline Vec dequantize_int4(const QuantBlock& q) {
  if (q.packed.size() != (static_cast<std::size_t>(q.count) + 1) / 2)
    throw std::invalid_argument("dequantize_int4: packed length does not match count");
  if (!(q.scale > 0.0f)) throw std::invalid_argument("dequantize_int4: non-positive scale");
  Vec out(q.count);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint8_t byte = q.packed[i / 2];
    std::uint8_t nib = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    int code = detail::decode_nibble(nib);
    if (code == -8) throw std::invalid_argument("dequantize_int4: code -8 is outside [-7, 7]");
    out[i] = static_cast<float>(code) * q.scale;
  }
  return out;
}

// Wire layout: u32 count, f32 scale, ceil(count/2) packed bytes.
inline void encode_quant_block(std::vector<std::uint8_t>& out, const QuantBlock& q) {
  io::put_u32(out, q.count);
  io::put_f32(out, q.scale);
  io::put_bytes(out, q.packed.data(), q.packed.size());
}

inline QuantBlock decode_quant_block(io::Reader& r) {
  QuantBlock q;
  q.count = r.u32();
  q.scale = r.f32();
  q.packed.resize((static_cast<std::size_t>(q.count) + 1) / 2);
  r.bytes(q.packed.data(), q.packed.size());
  return q;
}

inline std::size_t quant_block_wire_size(std::uint32_t count) {
  return 4 + 4 + (static_cast<std::size_t>(count) + 1) / 2;
}

// Grouped variant for activation snapshots: the QuantBlock scheme applied
// independently to fixed-size groups of consecutive values. A single
// per-tensor scale loses too much of a d_model-sized hidden state to meet
// the 0.99-cosine resume contract; per-group scales keep the relative error
// within it while the codes stay 4-bit.
//
// Wire layout: u32 count, u32 group_size, one f32 scale per group,
// ceil(count/2) packed bytes (nibble order as in QuantBlock).
struct GroupedQuant {
  std::uint32_t count = 0;
  std::uint32_t group_size = 8;
  std::vector<float> scales;  // ceil(count / group_size) entries
  std::vector<std::uint8_t> packed;

  bool operator==(const GroupedQuant& o) const = default;
};

inline constexpr std::uint32_t kActivationQuantGroup = 8;

inline GroupedQuant quantize_int4_grouped(const Vec& x,
                                          std::uint32_t group_size = kActivationQuantGroup) {
  if (group_size == 0) throw std::invalid_argument("quantize_int4_grouped: zero group size");
  GroupedQuant q;
  q.count = static_cast<std::uint32_t>(x.size());
  q.group_size = group_size;
  const std::size_t n_groups = (x.size() + group_size - 1) / group_size;
  q.scales.resize(n_groups);
  q.packed.assign((x.size() + 1) / 2, 0);
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::size_t lo = g * group_size;
    std::size_t hi = std::min(x.size(), lo + group_size);
    float max_abs = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) max_abs = std::max(max_abs, std::fabs(x[i]));
    float scale = (max_abs == 0.0f) ? 1.0f : max_abs / 7.0f;
    q.scales[g] = scale;
    for (std::size_t i = lo; i < hi; ++i) {
      int code = static_cast<int>(std::round(x[i] / scale));
      if (code > 7) code = 7;
      if (code < -7) code = -7;
      std::uint8_t nib = detail::encode_nibble(code);
      if (i % 2 == 0)
        q.packed[i / 2] |= nib;
      else
        q.packed[i / 2] |= static_cast<std::uint8_t>(nib << 4);
    }
  }
  return q;
}

inline Vec dequantize_int4_grouped(const GroupedQuant& q) {
  if (q.group_size == 0) throw std::invalid_argument("dequantize_int4_grouped: zero group size");
  const std::size_t n_groups =
      (static_cast<std::size_t>(q.count) + q.group_size - 1) / q.group_size;
  if (q.scales.size() != n_groups)
    throw std::invalid_argument("dequantize_int4_grouped: scale count mismatch");
  if (q.packed.size() != (static_cast<std::size_t>(q.count) + 1) / 2)
    throw std::invalid_argument("dequantize_int4_grouped: packed length mismatch");
  Vec out(q.count);
  for (std::size_t i = 0; i < out.size(); ++i) {
    float scale = q.scales[i / q.group_size];
    if (!(scale > 0.0f)) throw std::invalid_argument("dequantize_int4_grouped: bad scale");
    std::uint8_t byte = q.packed[i / 2];
    std::uint8_t nib = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    int code = detail::decode_nibble(nib);
    if (code == -8)
      throw std::invalid_argument("dequantize_int4_grouped: code -8 is outside [-7, 7]");
    out[i] = static_cast<float>(code) * scale;
  }
  return out;
}

inline void encode_grouped_quant(std::vector<std::uint8_t>& out, const GroupedQuant& q) {
  io::put_u32(out, q.count);
  io::put_u32(out, q.group_size);
  for (float s : q.scales) io::put_f32(out, s);
  io::put_bytes(out, q.packed.data(), q.packed.size());
}

inline GroupedQuant decode_grouped_quant(io::Reader& r) {
  GroupedQuant q;
  q.count = r.u32();
  q.group_size = r.u32();
  if (q.group_size == 0) throw std::invalid_argument("grouped quant: zero group size");
  const std::size_t n_groups =
      (static_cast<std::size_t>(q.count) + q.group_size - 1) / q.group_size;
  q.scales.resize(n_groups);
  for (auto& s : q.scales) s = r.f32();
  q.packed.resize((static_cast<std::size_t>(q.count) + 1) / 2);
  r.bytes(q.packed.data(), q.packed.size());
  return q;
}

inline std::size_t grouped_quant_wire_size(std::uint32_t count, std::uint32_t group_size) {
  const std::size_t n_groups = (static_cast<std::size_t>(count) + group_size - 1) / group_size;
  return 4 + 4 + 4 * n_groups + (static_cast<std::size_t>(count) + 1) / 2;
}

inline bool all_finite(const Vec& x) {
  for (float v : x)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace eemb
