#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "eemb/numerics.hpp"

using namespace eemb;

namespace {

// Independent scalar-loop oracle: double accumulation, no shared code with
// eemb::matvec.
std::vector<double> matvec_oracle(const std::vector<std::vector<double>>& m,
                                  const std::vector<double>& x) {
  std::vector<double> y(m.size(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += m[i][j] * x[j];
  return y;
}

Mat make_mat(std::initializer_list<std::initializer_list<float>> rows) {
  Mat m(rows.size(), rows.begin()->size());
  std::size_t i = 0;
  for (const auto& r : rows) {
    std::size_t j = 0;
    for (float v : r) m.at(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("matvec identity and zero") {
  CHECK(matvec(Mat::identity(3), Vec{1, 2, 3}) == Vec{1, 2, 3});
  CHECK(matvec(Mat(2, 2), Vec{5, 7}) == Vec{0, 0});
}

TEST_CASE("matvec hand case cross-checked by scalar oracle") {
  Mat m = make_mat({{1, 2}, {3, 4}});
  Vec y = matvec(m, Vec{1, 1});
  CHECK(y == Vec{3, 7});
  auto oracle = matvec_oracle({{1, 2}, {3, 4}}, {1, 1});
  REQUIRE(oracle.size() == y.size());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == Catch::Approx(oracle[i]));
}

TEST_CASE("matvec rejects dimension mismatch") {
  CHECK_THROWS_AS(matvec(Mat(2, 3), Vec{1, 2}), std::invalid_argument);
}

TEST_CASE("matvec is reproducible and tracks the double oracle") {
  Rng rng(123);
  Mat m(17, 29);
  for (auto& v : m.values) v = rng.uniform(-1.0f, 1.0f);
  Vec x(29);
  for (auto& v : x) v = rng.uniform(-1.0f, 1.0f);

  Vec y1 = matvec(m, x);
  Vec y2 = matvec(m, x);
  CHECK(y1 == y2);  // bitwise

  std::vector<std::vector<double>> md(m.rows, std::vector<double>(m.cols));
  std::vector<double> xd(x.begin(), x.end());
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) md[i][j] = m.at(i, j);
  auto yd = matvec_oracle(md, xd);
  for (std::size_t i = 0; i < y1.size(); ++i)
    CHECK(std::fabs(y1[i] - yd[i]) <= 1e-5 * (1.0 + std::fabs(yd[i])));
}

TEST_CASE("l2_normalize") {
  CHECK(l2_normalize(Vec{3, 4}) == Vec{0.6f, 0.8f});
  CHECK(l2_normalize(Vec{0, 0}) == Vec{0, 0});
  CHECK(l2_normalize(Vec{1, 1, 1, 1}) == Vec{0.5f, 0.5f, 0.5f, 0.5f});

  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    Vec x(16);
    for (auto& v : x) v = rng.uniform(-2.0f, 2.0f);
    CHECK(norm2(l2_normalize(x)) == Catch::Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("cosine") {
  Vec x{0.3f, -1.2f, 4.0f};
  CHECK(cosine(x, x) == Catch::Approx(1.0));
  CHECK(cosine(Vec{1, 0}, Vec{0, 1}) == 0.0f);
  CHECK(cosine(Vec{1, 0}, Vec{-1, 0}) == Catch::Approx(-1.0));
  CHECK(cosine(Vec{0, 0}, Vec{1, 2}) == 0.0f);
  CHECK_THROWS_AS(cosine(Vec{1}, Vec{1, 2}), std::invalid_argument);

  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    Vec a(8), b(8);
    for (auto& v : a) v = rng.uniform(-1.0f, 1.0f);
    for (auto& v : b) v = rng.uniform(-1.0f, 1.0f);
    CHECK(cosine(a, b) == cosine(b, a));
    float c = cosine(a, b);
    CHECK(c >= -1.0f);
    CHECK(c <= 1.0f);
  }
}

TEST_CASE("quantize_int4 all-zero input") {
  QuantBlock q = quantize_int4(Vec{0, 0, 0, 0});
  CHECK(q.scale == 1.0f);
  CHECK(q.count == 4);
  CHECK(q.packed == std::vector<std::uint8_t>{0, 0});
  CHECK(dequantize_int4(q) == Vec{0, 0, 0, 0});
}

TEST_CASE("quantize_int4 rounds half away from zero") {
  // scale = 7/7 = 1, codes [7, -7, 4, 0]
  QuantBlock q = quantize_int4(Vec{7.0f, -7.0f, 3.5f, 0.0f});
  CHECK(q.scale == 1.0f);
  CHECK(dequantize_int4(q) == Vec{7.0f, -7.0f, 4.0f, 0.0f});
}

TEST_CASE("int4 round-trip error bounded by scale/2 over 1000 seeded vectors") {
  Rng rng(42);
  for (int t = 0; t < 1000; ++t) {
    Vec x(64);
    float amp = rng.uniform(0.1f, 10.0f);
    for (auto& v : x) v = rng.uniform(-amp, amp);
    QuantBlock q = quantize_int4(x);
    float max_abs = 0.0f;
    for (float v : x) max_abs = std::max(max_abs, std::fabs(v));
    CHECK(q.scale == (max_abs == 0.0f ? 1.0f : max_abs / 7.0f));
    Vec back = dequantize_int4(q);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(std::fabs(back[i] - x[i]) <= q.scale / 2.0f + 1e-6f * q.scale);
  }
}

TEST_CASE("dequantize_int4 definition and rejection of malformed blocks") {
  QuantBlock q;
  q.scale = 2.0f;
  q.count = 1;
  q.packed = {0x07};
  CHECK(dequantize_int4(q) == Vec{14.0f});

  QuantBlock bad = q;
  bad.packed = {0x07, 0x00};  // wrong length for count=1
  CHECK_THROWS_AS(dequantize_int4(bad), std::invalid_argument);

  QuantBlock neg8 = q;
  neg8.packed = {0x08};  // decodes to -8, outside the code range
  CHECK_THROWS_AS(dequantize_int4(neg8), std::invalid_argument);

  QuantBlock zscale = q;
  zscale.scale = 0.0f;
  CHECK_THROWS_AS(dequantize_int4(zscale), std::invalid_argument);
}

TEST_CASE("QuantBlock wire layout golden bytes") {
  // values [1, -1, 7] at scale 1: codes 0x1, 0xF, 0x7; low nibble = even index
  QuantBlock q = quantize_int4(Vec{1.0f, -1.0f, 7.0f});
  std::vector<std::uint8_t> out;
  encode_quant_block(out, q);
  std::vector<std::uint8_t> expect{
      0x03, 0x00, 0x00, 0x00,  // count = 3
      0x00, 0x00, 0x80, 0x3F,  // scale = 1.0f
      0xF1, 0x07};             // packed
  CHECK(out == expect);

  io::Reader r(out);
  QuantBlock back = decode_quant_block(r);
  CHECK(back == q);
  CHECK(quant_block_wire_size(q.count) == out.size());
}

TEST_CASE("splitmix64 matches the published test vectors") {
  Rng rng(0);
  CHECK(rng.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ull);
  CHECK(rng.next_u64() == 0x06C45D188009454Full);

  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("crc32 known vector") {
  const char* s = "123456789";
  CHECK(io::crc32(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xCBF43926u);
}
