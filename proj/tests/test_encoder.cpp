#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "eemb/encoder.hpp"
#include "oracles.hpp"

using namespace eemb;

namespace {

Vec random_raw(Rng& rng, std::size_t dim, float amp = 1.0f) {
  Vec x(dim);
  for (auto& v : x) v = rng.uniform(-amp, amp);
  return x;
}

EncoderStack zero_weight_stack() {
  EncoderConfig cfg;
  cfg.lora_rank = 0;
  EncoderStack s = init_encoder(cfg);
  for (auto& t : s.towers)
    for (auto& b : t.blocks) {
      b.w_up = Mat(cfg.d_model, cfg.d_model);
      b.w_down = Mat(cfg.d_model, cfg.d_model);
    }
  return s;
}

}  // namespace

TEST_CASE("init_encoder is deterministic and shape-correct") {
  EncoderConfig cfg;
  EncoderStack a = init_encoder(cfg);
  EncoderStack b = init_encoder(cfg);
  CHECK(a.weights_equal(b));

  REQUIRE(a.towers.size() == 2);
  for (const auto& t : a.towers) {
    CHECK(t.blocks.size() == 12);
    CHECK(t.embed.rows == 64);
    CHECK(t.embed.cols == 24);
  }
  CHECK(a.head.proj.rows == 32);
  CHECK(a.head.proj.cols == 64);
}

TEST_CASE("lora_rank 0 allocates no adapter matrices") {
  EncoderConfig cfg;
  cfg.lora_rank = 0;
  EncoderStack s = init_encoder(cfg);
  for (const auto& t : s.towers)
    for (const auto& b : t.blocks) {
      CHECK(b.lora_a.values.empty());
      CHECK(b.lora_b.values.empty());
    }
}

TEST_CASE("modality towers start identical") {
  EncoderStack s = init_encoder(EncoderConfig{});
  CHECK(s.towers[0].embed == s.towers[1].embed);
  CHECK(s.towers[0].blocks == s.towers[1].blocks);
}

TEST_CASE("zero-weight blocks implement the identity") {
  EncoderStack s = zero_weight_stack();
  Rng rng(5);
  Vec x = random_raw(rng, s.cfg.d_model);
  for (std::size_t l = 1; l <= s.cfg.num_layers; ++l) CHECK(forward_layer(s, "A", l, x) == x);
}

TEST_CASE("fresh adapter is a zero delta") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(6);
  Vec x = random_raw(rng, s.cfg.d_model);
  CHECK(forward_layer(s, "A", 3, x, true) == forward_layer(s, "A", 3, x, false));
}

TEST_CASE("forward_layer matches the straight-line double oracle") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(7);
  Vec raw = random_raw(rng, s.cfg.input_dim);
  Vec h = embed_input(s, "A", raw);
  Vec out = forward_layer(s, "A", 1, h);
  auto ref = oracle::hidden_d(s, "A", raw, 1);
  CHECK(oracle::max_rel_diff(out, ref) < 1e-5);

  CHECK_THROWS_AS(forward_layer(s, "A", 0, h), std::out_of_range);
  CHECK_THROWS_AS(forward_layer(s, "A", 13, h), std::out_of_range);
  CHECK_THROWS_AS(forward_layer(s, "Z", 1, h), std::invalid_argument);
}

TEST_CASE("forward_range composition is exact") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(8);
  Vec h = embed_input(s, "B", random_raw(rng, s.cfg.input_dim));

  // base case
  CHECK(forward_range(s, "B", 3, 4, h) == forward_layer(s, "B", 4, forward_range(s, "B", 3, 3, h)));
  // associativity, bitwise by fixed order
  Vec full = forward_range(s, "B", 0, s.cfg.num_layers, h);
  for (std::size_t m : {std::size_t{1}, std::size_t{5}, std::size_t{11}}) {
    Vec mid = forward_range(s, "B", 0, m, h);
    CHECK(forward_range(s, "B", m, s.cfg.num_layers, mid) == full);
  }
  CHECK(forward_range(s, "B", 2, 2, h) == h);
  CHECK_THROWS_AS(forward_range(s, "B", 4, 2, h), std::out_of_range);
  CHECK_THROWS_AS(forward_range(s, "B", 0, 13, h), std::out_of_range);

  // sequential loop oracle
  Vec x = h;
  for (std::size_t k = 1; k <= s.cfg.num_layers; ++k) x = forward_layer(s, "B", k, x);
  CHECK(x == full);
}

TEST_CASE("embed_input") {
  EncoderConfig cfg;
  cfg.input_dim = cfg.d_model;
  EncoderStack s = init_encoder(cfg);
  s.towers[0].embed = Mat::identity(cfg.d_model);
  Rng rng(9);
  Vec raw = random_raw(rng, cfg.d_model);
  CHECK(embed_input(s, "A", raw) == raw);

  Vec zero(cfg.d_model, 0.0f);
  CHECK(embed_input(s, "B", zero) == Vec(cfg.d_model, 0.0f));

  EncoderStack t = init_encoder(EncoderConfig{});
  Vec raw2 = random_raw(rng, t.cfg.input_dim);
  auto ref = oracle::matvec_d(t.towers[0].embed, oracle::to_d(raw2));
  CHECK(oracle::max_rel_diff(embed_input(t, "A", raw2), ref) < 1e-6);

  CHECK_THROWS_AS(embed_input(t, "A", Vec{1, 2}), std::invalid_argument);
}

TEST_CASE("apply_head normalizes and keeps the zero convention") {
  EncoderStack s = init_encoder(EncoderConfig{});
  CHECK(apply_head(s, Vec(s.cfg.d_model, 0.0f)) == Vec(s.cfg.unified_dim, 0.0f));

  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    Vec h = random_raw(rng, s.cfg.d_model, 2.0f);
    Vec e = apply_head(s, h);
    CHECK(norm2(e) == Catch::Approx(1.0).margin(1e-5));
  }
  Vec h = random_raw(rng, s.cfg.d_model);
  auto ref = oracle::head_d(s, oracle::to_d(h));
  CHECK(oracle::max_rel_diff(apply_head(s, h), ref) < 1e-5);
}

TEST_CASE("coarse_embed at full depth is the fine embedding; snapshots resume exactly") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(11);
  Vec raw = random_raw(rng, s.cfg.input_dim);
  const std::size_t L = s.cfg.num_layers;

  CoarseResult fine = coarse_embed(s, "A", raw, L, 17);
  CHECK(fine.embedding == apply_head(s, forward_range(s, "A", 0, L, embed_input(s, "A", raw))));
  CHECK(fine.snapshot.layer_index == L);
  CHECK(fine.snapshot.item_id == 17);

  // resume oracle: exact with an unquantized snapshot
  for (std::size_t e : {std::size_t{1}, std::size_t{4}, std::size_t{9}}) {
    CoarseResult c = coarse_embed(s, "A", raw, e);
    Vec resumed = apply_head(s, forward_range(s, "A", e, L, c.snapshot.hidden));
    CHECK(resumed == fine.embedding);
  }

  CHECK_THROWS_AS(coarse_embed(s, "A", raw, 0), std::out_of_range);
  CHECK_THROWS_AS(coarse_embed(s, "A", raw, L + 1), std::out_of_range);
}

TEST_CASE("coarse alignment to fine improves with depth on average") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(12);
  const std::size_t L = s.cfg.num_layers;
  double sum_first = 0.0, sum_last = 0.0;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    Vec raw = random_raw(rng, s.cfg.input_dim);
    Vec f = coarse_embed(s, "A", raw, L).embedding;
    sum_first += cosine(coarse_embed(s, "A", raw, 1).embedding, f);
    sum_last += cosine(coarse_embed(s, "A", raw, L - 1).embedding, f);
  }
  CHECK(sum_first / n < sum_last / n);
}

TEST_CASE("prefix property holds before healing") {
  EncoderStack s = init_encoder(EncoderConfig{});
  Rng rng(13);
  Vec raw = random_raw(rng, s.cfg.input_dim);
  const std::size_t L = s.cfg.num_layers;

  // record intermediates of a full pass
  std::vector<Vec> inter;
  Vec h = embed_input(s, "A", raw);
  for (std::size_t k = 1; k <= L; ++k) {
    h = forward_layer(s, "A", k, h);
    inter.push_back(h);
  }
  for (std::size_t n = 1; n < L; ++n) {
    Vec exit_hidden = forward_range(s, "A", 0, n, embed_input(s, "A", raw));
    CHECK(exit_hidden == inter[n - 1]);  // bitwise
  }
}

TEST_CASE("checkpoint round-trips bit-exactly and rejects corruption") {
  EncoderStack s = init_encoder(EncoderConfig{});
  auto path = std::filesystem::temp_directory_path() / "eemb_ckpt_test.bin";
  save_encoder(path.string(), s);
  EncoderStack back = load_encoder(path.string());
  CHECK(back.weights_equal(s));

  // byte-identical re-serialization
  std::vector<std::uint8_t> b1, b2;
  serialize_encoder(b1, s);
  serialize_encoder(b2, back);
  CHECK(b1 == b2);

  auto buf = io::read_file(path.string());
  buf[buf.size() / 2] ^= 0x01;
  io::write_file(path.string(), buf);
  CHECK_THROWS_AS(load_encoder(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("layer invocation counter tracks forwards") {
  EncoderStack s = init_encoder(EncoderConfig{});
  s.layer_invocations.store(0);
  Rng rng(14);
  Vec raw = random_raw(rng, s.cfg.input_dim);
  coarse_embed(s, "A", raw, 5);
  CHECK(s.layer_invocations.load() == 5);
}
