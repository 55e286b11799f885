#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>

#include "eemb/exit_oracle.hpp"
#include "eemb/scheduler.hpp"

using namespace eemb;

namespace {

struct Fixture {
  Corpus corpus;
  EncoderStack stack;
  PredictorModel predictor;
  std::string store_path;

  explicit Fixture(std::size_t n, std::size_t n_superficial = 3) {
    DatagenConfig dc;
    dc.n = n;
    corpus = generate_corpus(dc);
    stack = init_encoder(EncoderConfig{});
    auto labels = label_exits(stack, corpus, "A");
    auto [feats, ys] = predictor_dataset(stack, corpus, labels, "A", n_superficial);
    PredictorTrainConfig tc;
    tc.epochs = 120;
    auto trained = train_predictor(feats, ys, stack.cfg.num_layers, n_superficial, tc);
    predictor = trained.first;
    store_path =
        (std::filesystem::temp_directory_path() / ("eemb_layerstore_" + std::to_string(n) + ".bin"))
            .string();
    LayerStore::create(store_path, stack);
  }
  ~Fixture() { std::filesystem::remove(store_path); }
};

}  // namespace

TEST_CASE("plan_batches splits stable groups in ascending exit order") {
  std::vector<std::pair<std::uint64_t, std::size_t>> same;
  for (std::uint64_t i = 0; i < 10; ++i) same.emplace_back(i, 5);
  auto groups = plan_batches(same, 4);
  REQUIRE(groups.size() == 3);
  CHECK(groups[0].member_ids.size() == 4);
  CHECK(groups[1].member_ids.size() == 4);
  CHECK(groups[2].member_ids.size() == 2);
  CHECK(groups[0].member_ids == std::vector<std::uint64_t>{0, 1, 2, 3});

  std::vector<std::pair<std::uint64_t, std::size_t>> distinct{{7, 2}, {3, 9}, {5, 4}};
  auto singles = plan_batches(distinct, 8);
  REQUIRE(singles.size() == 3);
  CHECK(singles[0].exit == 2);
  CHECK(singles[1].exit == 4);
  CHECK(singles[2].exit == 9);
  for (const auto& g : singles) CHECK(g.member_ids.size() == 1);

  CHECK_THROWS_AS(plan_batches(distinct, 0), std::invalid_argument);

  // seeded mixed case against a brute-force grouping oracle
  Rng rng(12);
  std::vector<std::pair<std::uint64_t, std::size_t>> mixed;
  for (std::uint64_t i = 0; i < 57; ++i) mixed.emplace_back(i, 1 + rng.next_below(6));
  auto planned = plan_batches(mixed, 5);

  std::map<std::size_t, std::vector<std::uint64_t>> brute;
  for (auto& [id, e] : mixed) brute[e].push_back(id);
  std::size_t gi = 0;
  for (auto& [e, ids] : brute) {
    for (std::size_t start = 0; start < ids.size(); start += 5) {
      REQUIRE(gi < planned.size());
      CHECK(planned[gi].exit == e);
      std::vector<std::uint64_t> expect(ids.begin() + start,
                                        ids.begin() + std::min(ids.size(), start + 5));
      CHECK(planned[gi].member_ids == expect);
      ++gi;
    }
  }
  CHECK(gi == planned.size());
}

TEST_CASE("layer store round-trips weights bitwise and validates itself") {
  Fixture fx(6);
  LayerStore store(fx.store_path);
  CHECK(store.config() == fx.stack.cfg);
  CHECK(store.head().proj == fx.stack.head.proj);
  CHECK(store.embed("A") == fx.stack.towers[0].embed);

  for (const auto& tag : {"A", "B"})
    for (std::size_t l = 1; l <= fx.stack.cfg.num_layers; ++l) {
      LayerBlock got = store.load_layer(tag, l);
      const LayerBlock& want = fx.stack.towers[fx.stack.tower_index(tag)].blocks[l - 1];
      CHECK(got == want);
    }
  CHECK_THROWS_AS(store.load_layer("A", 0), std::out_of_range);
  CHECK_THROWS_AS(store.load_layer("Z", 1), std::invalid_argument);

  // corrupt one checkpoint byte: open must fail the checksum
  auto buf = io::read_file(fx.store_path);
  buf[buf.size() / 3] ^= 0x10;
  auto bad_path = fx.store_path + ".bad";
  io::write_file(bad_path, buf);
  CHECK_THROWS_AS(LayerStore(bad_path), std::runtime_error);
  std::filesystem::remove(bad_path);
}

TEST_CASE("pipeline output is bitwise equal to per-sample coarse embedding") {
  Fixture fx(60);
  LayerStore store(fx.store_path);

  for (bool pipeline_on : {true, false}) {
    for (std::size_t max_batch : {std::size_t{1}, std::size_t{16}}) {
      PipelineOptions opts;
      opts.pipeline_on = pipeline_on;
      opts.max_batch = max_batch;
      auto run = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, opts);
      REQUIRE(run.records.size() == fx.corpus.items.size());

      for (std::size_t i = 0; i < fx.corpus.items.size(); ++i) {
        const auto& item = fx.corpus.items[i];
        Vec sup = superficial_embed(fx.stack, "A", item.raw_a, 3);
        std::size_t e = predict_exit(fx.predictor, sup);
        CHECK(run.records[i].exit == e);
        CoarseResult ref = coarse_embed(fx.stack, "A", item.raw_a, e, item.item_id);
        CHECK(run.records[i].embedding == ref.embedding);  // bitwise
        CHECK(run.snapshots[i].hidden == ref.snapshot.hidden);
      }
    }
  }
}

TEST_CASE("superficial states are computed once per item") {
  Fixture fx(40);
  LayerStore store(fx.store_path);
  PipelineOptions opts;
  auto run = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, opts);

  const std::size_t n = fx.corpus.items.size();
  const std::size_t N = opts.n_superficial;
  for (std::size_t k = 1; k <= N; ++k) CHECK(run.stats.item_layer_evals[k - 1] == n);
  for (std::size_t k = N + 1; k <= fx.stack.cfg.num_layers; ++k) {
    std::uint64_t expect = 0;
    for (const auto& [id, e] : run.predicted_exits)
      if (e >= k) ++expect;
    CHECK(run.stats.item_layer_evals[k - 1] == expect);
  }
}

TEST_CASE("pipeline stats are self-consistent") {
  Fixture fx(30);
  LayerStore store(fx.store_path);
  PipelineOptions opts;
  auto run = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, opts);
  CHECK(run.stats.layer_steps == run.stats.load_seconds.size());
  CHECK(run.stats.layer_steps == run.stats.compute_seconds.size());
  CHECK(run.stats.wall_seconds <= run.stats.serial_seconds + 0.25);
  CHECK(run.stats.overlap_efficiency <= 1.0);

  PredictorModel wrong = fx.predictor;
  wrong.n_superficial = 5;
  CHECK_THROWS_AS(run_embedding_pipeline(store, fx.corpus, "A", wrong, opts),
                  std::invalid_argument);
}

TEST_CASE("injected costs follow the analytic pipeline model") {
  Fixture fx(8);
  LayerStore store(fx.store_path);
  PipelineOptions opts;
  opts.max_batch = 8;  // one chunk per pass
  opts.inject_load_ms = 20.0;
  opts.inject_compute_ms = 4.0;
  auto run = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, opts);
  CHECK(run.stats.wall_seconds < run.stats.serial_seconds);
  double rel = std::fabs(run.stats.wall_seconds - run.stats.modeled_pipeline_seconds) /
               run.stats.modeled_pipeline_seconds;
  CHECK(rel < 0.25);
}

TEST_CASE("quantized superficial cache keeps embeddings close") {
  Fixture fx(50);
  LayerStore store(fx.store_path);
  PipelineOptions exact_opts;
  auto exact = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, exact_opts);
  PipelineOptions q_opts;
  q_opts.quantize_superficial_cache = true;
  auto quant = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, q_opts);
  for (std::size_t i = 0; i < exact.records.size(); ++i)
    CHECK(cosine(exact.records[i].embedding, quant.records[i].embedding) >= 0.99f);
}

TEST_CASE("layers_saved accounting") {
  std::vector<EmbeddingRecord> recs(5);
  for (auto& r : recs) r.exit = 12;
  CHECK(layers_saved(recs, 12, 3) == Catch::Approx(0.0));

  for (auto& r : recs) r.exit = 4;  // N + 1
  CHECK(layers_saved(recs, 12, 3) == Catch::Approx((12.0 - 3.0 - 1.0) / 12.0));

  CHECK_THROWS_AS(layers_saved({}, 12, 3), std::invalid_argument);

  // histogram-derived value on a toy run
  Fixture fx(40);
  LayerStore store(fx.store_path);
  auto run = run_embedding_pipeline(store, fx.corpus, "A", fx.predictor, PipelineOptions{});
  double mean_exit = 0.0;
  for (const auto& [id, e] : run.predicted_exits) mean_exit += static_cast<double>(e);
  mean_exit /= static_cast<double>(run.predicted_exits.size());
  CHECK(layers_saved(run.records, 12, 3) == Catch::Approx(1.0 - mean_exit / 12.0));
}
