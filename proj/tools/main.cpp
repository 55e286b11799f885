// eemb command line: the full offline -> online workflow as subcommands.
//
//   gen-data         seeded paired-modality corpus
//   label-exits      oracle exit labels per modality
//   train-predictor  pre-exit predictor from superficial embeddings
//   heal             progressive adapter healing, writes the layer store
//   embed            exit-grouped pipelined coarse embedding into the store
//   query            one speculative fine-grained query
//   eval             recall table over all paired queries
//   simulate         trace-driven policy cost comparison
//   selftest         built-in invariant suite (exit 3 on failure)
//
// Exit codes: 0 success, 1 validation error, 2 runtime error, 3 selftest
// failure. All stage randomness derives from the root --seed.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/exit_oracle.hpp"
#include "eemb/healing.hpp"
#include "eemb/numerics.hpp"
#include "eemb/predictor.hpp"
#include "eemb/retrieval.hpp"
#include "eemb/run_config.hpp"
#include "eemb/scheduler.hpp"
#include "eemb/store.hpp"
#include "eemb/tracesim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eemb;

namespace {

// Advisory lock: one subcommand per store file at a time.
class FileLock {
 public:
  explicit FileLock(const std::string& path) : path_(path + ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path_);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw std::invalid_argument("store is locked by another eemb process: " + path_);
    }
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

struct Paths {
  fs::path out;
  fs::path corpus_bin() const { return out / "corpus.bin"; }
  fs::path corpus_csv() const { return out / "corpus.csv"; }
  fs::path labels_csv(const std::string& m) const { return out / ("labels_" + m + ".csv"); }
  fs::path predictor_bin() const { return out / "predictor.bin"; }
  fs::path encoder_bin() const { return out / "encoder_healed.bin"; }
  fs::path store_bin() const { return out / "store.bin"; }
  fs::path heal_report(const std::string& m) const { return out / ("heal_report_" + m + ".csv"); }
  fs::path heal_loss(const std::string& m) const { return out / ("heal_loss_" + m + ".csv"); }
  fs::path train_report() const { return out / "train_report.json"; }
  fs::path embed_report() const { return out / "embed_report.json"; }
  fs::path query_report() const { return out / "query_report.jsonl"; }
  fs::path recall_csv() const { return out / "recall.csv"; }
  fs::path profile_txt() const { return out / "profile.txt"; }
  fs::path sim_csv() const { return out / "sim_report.csv"; }
  fs::path sim_jsonl() const { return out / "sim_report.jsonl"; }
};

void require_exists(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p))
    throw std::invalid_argument("missing input " + p.string() + "; run `eemb " + produced_by +
                                "` first");
}

json config_json(const RunConfig& cfg) {
  json j;
  for (const auto& [k, v] : cfg.to_map()) j[k] = v;
  return j;
}

Corpus load_corpus_checked(const RunConfig& cfg, const Paths& paths) {
  require_exists(paths.corpus_bin(), "gen-data");
  Corpus corpus = load_corpus(paths.corpus_bin().string());
  if (corpus.cfg.input_dim != cfg.input_dim)
    throw std::invalid_argument("corpus input_dim disagrees with config; regenerate with gen-data");
  return corpus;
}

std::vector<ExitLabel> load_labels_checked(const Paths& paths, const std::string& modality) {
  require_exists(paths.labels_csv(modality), "label-exits");
  return load_labels_csv(paths.labels_csv(modality).string());
}

// ---- subcommand bodies ----

int cmd_gen_data(const RunConfig& cfg, const Paths& paths) {
  Corpus corpus = generate_corpus(cfg.datagen_config());
  save_corpus(paths.corpus_bin().string(), corpus);
  export_corpus_csv(paths.corpus_csv().string(), corpus, cfg.echo());
  std::printf("gen-data: %zu items -> %s\n", corpus.items.size(), paths.corpus_bin().c_str());
  return 0;
}

int cmd_label_exits(const RunConfig& cfg, const Paths& paths, const std::string& modality) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  EncoderStack stack = init_encoder(cfg.encoder_config());
  std::vector<std::string> mods =
      modality == "all" ? std::vector<std::string>{"A", "B"} : std::vector<std::string>{modality};
  for (const auto& m : mods) {
    auto labels = label_exits(stack, corpus, m);
    export_labels_csv(paths.labels_csv(m).string(), labels, cfg.echo());
    auto hist = exit_histogram(labels);
    std::printf("label-exits[%s]: %zu items, %zu distinct exits ->", m.c_str(), labels.size(),
                hist.size());
    for (const auto& [e, cnt] : hist) std::printf(" %zu:%zu", e, cnt);
    std::printf("\n");
  }
  return 0;
}

int cmd_train_predictor(const RunConfig& cfg, const Paths& paths) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  auto labels = load_labels_checked(paths, "A");
  EncoderStack stack = init_encoder(cfg.encoder_config());
  auto [features, ys] = predictor_dataset(stack, corpus, labels, "A", cfg.n_superficial);
  auto [model, report] = train_predictor(features, ys, cfg.num_layers, cfg.n_superficial,
                                         cfg.predictor_config());
  save_predictor(paths.predictor_bin().string(), model);

  json j;
  j["config"] = config_json(cfg);
  j["epochs_run"] = report.epochs_run;
  j["final_cross_entropy"] = report.final_cross_entropy;
  j["exit_accuracy"] = report.exit_accuracy;
  j["tolerance_accuracy"] = report.tolerance_accuracy;
  j["mean_predicted"] = report.mean_predicted;
  j["mean_actual"] = report.mean_actual;
  std::ofstream(paths.train_report()) << j.dump(2) << "\n";
  std::printf("train-predictor: exit.acc=%.3f +-1.acc=%.3f mean pred/actual %.2f/%.2f -> %s\n",
              report.exit_accuracy, report.tolerance_accuracy, report.mean_predicted,
              report.mean_actual, paths.predictor_bin().c_str());
  return 0;
}

int cmd_heal(const RunConfig& cfg, const Paths& paths, const std::string& modality) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  EncoderStack stack = init_encoder(cfg.encoder_config());
  std::vector<std::string> mods =
      modality == "all" ? std::vector<std::string>{"A", "B"} : std::vector<std::string>{modality};
  for (const auto& m : mods) {
    auto labels = load_labels_checked(paths, m);
    auto schedule = make_schedule(exit_histogram(labels), cfg.num_layers);
    auto [healed, report] = heal(stack, corpus, labels, schedule, cfg.heal_config(m));
    stack = std::move(healed);
    export_heal_report_csv(paths.heal_report(m).string(), report, cfg.echo());
    export_heal_loss_csv(paths.heal_loss(m).string(), report, cfg.echo());
    if (report.no_op) {
      std::printf("heal[%s]: adapter rank 0, nothing to tune\n", m.c_str());
    } else {
      std::printf("heal[%s]: pivot window schedule over %zu steps\n", m.c_str(),
                  report.steps.size());
      for (const auto& al : report.alignment)
        std::printf("  exit %2zu (n=%3zu): %.4f -> %.4f\n", al.exit, al.n_items, al.pre_cosine,
                    al.post_cosine);
    }
  }
  LayerStore::create(paths.encoder_bin().string(), stack);
  std::printf("heal: wrote %s\n", paths.encoder_bin().c_str());
  return 0;
}

int cmd_embed(const RunConfig& cfg, const Paths& paths) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  require_exists(paths.predictor_bin(), "train-predictor");
  require_exists(paths.encoder_bin(), "heal");
  PredictorModel predictor = load_predictor(paths.predictor_bin().string());
  if (predictor.n_superficial != cfg.n_superficial)
    throw std::invalid_argument("predictor was trained with n_superficial=" +
                                std::to_string(predictor.n_superficial) +
                                "; retrain or pass --superficial-n to match");
  LayerStore layer_store(paths.encoder_bin().string());

  PipelineOptions opts;
  opts.n_superficial = cfg.n_superficial;
  opts.max_batch = cfg.max_batch;
  opts.pipeline_on = cfg.pipeline_on;
  opts.inject_load_ms = cfg.inject_load_ms;
  opts.inject_compute_ms = cfg.inject_compute_ms;
  opts.quantize_superficial_cache = cfg.memcap_int4;

  FileLock lock(paths.store_bin().string());
  auto run = run_embedding_pipeline(layer_store, corpus, "A", predictor, opts);

  Store store = cfg.make_store();
  for (std::size_t i = 0; i < run.records.size(); ++i)
    store.put_coarse(run.records[i], run.snapshots[i]);
  store.save(paths.store_bin().string());

  json j;
  j["config"] = config_json(cfg);
  j["items"] = run.records.size();
  j["wall_seconds"] = run.stats.wall_seconds;
  j["serial_seconds"] = run.stats.serial_seconds;
  j["modeled_pipeline_seconds"] = run.stats.modeled_pipeline_seconds;
  j["overlap_efficiency"] = run.stats.overlap_efficiency;
  j["layer_steps"] = run.stats.layer_steps;
  j["layers_saved"] = layers_saved(run.records, cfg.num_layers, cfg.n_superficial);
  std::map<std::string, std::size_t> hist;
  for (const auto& [id, e] : run.predicted_exits) ++hist[std::to_string(e)];
  j["predicted_exit_histogram"] = hist;
  std::ofstream(paths.embed_report()) << j.dump(2) << "\n";
  std::printf("embed: %zu items, wall %.3fs, layers saved %.1f%% -> %s\n", run.records.size(),
              run.stats.wall_seconds, 100.0 * layers_saved(run.records, cfg.num_layers,
                                                           cfg.n_superficial),
              paths.store_bin().c_str());
  return 0;
}

json query_to_json(const RunConfig& cfg, std::uint64_t item, const QueryResult& res) {
  json j;
  j["config"] = config_json(cfg);
  j["item"] = item;
  j["stage_seconds"] = {{"embed", res.timings.embed_seconds},
                        {"filter", res.timings.filter_seconds},
                        {"verify", res.timings.verify_seconds},
                        {"correct", res.timings.correct_seconds}};
  j["candidates_examined"] = res.candidates_examined;
  j["verified"] = res.verified.size();
  j["upgrades"] = res.upgrades_performed;
  json ranking = json::array();
  for (const auto& [id, score] : res.ranking) ranking.push_back({{"id", id}, {"score", score}});
  j["ranking"] = ranking;
  std::size_t rank = 0;
  bool found = false;
  for (std::size_t r = 0; r < res.ranking.size(); ++r)
    if (res.ranking[r].first == item) {
      rank = r;
      found = true;
      break;
    }
  j["truth_rank"] = found ? json(rank) : json(nullptr);
  return j;
}

int cmd_query(const RunConfig& cfg, const Paths& paths, std::uint64_t item) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  require_exists(paths.store_bin(), "embed");
  require_exists(paths.encoder_bin(), "heal");
  EncoderStack stack = load_encoder(paths.encoder_bin().string());

  const CorpusItem* found = nullptr;
  for (const auto& it : corpus.items)
    if (it.item_id == item) found = &it;
  if (!found) throw std::invalid_argument("item " + std::to_string(item) + " not in the corpus");

  FileLock lock(paths.store_bin().string());
  Store store = Store::load(paths.store_bin().string());
  QueryResult res = query(stack, store, found->raw_b, "B", cfg.k1, cfg.k2);
  store.save(paths.store_bin().string());

  json j = query_to_json(cfg, item, res);
  std::ofstream(paths.query_report(), std::ios::app) << j.dump() << "\n";
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const Paths& paths, const std::vector<std::size_t>& ks) {
  Corpus corpus = load_corpus_checked(cfg, paths);
  require_exists(paths.store_bin(), "embed");
  require_exists(paths.encoder_bin(), "heal");
  EncoderStack stack = load_encoder(paths.encoder_bin().string());

  FileLock lock(paths.store_bin().string());
  Store store = Store::load(paths.store_bin().string());

  std::vector<QueryResult> results;
  std::vector<std::uint64_t> truth;
  for (const auto& item : corpus.items) {
    results.push_back(query(stack, store, item.raw_b, "B", cfg.k1, cfg.k2));
    truth.push_back(item.item_id);
  }
  store.save(paths.store_bin().string());

  std::ofstream out(paths.recall_csv());
  out << "# " << cfg.echo() << "\n";
  out << "k,recall\n";
  std::printf("eval: %zu cross-modal queries (B -> A)\n", results.size());
  for (std::size_t k : ks) {
    double r = recall_at(results, truth, k);
    out << k << "," << r << "\n";
    std::printf("  R@%zu = %.4f\n", k, r);
  }
  return 0;
}

int cmd_simulate(const RunConfig& cfg, const Paths& paths, const std::string& trace_path,
                 const std::string& profile_path, std::size_t synth_n, double synth_gap) {
  std::vector<TraceEvent> trace;
  if (!trace_path.empty()) {
    trace = load_trace(trace_path);
  } else {
    trace = synthesize_trace(synth_n, synth_gap, derive_seed(cfg.seed, "trace"));
    save_trace((paths.out / "trace.csv").string(), trace, cfg.echo());
  }

  DeviceProfile profile;
  if (!profile_path.empty()) {
    profile = load_profile(profile_path);
  } else {
    save_profile(paths.profile_txt().string(), profile, cfg.echo());
  }

  std::map<std::size_t, std::size_t> dist;
  if (fs::exists(paths.labels_csv("A"))) {
    for (const auto& l : load_labels_csv(paths.labels_csv("A").string())) ++dist[l.exit];
  } else {
    for (std::size_t e = 1; e <= cfg.num_layers; ++e) dist[e] = 1;  // uniform fallback
  }

  SimConfig sc;
  sc.num_layers = cfg.num_layers;
  sc.seed = cfg.seed;
  std::size_t fixed_e = ceil_mean_exit(dist);
  auto rows = compare({Policy::full(), Policy::fixed(fixed_e), Policy::pre(cfg.n_superficial,
                                                                           cfg.max_batch)},
                      trace, profile, dist, sc);

  std::ofstream csv(paths.sim_csv());
  csv << "# " << cfg.echo() << "\n";
  csv << "policy,embedded,dropped,mean_backlog,energy_j,charges,throughput_per_s,energy_ratio\n";
  std::ofstream jsonl(paths.sim_jsonl());
  std::printf("simulate: %zu events\n", trace.size());
  for (const auto& row : rows) {
    const SimReport& r = row.report;
    csv << r.policy << "," << r.items_embedded << "," << r.items_dropped << "," << r.mean_backlog
        << "," << r.total_energy_j << "," << r.battery_charges << "," << r.throughput_items_per_s
        << "," << row.energy_ratio_vs_first << "\n";
    json j;
    j["config"] = config_json(cfg);
    j["policy"] = r.policy;
    j["embedded"] = r.items_embedded;
    j["dropped"] = r.items_dropped;
    j["mean_backlog"] = r.mean_backlog;
    j["energy_j"] = r.total_energy_j;
    j["charges"] = r.battery_charges;
    j["throughput_per_s"] = r.throughput_items_per_s;
    j["energy_ratio_vs_full"] = row.energy_ratio_vs_first;
    jsonl << j.dump() << "\n";
    std::printf("  %-16s embedded=%zu dropped=%zu energy=%.1fJ charges=%zu tput=%.2f/s\n",
                r.policy.c_str(), r.items_embedded, r.items_dropped, r.total_energy_j,
                r.battery_charges, r.throughput_items_per_s);
  }
  return 0;
}

// ---- selftest ----

int cmd_selftest() {
  struct Check {
    const char* name;
    std::function<void()> run;
  };
  auto tmp = fs::temp_directory_path();

  std::vector<Check> checks;
  checks.push_back({"numerics.matvec", [] {
    if (matvec(Mat::identity(3), Vec{1, 2, 3}) != Vec{1, 2, 3}) throw std::runtime_error("id");
    Mat m(2, 2);
    m.at(0, 0) = 1; m.at(0, 1) = 2; m.at(1, 0) = 3; m.at(1, 1) = 4;
    if (matvec(m, Vec{1, 1}) != Vec{3, 7}) throw std::runtime_error("hand case");
  }});
  checks.push_back({"numerics.int4_round_trip", [] {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
      Vec x(64);
      for (auto& v : x) v = rng.uniform(-5.0f, 5.0f);
      QuantBlock q = quantize_int4(x);
      Vec back = dequantize_int4(q);
      for (std::size_t i = 0; i < x.size(); ++i)
        if (std::fabs(back[i] - x[i]) > q.scale / 2 + 1e-6f * q.scale)
          throw std::runtime_error("round-trip bound");
    }
  }});
  checks.push_back({"numerics.splitmix_vectors", [] {
    Rng rng(0);
    if (rng.next_u64() != 0xE220A8397B1DCDAFull) throw std::runtime_error("vector 0");
  }});
  checks.push_back({"encoder.determinism_and_prefix", [] {
    EncoderStack a = init_encoder(EncoderConfig{});
    EncoderStack b = init_encoder(EncoderConfig{});
    if (!a.weights_equal(b)) throw std::runtime_error("nondeterministic init");
    if (!verify_prefix_reuse(a, 10).ok) throw std::runtime_error("prefix reuse");
  }});
  checks.push_back({"encoder.checkpoint_round_trip", [&tmp] {
    EncoderStack s = init_encoder(EncoderConfig{});
    auto p = (tmp / "eemb_selftest_ckpt.bin").string();
    save_encoder(p, s);
    bool ok = load_encoder(p).weights_equal(s);
    fs::remove(p);
    if (!ok) throw std::runtime_error("round trip");
  }});
  checks.push_back({"oracle.brute_force_agreement", [] {
    DatagenConfig dc;
    dc.n = 30;
    Corpus c = generate_corpus(dc);
    EncoderStack s = init_encoder(EncoderConfig{});
    auto fast = label_exits(s, c, "A");
    const std::size_t L = s.cfg.num_layers;
    for (std::size_t x = 0; x < c.items.size(); ++x) {
      std::size_t label = L;
      std::vector<Vec> fine;
      for (const auto& it : c.items) fine.push_back(coarse_embed(s, "A", it.raw_a, L).embedding);
      for (std::size_t layer = 1; layer <= L && label == L; ++layer) {
        std::size_t best = 0;
        float best_score = -2.0f;
        for (std::size_t cand = 0; cand < c.items.size(); ++cand) {
          float sc = cosine(fine[x], coarse_embed(s, "A", c.items[cand].raw_a, layer).embedding);
          if (sc > best_score) { best_score = sc; best = cand; }
        }
        if (best == x) label = layer;
      }
      if (fast[x].exit != label) throw std::runtime_error("label mismatch");
    }
  }});
  checks.push_back({"predictor.clamp_rule", [] {
    PredictorModel m;
    m.n_superficial = 3;
    m.num_classes = 12;
    m.w1 = Mat(4, 8);
    m.w2 = Mat(12, 4);
    if (predict_exit(m, Vec(8, 0.5f)) != 12) throw std::runtime_error("tie rule");
    for (std::size_t j = 0; j < 8; ++j) m.w1.at(0, j) = 1.0f;
    m.w2.at(1, 0) = 1.0f;
    if (predict_exit(m, Vec(8, 0.5f)) != 4) throw std::runtime_error("clamp rule");
  }});
  checks.push_back({"healing.monotone_and_prefix", [] {
    DatagenConfig dc;
    dc.n = 30;
    Corpus c = generate_corpus(dc);
    EncoderStack s = init_encoder(EncoderConfig{});
    auto labels = label_exits(s, c, "A");
    auto sched = make_schedule(exit_histogram(labels), s.cfg.num_layers);
    HealConfig hc;
    hc.epochs_per_exit = 5;
    auto [healed, rep] = heal(s, c, labels, sched, hc);
    if (!verify_prefix_reuse(healed, 10).ok) throw std::runtime_error("prefix reuse after heal");
  }});
  checks.push_back({"store.round_trip_and_recovery", [&tmp] {
    Store st(8, 16, 12);
    Rng rng(3);
    for (std::uint64_t id = 0; id < 6; ++id) {
      EmbeddingRecord rec;
      rec.item_id = id;
      rec.exit = 2;
      rec.embedding = Vec(8);
      for (auto& v : rec.embedding) v = rng.uniform(-1.0f, 1.0f);
      rec.embedding = l2_normalize(rec.embedding);
      ActivationSnapshot snap;
      snap.item_id = id;
      snap.layer_index = 2;
      snap.hidden = Vec(16, 0.5f);
      st.put_coarse(rec, snap);
    }
    auto p = (tmp / "eemb_selftest_store.bin").string();
    st.save(p);
    if (!(Store::load(p) == st)) throw std::runtime_error("round trip");
    auto buf = io::read_file(p);
    buf.resize(buf.size() / 2);
    io::write_file(p, buf);
    StoreLoadInfo info;
    Store::load(p, &info);
    fs::remove(p);
    if (!info.truncated_tail) throw std::runtime_error("truncation not detected");
  }});
  checks.push_back({"scheduler.bitwise_transparency", [&tmp] {
    DatagenConfig dc;
    dc.n = 24;
    Corpus c = generate_corpus(dc);
    EncoderStack s = init_encoder(EncoderConfig{});
    auto labels = label_exits(s, c, "A");
    auto [feats, ys] = predictor_dataset(s, c, labels, "A", 3);
    PredictorTrainConfig tc;
    tc.epochs = 40;
    auto [model, rep] = train_predictor(feats, ys, s.cfg.num_layers, 3, tc);
    auto p = (tmp / "eemb_selftest_layers.bin").string();
    LayerStore::create(p, s);
    LayerStore ls(p);
    auto run = run_embedding_pipeline(ls, c, "A", model, PipelineOptions{});
    fs::remove(p);
    for (std::size_t i = 0; i < c.items.size(); ++i) {
      std::size_t e = predict_exit(model, superficial_embed(s, "A", c.items[i].raw_a, 3));
      if (run.records[i].embedding != coarse_embed(s, "A", c.items[i].raw_a, e).embedding)
        throw std::runtime_error("pipeline diverged from per-sample path");
    }
  }});
  checks.push_back({"retrieval.exhaustive_equivalence", [] {
    DatagenConfig dc;
    dc.n = 25;
    Corpus c = generate_corpus(dc);
    EncoderStack s = init_encoder(EncoderConfig{});
    auto labels = label_exits(s, c, "A");
    Store store(32, 64, 12);
    for (std::size_t i = 0; i < c.items.size(); ++i) {
      auto cr = coarse_embed(s, "A", c.items[i].raw_a, labels[i].exit, c.items[i].item_id);
      EmbeddingRecord rec;
      rec.item_id = c.items[i].item_id;
      rec.exit = static_cast<std::uint8_t>(labels[i].exit);
      rec.embedding = cr.embedding;
      store.put_coarse(rec, cr.snapshot);
    }
    Vec raw = c.items[0].raw_b;
    Vec qfine = coarse_embed(s, "B", raw, 12).embedding;
    std::vector<std::pair<std::uint64_t, float>> oracle;
    for (const auto& [id, rec] : store.records()) {
      Vec hidden = store.cached_hidden(id);
      Vec fine = apply_head(s, forward_range(s, "A", rec.exit, 12, hidden));
      oracle.emplace_back(id, cosine(fine, qfine));
    }
    std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    QueryResult res = query(s, store, raw, "B", store.size(), store.size());
    if (res.ranking != oracle) throw std::runtime_error("ranking mismatch");
  }});
  checks.push_back({"tracesim.closed_form", [] {
    DeviceProfile prof;
    prof.layer_load_energy_j = 0.0;
    auto trace = synthesize_trace(100, 0.5, 4);
    SimConfig sc;
    sc.horizon_seconds = 1e9;
    auto full = simulate(Policy::full(), trace, prof, {{3, 10}}, sc);
    auto pre = simulate(Policy::pre(2), trace, prof, {{3, 10}}, sc);
    double ratio = pre.total_energy_j / full.total_energy_j;
    if (std::fabs(ratio - 0.25) > 0.0025) throw std::runtime_error("energy ratio off");
    auto fixedL = simulate(Policy::fixed(12), trace, prof, {{3, 10}}, sc);
    SimReport renamed = full;
    renamed.policy = fixedL.policy;
    if (!(fixedL == renamed)) throw std::runtime_error("fixed(L) != full");
  }});

  std::size_t failures = 0;
  for (const auto& check : checks) {
    try {
      check.run();
      std::printf("[PASS] %s\n", check.name);
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] %s: %s\n", check.name, e.what());
    }
  }
  std::printf("selftest: %zu/%zu checks passed\n", checks.size() - failures, checks.size());
  return failures == 0 ? 0 : 3;
}

void add_config_options(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--seed", cfg.seed, "root seed for all stages")->capture_default_str();
  cmd->add_option("--num-layers", cfg.num_layers)->capture_default_str();
  cmd->add_option("--d-model", cfg.d_model)->capture_default_str();
  cmd->add_option("--unified-dim", cfg.unified_dim)->capture_default_str();
  cmd->add_option("--input-dim", cfg.input_dim)->capture_default_str();
  cmd->add_option("--lora-rank", cfg.lora_rank)->capture_default_str();
  cmd->add_option("--lora-alpha", cfg.lora_alpha)->capture_default_str();
  cmd->add_option("--init-gain", cfg.init_gain)->capture_default_str();
  cmd->add_option("--n-items", cfg.n_items)->capture_default_str();
  cmd->add_option("--d-latent", cfg.d_latent)->capture_default_str();
  cmd->add_option("--noise-low", cfg.noise_low)->capture_default_str();
  cmd->add_option("--noise-high", cfg.noise_high)->capture_default_str();
  cmd->add_option("--superficial-n", cfg.n_superficial, "superficial depth N")
      ->capture_default_str();
  cmd->add_option("--predictor-hidden", cfg.predictor_hidden)->capture_default_str();
  cmd->add_option("--predictor-epochs", cfg.predictor_epochs)->capture_default_str();
  cmd->add_option("--predictor-lr", cfg.predictor_lr)->capture_default_str();
  cmd->add_option("--heal-lr", cfg.heal_lr)->capture_default_str();
  cmd->add_option("--heal-epochs", cfg.heal_epochs)->capture_default_str();
  cmd->add_option("--heal-min-pool", cfg.heal_min_pool)->capture_default_str();
  cmd->add_option("--max-batch", cfg.max_batch)->capture_default_str();
  cmd->add_option("--pipeline", [&cfg](const std::vector<std::string>& vals) {
        if (vals.empty()) return false;
        if (vals[0] == "on") cfg.pipeline_on = true;
        else if (vals[0] == "off") cfg.pipeline_on = false;
        else return false;
        return true;
      },
      "load/compute overlap: on|off")
      ->expected(1);
  cmd->add_option("--inject-load-ms", cfg.inject_load_ms)->capture_default_str();
  cmd->add_option("--inject-compute-ms", cfg.inject_compute_ms)->capture_default_str();
  cmd->add_flag("--memcap-int4", cfg.memcap_int4, "hold superficial states int4-quantized");
  cmd->add_option("--k1", cfg.k1)->capture_default_str();
  cmd->add_option("--k2", cfg.k2)->capture_default_str();
  cmd->add_option("--cache-mode", cfg.cache_mode, "int4|lossless")->capture_default_str();
  cmd->add_option("--embed-precision", cfg.embed_precision, "f32|int4")->capture_default_str();
  cmd->set_config("--config", "", "key=value config file (flags override)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"early-exit multimodal embedding pipeline engine"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string out_dir = "out";
  std::string modality = "all";
  std::uint64_t query_item = 0;
  std::vector<std::size_t> eval_ks{1, 5, 10};
  std::string trace_path, profile_path;
  std::size_t synth_n = 500;
  double synth_gap = 2.0;

  app.add_option("--out", out_dir, "artifact directory")->capture_default_str();
  add_config_options(&app, cfg);

  auto* gen = app.add_subcommand("gen-data", "generate the paired-modality corpus");
  auto* label = app.add_subcommand("label-exits", "compute oracle exit labels");
  auto* train = app.add_subcommand("train-predictor", "train the pre-exit predictor");
  auto* heal_cmd = app.add_subcommand("heal", "progressive adapter healing");
  auto* embed = app.add_subcommand("embed", "exit-grouped pipelined coarse embedding");
  auto* query_cmd = app.add_subcommand("query", "one speculative fine-grained query");
  auto* eval_cmd = app.add_subcommand("eval", "recall over all paired queries");
  auto* sim = app.add_subcommand("simulate", "trace-driven policy comparison");
  auto* selftest = app.add_subcommand("selftest", "run the built-in invariant suite");

  for (CLI::App* cmd : {gen, label, train, heal_cmd, embed, query_cmd, eval_cmd, sim})
    cmd->fallthrough();
  label->add_option("--modality", modality, "A|B|all")->capture_default_str();
  heal_cmd->add_option("--modality", modality, "A|B|all")->capture_default_str();
  query_cmd->add_option("--item", query_item, "corpus item id; its modality-B raw is the query")
      ->required();
  eval_cmd->add_option("--k", eval_ks, "recall cutoffs")->capture_default_str();
  sim->add_option("--trace", trace_path, "trace CSV (default: synthesize)");
  sim->add_option("--profile", profile_path, "device profile file (default: built-in)");
  sim->add_option("--synth-n", synth_n, "synthetic trace length")->capture_default_str();
  sim->add_option("--synth-gap", synth_gap, "synthetic mean arrival gap seconds")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    cfg.validate();
    Paths paths{fs::path(out_dir)};
    if (!app.get_subcommands().empty() && app.get_subcommands()[0] != selftest)
      fs::create_directories(paths.out);

    if (gen->parsed()) return cmd_gen_data(cfg, paths);
    if (label->parsed()) return cmd_label_exits(cfg, paths, modality);
    if (train->parsed()) return cmd_train_predictor(cfg, paths);
    if (heal_cmd->parsed()) return cmd_heal(cfg, paths, modality);
    if (embed->parsed()) return cmd_embed(cfg, paths);
    if (query_cmd->parsed()) return cmd_query(cfg, paths, query_item);
    if (eval_cmd->parsed()) return cmd_eval(cfg, paths, eval_ks);
    if (sim->parsed()) return cmd_simulate(cfg, paths, trace_path, profile_path, synth_n,
                                           synth_gap);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
