#pragma once

// Offline embedding runtime: exit-grouped batching over a layer-streaming
// weight store, with next-layer loads overlapped against current-layer
// compute by a two-role (one loader, one computer) pipeline.
//
// The numeric contract: every item's coarse embedding out of this pipeline
// is bitwise equal to a per-sample coarse_embed() on the in-memory stack,
// because the block arithmetic, its order, and the weight bytes (bit-exact
// checkpoint round trip) are all identical.
//
// Layer store file = encoder checkpoint + index:
//   checkpoint bytes (see encoder.hpp), then
//   "LIDX", u32 n_entries,
//   entries: modality u32, layer u32, base_off u64, base_len u64,
//            lora_off u64, lora_len u64,
//   crc32 u32 over the index section.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/numerics.hpp"
#include "eemb/predictor.hpp"
#include "eemb/store.hpp"

namespace eemb {

struct ExitGroup {
  std::size_t exit = 0;
  std::vector<std::uint64_t> member_ids;
  std::vector<Vec> features;  // layer-N hidden per member; filled by the pipeline
};

// Stable partition by exit, split into chunks of at most max_batch,
// ascending exit order.
inline std::vector<ExitGroup> plan_batches(
    const std::vector<std::pair<std::uint64_t, std::size_t>>& predicted_exits,
    std::size_t max_batch) {
  if (max_batch < 1) throw std::invalid_argument("plan_batches: max_batch must be >= 1");
  std::map<std::size_t, std::vector<std::uint64_t>> by_exit;
  for (const auto& [id, e] : predicted_exits) by_exit[e].push_back(id);
  std::vector<ExitGroup> groups;
  for (const auto& [e, ids] : by_exit) {
    for (std::size_t start = 0; start < ids.size(); start += max_batch) {
      ExitGroup g;
      g.exit = e;
      std::size_t end = std::min(ids.size(), start + max_batch);
      g.member_ids.assign(ids.begin() + start, ids.begin() + end);
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

// ---- layer-streaming weight store ----

class LayerStore {
 public:
  static void create(const std::string& path, const EncoderStack& stack) {
    std::vector<std::uint8_t> buf;
    serialize_encoder(buf, stack);
    CheckpointLayout lay = checkpoint_layout(stack.cfg);
    if (lay.total != buf.size())
      throw std::logic_error("layer store: layout arithmetic disagrees with serializer");

    std::size_t index_start = buf.size();
    buf.push_back('L');
    buf.push_back('I');
    buf.push_back('D');
    buf.push_back('X');
    const std::size_t n_modal = stack.cfg.modalities.size();
    const std::size_t L = stack.cfg.num_layers;
    io::put_u32(buf, static_cast<std::uint32_t>(n_modal * L));
    for (std::size_t m = 0; m < n_modal; ++m)
      for (std::size_t l = 1; l <= L; ++l) {
        io::put_u32(buf, static_cast<std::uint32_t>(m));
        io::put_u32(buf, static_cast<std::uint32_t>(l));
        io::put_u64(buf, lay.base_offset(m, l));
        io::put_u64(buf, lay.base_block_bytes);
        if (stack.cfg.lora_rank > 0) {
          io::put_u64(buf, lay.layer_lora_offset(m, l));
          io::put_u64(buf, lay.lora_block_bytes);
        } else {
          io::put_u64(buf, 0);
          io::put_u64(buf, 0);
        }
      }
    io::put_u32(buf, io::crc32(buf.data() + index_start, buf.size() - index_start));
    io::write_file(path, buf);
  }

  explicit LayerStore(const std::string& path) : path_(path) {
    auto buf = io::read_file(path);
    io::Reader r(buf);
    cfg_ = read_checkpoint_config(r);
    layout_ = checkpoint_layout(cfg_);
    if (buf.size() < layout_.total) throw std::runtime_error("layer store: file too small");

    std::uint32_t ckpt_crc = static_cast<std::uint32_t>(buf[layout_.total - 4]) |
                             static_cast<std::uint32_t>(buf[layout_.total - 3]) << 8 |
                             static_cast<std::uint32_t>(buf[layout_.total - 2]) << 16 |
                             static_cast<std::uint32_t>(buf[layout_.total - 1]) << 24;
    if (io::crc32(buf.data(), layout_.total - 4) != ckpt_crc)
      throw std::runtime_error("layer store: checkpoint checksum mismatch");

    // index section
    io::Reader ir(buf);
    ir.seek(layout_.total);
    std::uint8_t magic[4];
    ir.bytes(magic, 4);
    if (magic[0] != 'L' || magic[1] != 'I' || magic[2] != 'D' || magic[3] != 'X')
      throw std::runtime_error("layer store: missing index");
    std::uint32_t n_entries = ir.u32();
    if (n_entries != cfg_.modalities.size() * cfg_.num_layers)
      throw std::runtime_error("layer store: index entry count mismatch");
    for (std::uint32_t i = 0; i < n_entries; ++i) {
      std::uint32_t m = ir.u32();
      std::uint32_t l = ir.u32();
      std::uint64_t base_off = ir.u64();
      std::uint64_t base_len = ir.u64();
      ir.u64();  // lora_off, validated via layout below
      ir.u64();
      if (base_off != layout_.base_offset(m, l) || base_len != layout_.base_block_bytes)
        throw std::runtime_error("layer store: index entry disagrees with layout");
    }
    std::uint32_t stored = ir.u32();
    if (io::crc32(buf.data() + layout_.total, ir.pos() - 4 - layout_.total) != stored)
      throw std::runtime_error("layer store: index checksum mismatch");

    // resident small sections: embeds and head
    io::Reader er(buf);
    er.seek(layout_.embeds_offset);
    embeds_.resize(cfg_.modalities.size());
    for (auto& e : embeds_) {
      e = Mat(cfg_.d_model, cfg_.input_dim);
      er.f32_span(e.values.data(), e.values.size());
    }
    io::Reader hr(buf);
    hr.seek(layout_.head_offset);
    head_.proj = Mat(cfg_.unified_dim, cfg_.d_model);
    hr.f32_span(head_.proj.values.data(), head_.proj.values.size());
  }

  const EncoderConfig& config() const { return cfg_; }
  const OutputHead& head() const { return head_; }

  std::size_t modality_index(const std::string& tag) const {
    for (std::size_t i = 0; i < cfg_.modalities.size(); ++i)
      if (cfg_.modalities[i] == tag) return i;
    throw std::invalid_argument("layer store: unknown modality '" + tag + "'");
  }

  const Mat& embed(const std::string& tag) const { return embeds_[modality_index(tag)]; }

  // One layer's weights read from disk on every call; this is the streaming
  // load the pipeline overlaps with compute.
  LayerBlock load_layer(const std::string& tag, std::size_t layer) const {
    if (layer < 1 || layer > cfg_.num_layers)
      throw std::out_of_range("layer store: layer out of range");
    std::size_t m = modality_index(tag);
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw std::runtime_error("layer store: cannot open " + path_);

    LayerBlock b;
    auto read_mat = [&](Mat& mat, std::size_t rows, std::size_t cols, std::size_t offset) {
      mat = Mat(rows, cols);
      in.seekg(static_cast<std::streamoff>(offset));
      std::vector<std::uint8_t> raw(mat.values.size() * 4);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (!in) throw std::runtime_error("layer store: short read");
      io::Reader r(raw);
      r.f32_span(mat.values.data(), mat.values.size());
    };
    std::size_t base = layout_.base_offset(m, layer);
    read_mat(b.w_up, cfg_.d_model, cfg_.d_model, base);
    read_mat(b.w_down, cfg_.d_model, cfg_.d_model, base + 4 * cfg_.d_model * cfg_.d_model);
    if (cfg_.lora_rank > 0) {
      std::size_t lora = layout_.layer_lora_offset(m, layer);
      read_mat(b.lora_a, cfg_.lora_rank, cfg_.d_model, lora);
      read_mat(b.lora_b, cfg_.d_model, cfg_.lora_rank, lora + 4 * cfg_.lora_rank * cfg_.d_model);
    }
    return b;
  }

 private:
  std::string path_;
  EncoderConfig cfg_;
  CheckpointLayout layout_;
  std::vector<Mat> embeds_;
  OutputHead head_;
};

// ---- pipeline ----

struct PipelineOptions {
  std::size_t n_superficial = 3;
  std::size_t max_batch = 32;
  bool pipeline_on = true;
  double inject_load_ms = 0.0;     // added to every layer load when > 0
  double inject_compute_ms = 0.0;  // added to every layer-batch compute when > 0
  bool quantize_superficial_cache = false;
};

struct PipelineStats {
  std::vector<double> load_seconds;              // per layer step, plan order
  std::vector<double> compute_seconds;           // per layer step, plan order
  std::vector<std::uint64_t> item_layer_evals;   // [L] item evaluations per layer
  double wall_seconds = 0.0;
  double serial_seconds = 0.0;            // sum of measured load + compute
  double modeled_pipeline_seconds = 0.0;  // fill + max-dominated steady state + drain
  double overlap_efficiency = 0.0;        // 1 - wall / serial
  std::size_t layer_steps = 0;
};

struct EmbedRunResult {
  std::vector<EmbeddingRecord> records;       // corpus order
  std::vector<ActivationSnapshot> snapshots;  // aligned with records
  std::vector<std::pair<std::uint64_t, std::size_t>> predicted_exits;
  std::vector<ExitGroup> groups;
  PipelineStats stats;
};

namespace detail {

struct LoadedLayer {
  std::size_t layer = 0;
  LayerBlock block;
  double load_seconds = 0.0;
};

// Bounded two-slot handoff between the loader and the computer.
class LayerHandoff {
 public:
  void push(LoadedLayer&& item) {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return q_.size() < 2; });
    q_.push_back(std::move(item));
    cv_.notify_all();
  }
  LoadedLayer pop() {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return !q_.empty(); });
    LoadedLayer item = std::move(q_.front());
    q_.pop_front();
    cv_.notify_all();
    return item;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<LoadedLayer> q_;
};

inline void sleep_ms(double ms) {
  if (ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

// One pipelined pass of layers [from+1, to] over the given hidden states.
// Appends one (load, compute) duration pair per layer step and folds the
// pass into the analytic pipeline model.
inline void run_pass(const LayerStore& store, const std::string& modality, std::size_t from,
                     std::size_t to, std::vector<Vec*>& hiddens, float lora_gain,
                     const PipelineOptions& opts, PipelineStats& stats) {
  if (from >= to) return;
  using clock = std::chrono::steady_clock;
  std::vector<double> pass_load, pass_compute;

  auto timed_load = [&](std::size_t layer) {
    auto t0 = clock::now();
    LoadedLayer item;
    item.layer = layer;
    item.block = store.load_layer(modality, layer);
    sleep_ms(opts.inject_load_ms);
    item.load_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    return item;
  };
  auto timed_compute = [&](const LoadedLayer& item) {
    auto t0 = clock::now();
    for (Vec* h : hiddens) *h = apply_block(item.block, lora_gain, *h, true);
    sleep_ms(opts.inject_compute_ms);
    stats.item_layer_evals[item.layer - 1] += hiddens.size();
    return std::chrono::duration<double>(clock::now() - t0).count();
  };

  if (opts.pipeline_on) {
    LayerHandoff handoff;
    std::thread loader([&] {
      for (std::size_t k = from + 1; k <= to; ++k) handoff.push(timed_load(k));
    });
    for (std::size_t k = from + 1; k <= to; ++k) {
      LoadedLayer item = handoff.pop();
      pass_load.push_back(item.load_seconds);
      pass_compute.push_back(timed_compute(item));
    }
    loader.join();
  } else {
    for (std::size_t k = from + 1; k <= to; ++k) {
      LoadedLayer item = timed_load(k);
      pass_load.push_back(item.load_seconds);
      pass_compute.push_back(timed_compute(item));
    }
  }

  const std::size_t steps = pass_load.size();
  double serial = 0.0;
  for (std::size_t k = 0; k < steps; ++k) serial += pass_load[k] + pass_compute[k];
  stats.serial_seconds += serial;
  if (opts.pipeline_on) {
    double model = pass_load[0];
    for (std::size_t k = 1; k < steps; ++k) model += std::max(pass_load[k], pass_compute[k - 1]);
    model += pass_compute[steps - 1];
    stats.modeled_pipeline_seconds += model;
  } else {
    stats.modeled_pipeline_seconds += serial;
  }
  stats.layer_steps += steps;
  stats.load_seconds.insert(stats.load_seconds.end(), pass_load.begin(), pass_load.end());
  stats.compute_seconds.insert(stats.compute_seconds.end(), pass_compute.begin(),
                               pass_compute.end());
}

}  // namespace detail

// Alg.-style offline run: (1) superficial pass over all items, chunked and
// pipelined; (2) pre-exit prediction; (3) per exit group, resume from the
// held layer-N states through the group's exit, pipelined; (4) head + exit
// snapshot per item.
inline EmbedRunResult run_embedding_pipeline(const LayerStore& store, const Corpus& corpus,
                                             const std::string& modality,
                                             const PredictorModel& predictor,
                                             const PipelineOptions& opts) {
  const EncoderConfig& cfg = store.config();
  const std::size_t L = cfg.num_layers;
  const std::size_t N = opts.n_superficial;
  if (N < 1 || N >= L) throw std::invalid_argument("pipeline: N must be in [1, L)");
  if (opts.max_batch < 1) throw std::invalid_argument("pipeline: max_batch must be >= 1");
  if (predictor.feature_dim() != cfg.d_model || predictor.num_classes != L)
    throw std::invalid_argument("pipeline: predictor disagrees with encoder config");
  if (predictor.n_superficial != N)
    throw std::invalid_argument("pipeline: predictor was trained for a different N");

  using clock = std::chrono::steady_clock;
  auto wall0 = clock::now();

  EmbedRunResult out;
  out.stats.item_layer_evals.assign(L, 0);
  const float lora_gain =
      cfg.lora_rank > 0 ? cfg.lora_alpha / static_cast<float>(cfg.lora_rank) : 0.0f;
  const Mat& embed = store.embed(modality);

  const std::size_t n = corpus.items.size();
  std::vector<Vec> hidden(n);
  for (std::size_t i = 0; i < n; ++i)
    hidden[i] = matvec(embed, raw_for_modality(corpus.items[i], modality));

  // (1) superficial pass, chunked
  for (std::size_t start = 0; start < n; start += opts.max_batch) {
    std::size_t end = std::min(n, start + opts.max_batch);
    std::vector<Vec*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&hidden[i]);
    detail::run_pass(store, modality, 0, N, chunk, lora_gain, opts, out.stats);
  }

  // (2) predict exits from the exact layer-N states
  std::map<std::uint64_t, std::size_t> index_of;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t e = predict_exit(predictor, hidden[i]);
    out.predicted_exits.emplace_back(corpus.items[i].item_id, e);
    index_of[corpus.items[i].item_id] = i;
  }

  // optional memory-cap mode: hold the superficial states quantized
  if (opts.quantize_superficial_cache)
    for (auto& h : hidden) h = dequantize_int4_grouped(quantize_int4_grouped(h));

  // (3) exit groups resume from the held states
  out.groups = plan_batches(out.predicted_exits, opts.max_batch);
  for (auto& g : out.groups) {
    std::vector<Vec*> members;
    for (auto id : g.member_ids) members.push_back(&hidden[index_of[id]]);
    g.features.clear();
    for (Vec* h : members) g.features.push_back(*h);  // layer-N states as grouped
    detail::run_pass(store, modality, N, g.exit, members, lora_gain, opts, out.stats);
  }

  // (4) head + snapshots, corpus order
  out.records.resize(n);
  out.snapshots.resize(n);
  std::map<std::uint64_t, std::size_t> exit_of(out.predicted_exits.begin(),
                                               out.predicted_exits.end());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = corpus.items[i];
    EmbeddingRecord rec;
    rec.item_id = item.item_id;
    rec.modality = modality.empty() ? 'A' : modality[0];
    rec.exit = static_cast<std::uint8_t>(exit_of[item.item_id]);
    rec.state = RecordState::coarse;
    rec.embedding = l2_normalize(matvec(store.head().proj, hidden[i]));
    out.records[i] = std::move(rec);
    out.snapshots[i] = ActivationSnapshot{item.item_id, exit_of[item.item_id], hidden[i]};
  }

  out.stats.wall_seconds = std::chrono::duration<double>(clock::now() - wall0).count();
  if (out.stats.serial_seconds > 0.0)
    out.stats.overlap_efficiency = 1.0 - out.stats.wall_seconds / out.stats.serial_seconds;
  return out;
}

// 1 - (N + mean(e - N)) / L: fraction of full-depth layer work avoided,
// counting the superficial pass as reused.
inline double layers_saved(const std::vector<EmbeddingRecord>& records, std::size_t num_layers,
                           std::size_t n_superficial) {
  if (records.empty()) throw std::invalid_argument("layers_saved: empty record set");
  double sum_extra = 0.0;
  for (const auto& r : records)
    sum_extra += static_cast<double>(r.exit) - static_cast<double>(n_superficial);
  double mean_extra = sum_extra / static_cast<double>(records.size());
  return 1.0 - (static_cast<double>(n_superficial) + mean_extra) / static_cast<double>(num_layers);
}

}  // namespace eemb
