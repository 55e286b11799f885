#pragma once

// Layerwise toy multimodal encoder: per-modality residual MLP towers, one
// shared low-rank adapter pair per block, and a single frozen output head
// used at every exit. All modality towers start from identical weights so
// same-latent inputs land near each other across modalities without any
// pretraining; healing may diverge the adapters per modality later.
//
// Checkpoint format (little-endian, magic "EMBR", version 1):
//   magic, version u32,
//   L u32, d_model u32, unified_dim u32, input_dim u32,
//   lora_rank u32, lora_alpha f32, init_gain f32, seed u64,
//   n_modalities u32, per modality: tag (u8 len + bytes),
//   per modality: W_in (d_model x input_dim),
//   per modality, per layer: w_up (d x d), w_down (d x d),
//   head proj (unified_dim x d_model),
//   if lora_rank > 0: per modality, per layer: lora_a (r x d), lora_b (d x r),
//   crc32 u32 over all preceding bytes.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/io.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

struct EncoderConfig {
  std::size_t num_layers = 12;
  std::size_t d_model = 64;
  std::size_t unified_dim = 32;
  std::size_t input_dim = 24;
  std::vector<std::string> modalities = {"A", "B"};
  std::uint64_t seed = 42;
  std::size_t lora_rank = 4;
  float lora_alpha = 8.0f;
  // Block weights draw from U(-init_gain, init_gain)/sqrt(d_model). The
  // default keeps hidden norms bounded while moving representations enough
  // per layer that exit labels spread across the full depth.
  float init_gain = 1.5f;

  void validate() const {
    if (num_layers < 2) throw std::invalid_argument("encoder: num_layers must be >= 2");
    if (d_model == 0 || unified_dim == 0 || input_dim == 0)
      throw std::invalid_argument("encoder: dimensions must be positive");
    if (unified_dim > d_model)
      throw std::invalid_argument("encoder: unified_dim must not exceed d_model");
    if (modalities.empty()) throw std::invalid_argument("encoder: no modalities");
  }

  bool operator==(const EncoderConfig& o) const = default;
};

struct LayerBlock {
  Mat w_up;    // d_model x d_model
  Mat w_down;  // d_model x d_model
  Mat lora_a;  // lora_rank x d_model (empty when rank 0)
  Mat lora_b;  // d_model x lora_rank (empty when rank 0)

  bool operator==(const LayerBlock& o) const = default;
};

struct ModalityTower {
  std::string tag;
  Mat embed;  // d_model x input_dim
  std::vector<LayerBlock> blocks;

  bool operator==(const ModalityTower& o) const = default;
};

struct OutputHead {
  Mat proj;  // unified_dim x d_model; frozen during healing

  bool operator==(const OutputHead& o) const = default;
};

struct ActivationSnapshot {
  std::uint64_t item_id = 0;
  std::size_t layer_index = 0;  // in [1, L]
  Vec hidden;                   // post-block, pre-head state
};

struct EncoderStack {
  EncoderConfig cfg;
  std::vector<ModalityTower> towers;
  OutputHead head;

  // Instrumentation for reuse tests; counts forward_layer evaluations.
  mutable std::atomic<std::uint64_t> layer_invocations{0};

  EncoderStack() = default;
  EncoderStack(const EncoderStack& o)
      : cfg(o.cfg), towers(o.towers), head(o.head), layer_invocations(o.layer_invocations.load()) {}
  EncoderStack& operator=(const EncoderStack& o) {
    cfg = o.cfg;
    towers = o.towers;
    head = o.head;
    layer_invocations.store(o.layer_invocations.load());
    return *this;
  }
  EncoderStack(EncoderStack&&) = default;
  EncoderStack& operator=(EncoderStack&&) = default;

  std::size_t tower_index(const std::string& modality) const {
    for (std::size_t i = 0; i < towers.size(); ++i)
      if (towers[i].tag == modality) return i;
    throw std::invalid_argument("encoder: unknown modality '" + modality + "'");
  }

  bool weights_equal(const EncoderStack& o) const {
    return cfg == o.cfg && towers == o.towers && head == o.head;
  }
};

inline EncoderStack init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderStack stack;
  stack.cfg = cfg;
  Rng rng(cfg.seed);
  const float w_scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
  auto draw = [&](std::size_t rows, std::size_t cols, float gain) {
    Mat m(rows, cols);
    for (auto& v : m.values) v = rng.uniform(-1.0f, 1.0f) * (gain * w_scale);
    return m;
  };

  // One weight stream; every modality gets the same tower at init.
  ModalityTower proto;
  proto.embed = draw(cfg.d_model, cfg.input_dim, 1.0f);
  proto.blocks.resize(cfg.num_layers);
  for (auto& b : proto.blocks) {
    b.w_up = draw(cfg.d_model, cfg.d_model, cfg.init_gain);
    b.w_down = draw(cfg.d_model, cfg.d_model, cfg.init_gain);
    if (cfg.lora_rank > 0) {
      b.lora_a = draw(cfg.lora_rank, cfg.d_model, 1.0f);
      b.lora_b = Mat(cfg.d_model, cfg.lora_rank);  // zero: adapter starts as identity delta
    }
  }
  stack.head.proj = draw(cfg.unified_dim, cfg.d_model, 1.0f);

  stack.towers.reserve(cfg.modalities.size());
  for (const auto& tag : cfg.modalities) {
    ModalityTower t = proto;
    t.tag = tag;
    stack.towers.push_back(std::move(t));
  }
  return stack;
}

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
}

// d/dx gelu = Phi(x) + x * phi(x)
inline float gelu_grad(float x) {
  const float phi = 0.39894228040143267794f * std::exp(-0.5f * x * x);
  const float Phi = 0.5f * (1.0f + std::erf(x * 0.70710678118654752440f));
  return Phi + x * phi;
}

// x' = x + w_down . gelu(w_up . x) + [lora_on] (alpha/r) lora_b . (lora_a . x)
//
// Shared by the in-memory stack and the file-streaming pipeline; both paths
// must run this exact arithmetic for the bitwise-equality contract.
inline Vec apply_block(const LayerBlock& b, float lora_gain, const Vec& x, bool lora_on) {
  Vec u = matvec(b.w_up, x);
  for (auto& v : u) v = gelu(v);
  Vec d = matvec(b.w_down, u);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + d[i];
  if (lora_on && !b.lora_a.values.empty()) {
    Vec t = matvec(b.lora_a, x);
    Vec lb = matvec(b.lora_b, t);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += lora_gain * lb[i];
  }
  return out;
}

inline Vec forward_layer(const EncoderStack& stack, const std::string& modality,
                         std::size_t layer, const Vec& x, bool lora_on = true) {
  if (layer < 1 || layer > stack.cfg.num_layers)
    throw std::out_of_range("forward_layer: layer index out of range");
  const LayerBlock& b = stack.towers[stack.tower_index(modality)].blocks[layer - 1];
  if (x.size() != stack.cfg.d_model)
    throw std::invalid_argument("forward_layer: hidden dimension mismatch");
  stack.layer_invocations.fetch_add(1, std::memory_order_relaxed);
  const float gain = stack.cfg.lora_rank > 0
                         ? stack.cfg.lora_alpha / static_cast<float>(stack.cfg.lora_rank)
                         : 0.0f;
  return apply_block(b, gain, x, lora_on);
}

// Composition of forward_layer over layers from+1 .. to. The empty range
// (from == to) is the identity.
inline Vec forward_range(const EncoderStack& stack, const std::string& modality,
                         std::size_t from, std::size_t to, Vec x, bool lora_on = true) {
  if (from > to || to > stack.cfg.num_layers)
    throw std::out_of_range("forward_range: bad layer range");
  for (std::size_t k = from + 1; k <= to; ++k) x = forward_layer(stack, modality, k, x, lora_on);
  return x;
}

// Seeded linear lift of the raw modality vector into the d_model space.
inline Vec embed_input(const EncoderStack& stack, const std::string& modality, const Vec& raw) {
  if (raw.size() != stack.cfg.input_dim)
    throw std::invalid_argument("embed_input: raw dimension mismatch");
  return matvec(stack.towers[stack.tower_index(modality)].embed, raw);
}

// Shared frozen head; unit-norm output for nonzero input.
inline Vec apply_head(const EncoderStack& stack, const Vec& hidden) {
  if (hidden.size() != stack.cfg.d_model)
    throw std::invalid_argument("apply_head: hidden dimension mismatch");
  return l2_normalize(matvec(stack.head.proj, hidden));
}

struct CoarseResult {
  Vec embedding;                // unified_dim, unit norm (or zero)
  ActivationSnapshot snapshot;  // pre-head hidden at the exit layer
};

// Coarse embedding at an intermediate exit; exit_layer == L gives the
// fine-grained embedding.
inline CoarseResult coarse_embed(const EncoderStack& stack, const std::string& modality,
                                 const Vec& raw, std::size_t exit_layer,
                                 std::uint64_t item_id = 0, bool lora_on = true) {
  if (exit_layer < 1 || exit_layer > stack.cfg.num_layers)
    throw std::out_of_range("coarse_embed: exit layer out of range");
  Vec h = embed_input(stack, modality, raw);
  h = forward_range(stack, modality, 0, exit_layer, std::move(h), lora_on);
  CoarseResult res;
  res.snapshot = ActivationSnapshot{item_id, exit_layer, h};
  res.embedding = apply_head(stack, h);
  return res;
}

// ---- checkpoint serialization ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void serialize_encoder(std::vector<std::uint8_t>& out, const EncoderStack& stack) {
  const auto& cfg = stack.cfg;
  out.push_back('E');
  out.push_back('M');
  out.push_back('B');
  out.push_back('R');
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(cfg.num_layers));
  io::put_u32(out, static_cast<std::uint32_t>(cfg.d_model));
  io::put_u32(out, static_cast<std::uint32_t>(cfg.unified_dim));
  io::put_u32(out, static_cast<std::uint32_t>(cfg.input_dim));
  io::put_u32(out, static_cast<std::uint32_t>(cfg.lora_rank));
  io::put_f32(out, cfg.lora_alpha);
  io::put_f32(out, cfg.init_gain);
  io::put_u64(out, cfg.seed);
  io::put_u32(out, static_cast<std::uint32_t>(cfg.modalities.size()));
  for (const auto& tag : cfg.modalities) io::put_string(out, tag);
  for (const auto& t : stack.towers)
    io::put_f32_span(out, t.embed.values.data(), t.embed.values.size());
  for (const auto& t : stack.towers)
    for (const auto& b : t.blocks) {
      io::put_f32_span(out, b.w_up.values.data(), b.w_up.values.size());
      io::put_f32_span(out, b.w_down.values.data(), b.w_down.values.size());
    }
  io::put_f32_span(out, stack.head.proj.values.data(), stack.head.proj.values.size());
  if (cfg.lora_rank > 0)
    for (const auto& t : stack.towers)
      for (const auto& b : t.blocks) {
        io::put_f32_span(out, b.lora_a.values.data(), b.lora_a.values.size());
        io::put_f32_span(out, b.lora_b.values.data(), b.lora_b.values.size());
      }
  io::put_u32(out, io::crc32(out));
}

// Parses just the header + config fields, leaving the reader at the start
// of the embed-matrix section.
inline EncoderConfig read_checkpoint_config(io::Reader& r) {
  std::uint8_t magic[4];
  r.bytes(magic, 4);
  if (magic[0] != 'E' || magic[1] != 'M' || magic[2] != 'B' || magic[3] != 'R')
    throw std::runtime_error("checkpoint: bad magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  EncoderConfig cfg;
  cfg.num_layers = r.u32();
  cfg.d_model = r.u32();
  cfg.unified_dim = r.u32();
  cfg.input_dim = r.u32();
  cfg.lora_rank = r.u32();
  cfg.lora_alpha = r.f32();
  cfg.init_gain = r.f32();
  cfg.seed = r.u64();
  std::uint32_t n_modal = r.u32();
  cfg.modalities.clear();
  for (std::uint32_t i = 0; i < n_modal; ++i) cfg.modalities.push_back(r.str());
  cfg.validate();
  return cfg;
}

inline EncoderStack deserialize_encoder(io::Reader& r) {
  EncoderConfig cfg = read_checkpoint_config(r);
  const std::size_t n_modal = cfg.modalities.size();

  EncoderStack stack;
  stack.cfg = cfg;
  stack.towers.resize(n_modal);
  for (std::uint32_t i = 0; i < n_modal; ++i) {
    stack.towers[i].tag = cfg.modalities[i];
    stack.towers[i].embed = Mat(cfg.d_model, cfg.input_dim);
    r.f32_span(stack.towers[i].embed.values.data(), stack.towers[i].embed.values.size());
  }
  for (auto& t : stack.towers) {
    t.blocks.resize(cfg.num_layers);
    for (auto& b : t.blocks) {
      b.w_up = Mat(cfg.d_model, cfg.d_model);
      r.f32_span(b.w_up.values.data(), b.w_up.values.size());
      b.w_down = Mat(cfg.d_model, cfg.d_model);
      r.f32_span(b.w_down.values.data(), b.w_down.values.size());
    }
  }
  stack.head.proj = Mat(cfg.unified_dim, cfg.d_model);
  r.f32_span(stack.head.proj.values.data(), stack.head.proj.values.size());
  if (cfg.lora_rank > 0)
    for (auto& t : stack.towers)
      for (auto& b : t.blocks) {
        b.lora_a = Mat(cfg.lora_rank, cfg.d_model);
        r.f32_span(b.lora_a.values.data(), b.lora_a.values.size());
        b.lora_b = Mat(cfg.d_model, cfg.lora_rank);
        r.f32_span(b.lora_b.values.data(), b.lora_b.values.size());
      }
  return stack;
}

// Byte offsets of every section in a serialized checkpoint, derived from the
// config alone. The layer store's index entries are cross-checked against
// this arithmetic on open.
struct CheckpointLayout {
  std::size_t embeds_offset = 0;
  std::size_t blocks_offset = 0;
  std::size_t head_offset = 0;
  std::size_t lora_offset = 0;  // 0 when rank 0
  std::size_t total = 0;        // includes the trailing crc32
  std::size_t embed_bytes = 0;
  std::size_t base_block_bytes = 0;
  std::size_t lora_block_bytes = 0;
  std::size_t n_modalities = 0;
  std::size_t num_layers = 0;

  std::size_t base_offset(std::size_t modality_idx, std::size_t layer) const {
    return blocks_offset + (modality_idx * num_layers + layer - 1) * base_block_bytes;
  }
  std::size_t layer_lora_offset(std::size_t modality_idx, std::size_t layer) const {
    return lora_offset + (modality_idx * num_layers + layer - 1) * lora_block_bytes;
  }
};

inline CheckpointLayout checkpoint_layout(const EncoderConfig& cfg) {
  CheckpointLayout lay;
  lay.n_modalities = cfg.modalities.size();
  lay.num_layers = cfg.num_layers;
  std::size_t header = 4 + 4 + 5 * 4 + 4 + 4 + 8 + 4;  // magic..n_modalities
  for (const auto& tag : cfg.modalities) header += 1 + tag.size();
  lay.embeds_offset = header;
  lay.embed_bytes = 4 * cfg.d_model * cfg.input_dim;
  lay.blocks_offset = lay.embeds_offset + lay.n_modalities * lay.embed_bytes;
  lay.base_block_bytes = 4 * 2 * cfg.d_model * cfg.d_model;
  lay.head_offset = lay.blocks_offset + lay.n_modalities * cfg.num_layers * lay.base_block_bytes;
  std::size_t head_bytes = 4 * cfg.unified_dim * cfg.d_model;
  if (cfg.lora_rank > 0) {
    lay.lora_offset = lay.head_offset + head_bytes;
    lay.lora_block_bytes = 4 * 2 * cfg.lora_rank * cfg.d_model;
    lay.total = lay.lora_offset + lay.n_modalities * cfg.num_layers * lay.lora_block_bytes + 4;
  } else {
    lay.total = lay.head_offset + head_bytes + 4;
  }
  return lay;
}

inline void save_encoder(const std::string& path, const EncoderStack& stack) {
  std::vector<std::uint8_t> buf;
  serialize_encoder(buf, stack);
  io::write_file(path, buf);
}

// Accepts both a bare checkpoint and a layer-store file (checkpoint plus a
// trailing index): the checkpoint's own length comes from its config.
inline EncoderStack load_encoder(const std::string& path) {
  auto buf = io::read_file(path);
  io::Reader probe(buf);
  EncoderConfig cfg = read_checkpoint_config(probe);
  CheckpointLayout lay = checkpoint_layout(cfg);
  if (buf.size() < lay.total) throw std::runtime_error("checkpoint: file too small");
  std::uint32_t stored_crc = static_cast<std::uint32_t>(buf[lay.total - 4]) |
                             static_cast<std::uint32_t>(buf[lay.total - 3]) << 8 |
                             static_cast<std::uint32_t>(buf[lay.total - 2]) << 16 |
                             static_cast<std::uint32_t>(buf[lay.total - 1]) << 24;
  if (io::crc32(buf.data(), lay.total - 4) != stored_crc)
    throw std::runtime_error("checkpoint: checksum mismatch");
  io::Reader r(buf.data(), lay.total - 4);
  return deserialize_encoder(r);
}

}  // namespace eemb
