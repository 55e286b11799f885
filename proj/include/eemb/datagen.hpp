#pragma once

// Seeded synthetic paired-modality corpus. Items share a latent vector z;
// each modality sees a mixed image of z plus item-unique noise scaled by a
// per-item difficulty. Both modalities use the same mixing matrix so that
// same-z pairs are genuinely close across modalities without pretraining
// (standing in for an aligned pretrained embedding model).
//
// Sidecar format (little-endian, magic "EMBC", version 1):
//   magic, version u32, n u64,
//   d_latent u32, input_dim u32, noise_low f32, noise_high f32, seed u64,
//   per item: id u64, difficulty f32, z, raw_a, raw_b (f32 each),
//   crc32 u32 over all preceding bytes.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/io.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

struct CorpusItem {
  std::uint64_t item_id = 0;
  Vec z;      // shared latent
  Vec raw_a;  // modality A input
  Vec raw_b;  // modality B input
  float difficulty = 0.0f;

  bool operator==(const CorpusItem& o) const = default;
};

struct DatagenConfig {
  std::size_t n = 400;
  std::size_t d_latent = 8;
  std::size_t input_dim = 24;
  float noise_low = 0.0f;
  float noise_high = 0.8f;
  std::uint64_t seed = 42;

  void validate() const {
    if (n < 1) throw std::invalid_argument("datagen: n must be >= 1");
    if (d_latent < 1 || input_dim < 1) throw std::invalid_argument("datagen: bad dimensions");
    if (noise_low < 0.0f || noise_high < noise_low)
      throw std::invalid_argument("datagen: need 0 <= noise_low <= noise_high");
  }

  bool operator==(const DatagenConfig& o) const = default;
};

struct Corpus {
  DatagenConfig cfg;
  Mat mixing;  // shared G, input_dim x d_latent
  std::vector<CorpusItem> items;

  bool operator==(const Corpus& o) const = default;
};

inline Corpus generate_corpus(const DatagenConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.cfg = cfg;

  Rng gmix(derive_seed(cfg.seed, "mixing"));
  corpus.mixing = Mat(cfg.input_dim, cfg.d_latent);
  for (auto& v : corpus.mixing.values) v = gmix.uniform(-1.0f, 1.0f);

  Rng rng(derive_seed(cfg.seed, "corpus"));
  corpus.items.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    CorpusItem item;
    item.item_id = i;
    item.z.resize(cfg.d_latent);
    for (auto& v : item.z) v = rng.uniform(-1.0f, 1.0f);
    item.difficulty = rng.uniform(cfg.noise_low, cfg.noise_high);
    Vec base = matvec(corpus.mixing, item.z);
    auto noisy = [&](Vec& dst) {
      dst.resize(cfg.input_dim);
      for (std::size_t k = 0; k < cfg.input_dim; ++k)
        dst[k] = base[k] + item.difficulty * rng.uniform(-1.0f, 1.0f);
    };
    noisy(item.raw_a);
    noisy(item.raw_b);
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

inline const Vec& raw_for_modality(const CorpusItem& item, const std::string& modality) {
  if (modality == "A") return item.raw_a;
  if (modality == "B") return item.raw_b;
  throw std::invalid_argument("corpus: unknown modality '" + modality + "'");
}

// ---- persistence ----

inline constexpr std::uint32_t kCorpusVersion = 1;

inline void serialize_corpus(std::vector<std::uint8_t>& out, const Corpus& c) {
  out.push_back('E');
  out.push_back('M');
  out.push_back('B');
  out.push_back('C');
  io::put_u32(out, kCorpusVersion);
  io::put_u64(out, c.items.size());
  io::put_u32(out, static_cast<std::uint32_t>(c.cfg.d_latent));
  io::put_u32(out, static_cast<std::uint32_t>(c.cfg.input_dim));
  io::put_f32(out, c.cfg.noise_low);
  io::put_f32(out, c.cfg.noise_high);
  io::put_u64(out, c.cfg.seed);
  for (const auto& item : c.items) {
    io::put_u64(out, item.item_id);
    io::put_f32(out, item.difficulty);
    io::put_f32_span(out, item.z.data(), item.z.size());
    io::put_f32_span(out, item.raw_a.data(), item.raw_a.size());
    io::put_f32_span(out, item.raw_b.data(), item.raw_b.size());
  }
  io::put_u32(out, io::crc32(out));
}

inline Corpus deserialize_corpus(io::Reader& r) {
  std::uint8_t magic[4];
  r.bytes(magic, 4);
  if (magic[0] != 'E' || magic[1] != 'M' || magic[2] != 'B' || magic[3] != 'C')
    throw std::runtime_error("corpus: bad magic");
  if (r.u32() != kCorpusVersion) throw std::runtime_error("corpus: unsupported version");
  Corpus c;
  std::uint64_t n = r.u64();
  c.cfg.n = n;
  c.cfg.d_latent = r.u32();
  c.cfg.input_dim = r.u32();
  c.cfg.noise_low = r.f32();
  c.cfg.noise_high = r.f32();
  c.cfg.seed = r.u64();
  // the mixing matrix is regenerable from the seed
  Rng gmix(derive_seed(c.cfg.seed, "mixing"));
  c.mixing = Mat(c.cfg.input_dim, c.cfg.d_latent);
  for (auto& v : c.mixing.values) v = gmix.uniform(-1.0f, 1.0f);
  c.items.resize(n);
  for (auto& item : c.items) {
    item.item_id = r.u64();
    item.difficulty = r.f32();
    item.z.resize(c.cfg.d_latent);
    r.f32_span(item.z.data(), item.z.size());
    item.raw_a.resize(c.cfg.input_dim);
    r.f32_span(item.raw_a.data(), item.raw_a.size());
    item.raw_b.resize(c.cfg.input_dim);
    r.f32_span(item.raw_b.data(), item.raw_b.size());
  }
  return c;
}

inline void save_corpus(const std::string& path, const Corpus& c) {
  std::vector<std::uint8_t> buf;
  serialize_corpus(buf, c);
  io::write_file(path, buf);
}

inline Corpus load_corpus(const std::string& path) {
  auto buf = io::read_file(path);
  if (buf.size() < 4) throw std::runtime_error("corpus: file too small");
  std::uint32_t stored = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                         static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                         static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                         static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
  if (io::crc32(buf.data(), buf.size() - 4) != stored)
    throw std::runtime_error("corpus: checksum mismatch");
  io::Reader r(buf.data(), buf.size() - 4);
  return deserialize_corpus(r);
}

// CSV view: item_id,difficulty. `header_comment`, when nonempty, is written
// as leading '#' lines (config echo).
inline void export_corpus_csv(const std::string& path, const Corpus& c,
                              const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "item_id,difficulty\n";
  for (const auto& item : c.items) out << item.item_id << "," << item.difficulty << "\n";
}

}  // namespace eemb
