#pragma once

// Persistent embedding store. In memory it is two ordered maps (records and
// activation-cache entries); on disk it is a single file laid out as an
// append-ordered block log plus a trailing offset index, every block CRC32
// framed. A truncated or corrupted tail is detected on open and dropped at
// block granularity.
//
// File format (little-endian, magic "EMST", version 1):
//   header: magic, version u32, unified_dim u32, d_model u32, num_layers u32,
//           cache_mode u8, embed_precision u8
//   blocks, each: type u8 (1 = record, 2 = cache), payload, crc32 u32 over
//     type + payload.
//     record payload: id u64, modality u8, exit u8, state u8, dim u32,
//       embedding (dim f32, or a QuantBlock when embed_precision is int4)
//     cache payload: id u64, layer u8, mode u8,
//       GroupedQuant wire (mode 0 = int4) or count u32 + f32s (mode 1 = lossless)
//   index: marker "EIDX", n_records u32, (id u64, offset u64)...,
//          n_cache u32, (id u64, offset u64)..., crc32 u32 over the section
//   footer: index_offset u64, crc32 u32 over the footer prefix, magic "EIDX"
//
// If the footer or any indexed block fails validation the loader falls back
// to a sequential scan and keeps every block up to the first bad byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/encoder.hpp"
#include "eemb/io.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

enum class RecordState : std::uint8_t { coarse = 0, fine = 1 };

struct EmbeddingRecord {
  std::uint64_t item_id = 0;
  char modality = 'A';  // single-byte modality tag
  std::uint8_t exit = 0;
  RecordState state = RecordState::coarse;
  Vec embedding;  // unified_dim; unit norm or zero

  bool operator==(const EmbeddingRecord& o) const = default;
};

struct ActivationCacheEntry {
  std::uint64_t item_id = 0;
  std::uint8_t layer = 0;
  GroupedQuant quant;  // int4 mode; grouped scales, see numerics.hpp
  Vec exact;           // lossless mode

  bool operator==(const ActivationCacheEntry& o) const = default;
};

struct StoreStats {
  std::size_t n_records = 0;
  std::size_t n_cache_entries = 0;
  std::size_t record_block_bytes = 0;      // per record, full framed block
  std::size_t embedding_payload_bytes = 0; // per record, embedding bytes only
  std::size_t cache_block_bytes = 0;       // per cache entry, full framed block
  std::size_t header_bytes = 0;
  std::size_t index_bytes = 0;  // index section + footer
  std::size_t total_bytes = 0;
};

struct StoreLoadInfo {
  bool used_index = false;
  bool truncated_tail = false;
  std::size_t dropped_bytes = 0;
};

struct IntegrityIssue {
  std::uint64_t item_id = 0;
  std::string what;
};

class Store {
 public:
  enum class CacheMode : std::uint8_t { int4 = 0, lossless = 1 };
  enum class EmbedPrecision : std::uint8_t { f32 = 0, int4 = 1 };

  Store(std::size_t unified_dim, std::size_t d_model, std::size_t num_layers,
        CacheMode cache_mode = CacheMode::int4, EmbedPrecision precision = EmbedPrecision::f32)
      : unified_dim_(unified_dim),
        d_model_(d_model),
        num_layers_(num_layers),
        cache_mode_(cache_mode),
        precision_(precision) {
    if (unified_dim_ == 0 || d_model_ == 0 || num_layers_ == 0)
      throw std::invalid_argument("store: bad dimensions");
  }

  std::size_t unified_dim() const { return unified_dim_; }
  std::size_t d_model() const { return d_model_; }
  std::size_t num_layers() const { return num_layers_; }
  CacheMode cache_mode() const { return cache_mode_; }
  EmbedPrecision precision() const { return precision_; }
  std::size_t size() const { return records_.size(); }
  bool contains(std::uint64_t id) const { return records_.count(id) != 0; }
  const std::map<std::uint64_t, EmbeddingRecord>& records() const { return records_; }

  void put_coarse(const EmbeddingRecord& rec, const ActivationSnapshot& snap) {
    if (records_.count(rec.item_id))
      throw std::invalid_argument("store: duplicate item id " + std::to_string(rec.item_id));
    validate_record(rec);
    if (rec.state != RecordState::coarse)
      throw std::invalid_argument("store: put_coarse requires a coarse record");
    if (snap.hidden.size() != d_model_)
      throw std::invalid_argument("store: snapshot dimension mismatch");
    if (snap.layer_index != rec.exit)
      throw std::invalid_argument("store: snapshot layer disagrees with record exit");

    ActivationCacheEntry entry;
    entry.item_id = rec.item_id;
    entry.layer = rec.exit;
    if (cache_mode_ == CacheMode::int4)
      entry.quant = quantize_int4_grouped(snap.hidden);
    else
      entry.exact = snap.hidden;

    records_[rec.item_id] = rec;
    if (precision_ == EmbedPrecision::int4) {
      // lossy payload: the record keeps what a reload would see
      records_[rec.item_id].embedding = dequantize_int4(quantize_int4(rec.embedding));
    }
    cache_[rec.item_id] = std::move(entry);
  }

  struct GetResult {
    EmbeddingRecord record;
    std::optional<ActivationCacheEntry> cache;
  };

  GetResult get(std::uint64_t id) const {
    auto it = records_.find(id);
    if (it == records_.end())
      throw std::out_of_range("store: no record for id " + std::to_string(id));
    GetResult out;
    out.record = it->second;
    auto c = cache_.find(id);
    if (c != cache_.end()) out.cache = c->second;
    return out;
  }

  // Dequantize-on-read resume point for a coarse record.
  Vec cached_hidden(std::uint64_t id) const {
    auto c = cache_.find(id);
    if (c == cache_.end())
      throw std::out_of_range("store: no activation cache for id " + std::to_string(id));
    if (cache_mode_ == CacheMode::int4) return dequantize_int4_grouped(c->second.quant);
    return c->second.exact;
  }

  // Ascending distinct exit layers; fine records count at full depth.
  std::vector<std::size_t> list_exits() const {
    std::vector<std::size_t> out;
    for (const auto& [id, rec] : records_) {
      std::size_t e = rec.state == RecordState::fine ? num_layers_ : rec.exit;
      if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // Returns false when the record is already fine (idempotent no-op).
  bool upgrade_to_fine(std::uint64_t id, const Vec& fine_embedding) {
    auto it = records_.find(id);
    if (it == records_.end())
      throw std::out_of_range("store: no record for id " + std::to_string(id));
    if (it->second.state == RecordState::fine) return false;
    if (fine_embedding.size() != unified_dim_)
      throw std::invalid_argument("store: fine embedding dimension mismatch");
    validate_norm(fine_embedding);
    it->second.embedding = fine_embedding;
    if (precision_ == EmbedPrecision::int4)
      it->second.embedding = dequantize_int4(quantize_int4(fine_embedding));
    it->second.state = RecordState::fine;
    cache_.erase(id);
    return true;
  }

  // state == fine <=> no cache entry
  std::vector<IntegrityIssue> verify_integrity() const {
    std::vector<IntegrityIssue> issues;
    for (const auto& [id, rec] : records_) {
      bool cached = cache_.count(id) != 0;
      if (rec.state == RecordState::fine && cached)
        issues.push_back({id, "fine record still has a cache entry"});
      if (rec.state == RecordState::coarse && !cached)
        issues.push_back({id, "coarse record lost its cache entry"});
    }
    for (const auto& [id, entry] : cache_)
      if (!records_.count(id)) issues.push_back({id, "orphan cache entry"});
    return issues;
  }

  StoreStats storage_report() const {
    StoreStats st;
    st.n_records = records_.size();
    st.n_cache_entries = cache_.size();
    st.header_bytes = header_bytes();
    st.embedding_payload_bytes = embedding_payload_bytes();
    st.record_block_bytes = record_block_bytes();
    st.cache_block_bytes = cache_block_bytes();
    st.index_bytes = index_section_bytes() + footer_bytes();
    st.total_bytes = st.header_bytes + st.n_records * st.record_block_bytes +
                     st.n_cache_entries * st.cache_block_bytes + st.index_bytes;
    return st;
  }

  bool operator==(const Store& o) const {
    return unified_dim_ == o.unified_dim_ && d_model_ == o.d_model_ &&
           num_layers_ == o.num_layers_ && cache_mode_ == o.cache_mode_ &&
           precision_ == o.precision_ && records_ == o.records_ && cache_ == o.cache_;
  }

  // ---- persistence ----

  void save(const std::string& path) const {
    std::vector<std::uint8_t> buf;
    buf.push_back('E');
    buf.push_back('M');
    buf.push_back('S');
    buf.push_back('T');
    io::put_u32(buf, kVersion);
    io::put_u32(buf, static_cast<std::uint32_t>(unified_dim_));
    io::put_u32(buf, static_cast<std::uint32_t>(d_model_));
    io::put_u32(buf, static_cast<std::uint32_t>(num_layers_));
    io::put_u8(buf, static_cast<std::uint8_t>(cache_mode_));
    io::put_u8(buf, static_cast<std::uint8_t>(precision_));

    std::vector<std::pair<std::uint64_t, std::uint64_t>> rec_offsets, cache_offsets;
    for (const auto& [id, rec] : records_) {
      rec_offsets.emplace_back(id, buf.size());
      append_record_block(buf, rec);
    }
    for (const auto& [id, entry] : cache_) {
      cache_offsets.emplace_back(id, buf.size());
      append_cache_block(buf, entry);
    }

    std::uint64_t index_offset = buf.size();
    std::size_t index_start = buf.size();
    buf.push_back('E');
    buf.push_back('I');
    buf.push_back('D');
    buf.push_back('X');
    io::put_u32(buf, static_cast<std::uint32_t>(rec_offsets.size()));
    for (auto [id, off] : rec_offsets) {
      io::put_u64(buf, id);
      io::put_u64(buf, off);
    }
    io::put_u32(buf, static_cast<std::uint32_t>(cache_offsets.size()));
    for (auto [id, off] : cache_offsets) {
      io::put_u64(buf, id);
      io::put_u64(buf, off);
    }
    io::put_u32(buf, io::crc32(buf.data() + index_start, buf.size() - index_start));

    std::size_t footer_start = buf.size();
    io::put_u64(buf, index_offset);
    io::put_u32(buf, io::crc32(buf.data() + footer_start, buf.size() - footer_start));
    buf.push_back('E');
    buf.push_back('I');
    buf.push_back('D');
    buf.push_back('X');

    io::write_file(path, buf);
  }

  static Store load(const std::string& path, StoreLoadInfo* info = nullptr) {
    auto buf = io::read_file(path);
    StoreLoadInfo local;
    Store st = load_from_bytes(buf, local);
    if (info) *info = local;
    return st;
  }

 private:
  inline static constexpr std::uint32_t kVersion = 1;

  std::size_t unified_dim_;
  std::size_t d_model_;
  std::size_t num_layers_;
  CacheMode cache_mode_;
  EmbedPrecision precision_;
  std::map<std::uint64_t, EmbeddingRecord> records_;
  std::map<std::uint64_t, ActivationCacheEntry> cache_;

  void validate_record(const EmbeddingRecord& rec) const {
    if (rec.embedding.size() != unified_dim_)
      throw std::invalid_argument("store: embedding dimension mismatch");
    if (rec.exit < 1 || rec.exit > num_layers_)
      throw std::invalid_argument("store: exit out of range");
    validate_norm(rec.embedding);
  }

  static void validate_norm(const Vec& v) {
    float n = norm2(v);
    if (n != 0.0f && std::fabs(n - 1.0f) > 1e-5f)
      throw std::invalid_argument("store: embedding must be unit norm or zero");
  }

  std::size_t header_bytes() const { return 4 + 4 + 4 + 4 + 4 + 1 + 1; }

  std::size_t embedding_payload_bytes() const {
    if (precision_ == EmbedPrecision::int4)
      return (unified_dim_ + 1) / 2;  // packed codes; scale/count counted as metadata
    return 4 * unified_dim_;
  }

  std::size_t record_block_bytes() const {
    std::size_t payload = precision_ == EmbedPrecision::int4
                              ? quant_block_wire_size(static_cast<std::uint32_t>(unified_dim_))
                              : 4 * unified_dim_;
    return 1 + 8 + 1 + 1 + 1 + 4 + payload + 4;
  }

  std::size_t cache_block_bytes() const {
    std::size_t payload =
        cache_mode_ == CacheMode::int4
            ? grouped_quant_wire_size(static_cast<std::uint32_t>(d_model_), kActivationQuantGroup)
            : 4 + 4 * d_model_;
    return 1 + 8 + 1 + 1 + payload + 4;
  }

  std::size_t index_section_bytes() const {
    return 4 + 4 + records_.size() * 16 + 4 + cache_.size() * 16 + 4;
  }

  static std::size_t footer_bytes() { return 8 + 4 + 4; }

  void append_record_block(std::vector<std::uint8_t>& buf, const EmbeddingRecord& rec) const {
    std::size_t start = buf.size();
    io::put_u8(buf, 1);
    io::put_u64(buf, rec.item_id);
    io::put_u8(buf, static_cast<std::uint8_t>(rec.modality));
    io::put_u8(buf, rec.exit);
    io::put_u8(buf, static_cast<std::uint8_t>(rec.state));
    io::put_u32(buf, static_cast<std::uint32_t>(rec.embedding.size()));
    if (precision_ == EmbedPrecision::int4)
      encode_quant_block(buf, quantize_int4(rec.embedding));
    else
      io::put_f32_span(buf, rec.embedding.data(), rec.embedding.size());
    io::put_u32(buf, io::crc32(buf.data() + start, buf.size() - start));
  }

  void append_cache_block(std::vector<std::uint8_t>& buf, const ActivationCacheEntry& e) const {
    std::size_t start = buf.size();
    io::put_u8(buf, 2);
    io::put_u64(buf, e.item_id);
    io::put_u8(buf, e.layer);
    io::put_u8(buf, static_cast<std::uint8_t>(cache_mode_));
    if (cache_mode_ == CacheMode::int4) {
      encode_grouped_quant(buf, e.quant);
    } else {
      io::put_u32(buf, static_cast<std::uint32_t>(e.exact.size()));
      io::put_f32_span(buf, e.exact.data(), e.exact.size());
    }
    io::put_u32(buf, io::crc32(buf.data() + start, buf.size() - start));
  }

  // Reads one block at `pos`; returns the end offset or throws on damage.
  std::size_t read_block(const std::vector<std::uint8_t>& buf, std::size_t pos) {
    io::Reader r(buf.data(), buf.size());
    r.seek(pos);
    std::uint8_t type = r.u8();
    if (type == 1) {
      EmbeddingRecord rec;
      rec.item_id = r.u64();
      rec.modality = static_cast<char>(r.u8());
      rec.exit = r.u8();
      std::uint8_t state = r.u8();
      if (state > 1) throw std::runtime_error("store: bad record state");
      rec.state = static_cast<RecordState>(state);
      std::uint32_t dim = r.u32();
      if (dim != unified_dim_) throw std::runtime_error("store: record dim mismatch");
      if (precision_ == EmbedPrecision::int4) {
        QuantBlock q = decode_quant_block(r);
        if (q.count != dim) throw std::runtime_error("store: record quant count mismatch");
        rec.embedding = dequantize_int4(q);
      } else {
        rec.embedding.resize(dim);
        r.f32_span(rec.embedding.data(), dim);
      }
      check_block_crc(buf, pos, r);
      records_[rec.item_id] = std::move(rec);
      return r.pos() + 4;
    }
    if (type == 2) {
      ActivationCacheEntry e;
      e.item_id = r.u64();
      e.layer = r.u8();
      std::uint8_t mode = r.u8();
      if (mode != static_cast<std::uint8_t>(cache_mode_))
        throw std::runtime_error("store: cache mode mismatch");
      if (cache_mode_ == CacheMode::int4) {
        e.quant = decode_grouped_quant(r);
        if (e.quant.count != d_model_) throw std::runtime_error("store: cache count mismatch");
      } else {
        std::uint32_t count = r.u32();
        if (count != d_model_) throw std::runtime_error("store: cache count mismatch");
        e.exact.resize(count);
        r.f32_span(e.exact.data(), count);
      }
      check_block_crc(buf, pos, r);
      cache_[e.item_id] = std::move(e);
      return r.pos() + 4;
    }
    throw std::runtime_error("store: unknown block type");
  }

  static void check_block_crc(const std::vector<std::uint8_t>& buf, std::size_t start,
                              io::Reader& r) {
    std::size_t end = r.pos();
    std::uint32_t stored = r.u32();
    if (io::crc32(buf.data() + start, end - start) != stored)
      throw std::runtime_error("store: block checksum mismatch");
    r.seek(end);
  }

  static Store load_from_bytes(const std::vector<std::uint8_t>& buf, StoreLoadInfo& info) {
    io::Reader r(buf.data(), buf.size());
    std::uint8_t magic[4];
    r.bytes(magic, 4);
    if (magic[0] != 'E' || magic[1] != 'M' || magic[2] != 'S' || magic[3] != 'T')
      throw std::runtime_error("store: bad magic");
    if (r.u32() != kVersion) throw std::runtime_error("store: unsupported version");
    std::uint32_t unified = r.u32();
    std::uint32_t d_model = r.u32();
    std::uint32_t layers = r.u32();
    std::uint8_t mode = r.u8();
    std::uint8_t precision = r.u8();
    Store st(unified, d_model, layers, static_cast<CacheMode>(mode),
             static_cast<EmbedPrecision>(precision));
    const std::size_t body_start = r.pos();

    // fast path: valid footer -> walk the indexed blocks
    const std::size_t footer = footer_bytes();
    if (buf.size() >= body_start + footer) {
      std::size_t f = buf.size() - footer;
      bool footer_ok = buf[buf.size() - 4] == 'E' && buf[buf.size() - 3] == 'I' &&
                       buf[buf.size() - 2] == 'D' && buf[buf.size() - 1] == 'X';
      if (footer_ok) {
        io::Reader fr(buf.data(), buf.size());
        fr.seek(f);
        std::uint64_t index_offset = fr.u64();
        std::uint32_t fcrc = fr.u32();
        footer_ok = io::crc32(buf.data() + f, 8) == fcrc && index_offset >= body_start &&
                    index_offset < f;
        if (footer_ok) {
          std::size_t index_len = f - index_offset;
          if (index_len >= 8 && buf[index_offset] == 'E' && buf[index_offset + 1] == 'I' &&
              buf[index_offset + 2] == 'D' && buf[index_offset + 3] == 'X' &&
              io::crc32(buf.data() + index_offset, index_len - 4) ==
                  (static_cast<std::uint32_t>(buf[f - 4]) |
                   static_cast<std::uint32_t>(buf[f - 3]) << 8 |
                   static_cast<std::uint32_t>(buf[f - 2]) << 16 |
                   static_cast<std::uint32_t>(buf[f - 1]) << 24)) {
            try {
              io::Reader ir(buf.data(), f - 4);
              ir.seek(index_offset + 4);
              std::uint32_t n_rec = ir.u32();
              std::vector<std::uint64_t> offsets;
              for (std::uint32_t i = 0; i < n_rec; ++i) {
                ir.u64();
                offsets.push_back(ir.u64());
              }
              std::uint32_t n_cache = ir.u32();
              for (std::uint32_t i = 0; i < n_cache; ++i) {
                ir.u64();
                offsets.push_back(ir.u64());
              }
              for (std::uint64_t off : offsets) st.read_block(buf, off);
              info.used_index = true;
              return st;
            } catch (const std::exception&) {
              st.records_.clear();
              st.cache_.clear();
            }
          }
        }
      }
    }

    // recovery path: sequential scan, drop the tail at the first bad block
    std::size_t pos = body_start;
    while (pos < buf.size()) {
      if (buf[pos] == 'E' && pos + 4 <= buf.size() && buf[pos + 1] == 'I' &&
          buf[pos + 2] == 'D' && buf[pos + 3] == 'X')
        break;  // start of a (possibly damaged) index section: blocks are done
      try {
        pos = st.read_block(buf, pos);
      } catch (const std::exception&) {
        info.truncated_tail = true;
        info.dropped_bytes = buf.size() - pos;
        break;
      }
    }
    return st;
  }
};

}  // namespace eemb
