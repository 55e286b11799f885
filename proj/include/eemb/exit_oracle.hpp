#pragma once

// Ground-truth "valid embedding exit" labels. The exit of item x is the
// earliest layer i at which the coarse embedding C^i_x is retrieved by the
// item's own fine-grained embedding F_x under argmax cosine over all items'
// layer-i coarse embeddings. Items never retrieved that way get the full
// depth L.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

struct ExitLabel {
  std::uint64_t item_id = 0;
  std::size_t exit = 0;  // in [1, L]

  bool operator==(const ExitLabel& o) const = default;
};

inline std::map<std::uint64_t, Vec> fine_embeddings(const EncoderStack& stack,
                                                    const Corpus& corpus,
                                                    const std::string& modality) {
  std::map<std::uint64_t, Vec> out;
  for (const auto& item : corpus.items)
    out[item.item_id] =
        coarse_embed(stack, modality, raw_for_modality(item, modality), stack.cfg.num_layers,
                     item.item_id)
            .embedding;
  return out;
}

// One incremental sweep: all items advance together layer by layer; at each
// layer the argmax-retrieval test runs against that layer's coarse set.
// Ties break toward the smaller item_id. Items are processed in ascending
// id order, so labels do not depend on corpus ordering.
inline std::vector<ExitLabel> label_exits(const EncoderStack& stack, const Corpus& corpus,
                                          const std::string& modality) {
  const std::size_t L = stack.cfg.num_layers;
  const std::size_t n = corpus.items.size();

  std::vector<const CorpusItem*> by_id;
  by_id.reserve(n);
  for (const auto& item : corpus.items) by_id.push_back(&item);
  std::sort(by_id.begin(), by_id.end(),
            [](const CorpusItem* a, const CorpusItem* b) { return a->item_id < b->item_id; });

  std::vector<Vec> hidden(n);
  std::vector<Vec> fine(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec& raw = raw_for_modality(*by_id[k], modality);
    hidden[k] = embed_input(stack, modality, raw);
    fine[k] = coarse_embed(stack, modality, raw, L, by_id[k]->item_id).embedding;
  }

  std::vector<std::size_t> label(n, 0);  // 0 = unlabeled
  for (std::size_t layer = 1; layer <= L; ++layer) {
    std::vector<Vec> coarse(n);
    for (std::size_t k = 0; k < n; ++k) {
      hidden[k] = forward_layer(stack, modality, layer, hidden[k]);
      coarse[k] = apply_head(stack, hidden[k]);
    }
    for (std::size_t x = 0; x < n; ++x) {
      if (label[x] != 0) continue;
      std::size_t best = 0;
      float best_score = cosine(fine[x], coarse[0]);
      for (std::size_t c = 1; c < n; ++c) {
        float s = cosine(fine[x], coarse[c]);
        if (s > best_score) {  // strict: ties keep the smaller id
          best_score = s;
          best = c;
        }
      }
      if (best == x) label[x] = layer;
    }
  }

  std::vector<ExitLabel> out(n);
  for (std::size_t k = 0; k < n; ++k)
    out[k] = ExitLabel{by_id[k]->item_id, label[k] == 0 ? L : label[k]};
  return out;
}

inline std::map<std::size_t, std::size_t> exit_histogram(const std::vector<ExitLabel>& labels) {
  if (labels.empty()) throw std::invalid_argument("exit_histogram: empty label set");
  std::map<std::size_t, std::size_t> h;
  for (const auto& l : labels) ++h[l.exit];
  return h;
}

// ---- CSV persistence: item_id,exit ----

inline void export_labels_csv(const std::string& path, const std::vector<ExitLabel>& labels,
                              const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("labels: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "item_id,exit\n";
  for (const auto& l : labels) out << l.item_id << "," << l.exit << "\n";
}

inline std::vector<ExitLabel> load_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("labels: cannot open " + path);
  std::vector<ExitLabel> out;
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // item_id,exit
      continue;
    }
    std::istringstream ss(line);
    std::string id_s, exit_s;
    if (!std::getline(ss, id_s, ',') || !std::getline(ss, exit_s))
      throw std::runtime_error("labels: malformed row at line " + std::to_string(line_no));
    out.push_back(ExitLabel{std::stoull(id_s), static_cast<std::size_t>(std::stoul(exit_s))});
  }
  return out;
}

}  // namespace eemb
