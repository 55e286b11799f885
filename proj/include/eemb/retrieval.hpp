#pragma once

// Online query runtime. Round 1 ranks each stored granularity against the
// query embedding of the same depth; round 2 merges the per-granularity
// top-k with duplicate resolution; round 3 refines surviving coarse
// candidates by resuming from their cached activations and rescoring against
// the full-depth query embedding. Refined items are upgraded in place, so a
// repeated query skips all recomputation.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/encoder.hpp"
#include "eemb/numerics.hpp"
#include "eemb/store.hpp"

namespace eemb {

struct Candidate {
  std::uint64_t item_id = 0;
  std::size_t granularity = 0;  // store-side exit the score was taken at
  float score = 0.0f;
  std::size_t rank = 0;  // 0-based rank within its granularity group

  bool operator==(const Candidate& o) const = default;
};

struct QueryStageTimings {
  double embed_seconds = 0.0;
  double filter_seconds = 0.0;
  double verify_seconds = 0.0;
  double correct_seconds = 0.0;
};

struct QueryResult {
  std::vector<std::pair<std::uint64_t, float>> ranking;  // fine score desc, tie smaller id
  std::vector<std::vector<Candidate>> round1;            // per granularity, ascending exit
  std::vector<Candidate> verified;                       // post-dedup, at most k2
  std::size_t candidates_examined = 0;
  std::size_t upgrades_performed = 0;
  QueryStageTimings timings;
};

// One query embedding per requested exit, computed in a single traversal to
// the deepest exit; prefix reuse makes every shallower exit a free tap.
inline std::map<std::size_t, Vec> embed_query_multigranular(const EncoderStack& stack,
                                                            const std::string& modality,
                                                            const Vec& raw,
                                                            std::vector<std::size_t> exits) {
  if (exits.empty()) throw std::invalid_argument("query: no granularities requested");
  std::sort(exits.begin(), exits.end());
  exits.erase(std::unique(exits.begin(), exits.end()), exits.end());
  if (exits.front() < 1 || exits.back() > stack.cfg.num_layers)
    throw std::out_of_range("query: exit outside [1, L]");

  std::map<std::size_t, Vec> out;
  Vec h = embed_input(stack, modality, raw);
  std::size_t next = 0;
  for (std::size_t k = 1; k <= exits.back(); ++k) {
    h = forward_layer(stack, modality, k, h);
    if (k == exits[next]) {
      out[k] = apply_head(stack, h);
      ++next;
    }
  }
  return out;
}

// Round 1: per stored granularity, rank that granularity's records against
// the query embedding of the same depth. Fine records participate at full
// depth. Groups come back in ascending exit order.
inline std::vector<std::vector<Candidate>> speculative_filter(
    const Store& store, const std::map<std::size_t, Vec>& queries, std::size_t k1) {
  if (k1 < 1) throw std::invalid_argument("speculative_filter: k1 must be >= 1");
  std::map<std::size_t, std::vector<Candidate>> groups;
  for (const auto& [id, rec] : store.records()) {
    std::size_t e = rec.state == RecordState::fine ? store.num_layers() : rec.exit;
    auto q = queries.find(e);
    if (q == queries.end())
      throw std::invalid_argument("speculative_filter: missing query embedding for exit " +
                                  std::to_string(e));
    groups[e].push_back(Candidate{id, e, cosine(q->second, rec.embedding), 0});
  }
  std::vector<std::vector<Candidate>> out;
  for (auto& [e, cands] : groups) {
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.item_id < b.item_id;
    });
    if (cands.size() > k1) cands.resize(k1);
    for (std::size_t r = 0; r < cands.size(); ++r) cands[r].rank = r;
    out.push_back(std::move(cands));
  }
  return out;
}

// Round 2: merge the per-granularity lists by score. A duplicated id keeps
// its higher-scoring instance; the losing instance's group advances to its
// next candidate. Ties break toward the smaller id.
inline std::vector<Candidate> global_verify(const std::vector<std::vector<Candidate>>& groups,
                                            std::size_t k2) {
  if (k2 < 1) throw std::invalid_argument("global_verify: k2 must be >= 1");
  std::vector<std::size_t> cursor(groups.size(), 0);
  std::vector<Candidate> out;
  std::map<std::uint64_t, bool> taken;
  while (out.size() < k2) {
    std::size_t best_group = groups.size();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (cursor[g] >= groups[g].size()) continue;
      if (best_group == groups.size()) {
        best_group = g;
        continue;
      }
      const Candidate& a = groups[g][cursor[g]];
      const Candidate& b = groups[best_group][cursor[best_group]];
      if (a.score > b.score || (a.score == b.score && a.item_id < b.item_id)) best_group = g;
    }
    if (best_group == groups.size()) break;  // exhausted
    const Candidate& pick = groups[best_group][cursor[best_group]];
    ++cursor[best_group];
    if (taken.count(pick.item_id)) continue;  // duplicate: promote the group's next
    taken[pick.item_id] = true;
    out.push_back(pick);
  }
  return out;
}

// Round 3: refine each surviving coarse candidate by dequantize + resume
// through the remaining layers, upgrade it in the store, and rescore
// everything against the full-depth query embedding.
inline QueryResult fine_correct(const EncoderStack& stack, Store& store,
                                const std::vector<Candidate>& candidates,
                                const Vec& query_fine) {
  if (candidates.empty()) throw std::invalid_argument("fine_correct: no candidates");
  QueryResult result;
  const std::size_t L = stack.cfg.num_layers;
  for (const Candidate& cand : candidates) {
    auto got = store.get(cand.item_id);
    Vec fine;
    if (got.record.state == RecordState::fine) {
      fine = got.record.embedding;
    } else {
      Vec hidden = store.cached_hidden(cand.item_id);  // hard error when absent
      std::string modality(1, got.record.modality);
      hidden = forward_range(stack, modality, got.record.exit, L, std::move(hidden));
      fine = apply_head(stack, hidden);
      store.upgrade_to_fine(cand.item_id, fine);
      ++result.upgrades_performed;
    }
    result.ranking.emplace_back(cand.item_id, cosine(fine, query_fine));
  }
  std::stable_sort(result.ranking.begin(), result.ranking.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  return result;
}

// Full query: multigranular embedding, speculative filtering, global
// verification, fine correction.
inline QueryResult query(const EncoderStack& stack, Store& store, const Vec& raw,
                         const std::string& modality, std::size_t k1 = 10, std::size_t k2 = 10) {
  if (store.size() == 0) throw std::invalid_argument("query: store is empty");
  using clock = std::chrono::steady_clock;
  auto exits = store.list_exits();
  std::vector<std::size_t> wanted = exits;
  wanted.push_back(store.num_layers());  // final scoring needs the full-depth query

  auto t0 = clock::now();
  auto queries = embed_query_multigranular(stack, modality, raw, wanted);
  auto t1 = clock::now();
  auto round1 = speculative_filter(store, queries, k1);
  auto t2 = clock::now();
  auto verified = global_verify(round1, k2);
  auto t3 = clock::now();
  QueryResult result = fine_correct(stack, store, verified, queries.at(store.num_layers()));
  auto t4 = clock::now();

  result.round1 = std::move(round1);
  result.verified = std::move(verified);
  result.candidates_examined = 0;
  for (const auto& g : result.round1) result.candidates_examined += g.size();
  result.timings.embed_seconds = std::chrono::duration<double>(t1 - t0).count();
  result.timings.filter_seconds = std::chrono::duration<double>(t2 - t1).count();
  result.timings.verify_seconds = std::chrono::duration<double>(t3 - t2).count();
  result.timings.correct_seconds = std::chrono::duration<double>(t4 - t3).count();
  return result;
}

// Fraction of queries whose true match appears in the top k of its ranking.
inline double recall_at(const std::vector<QueryResult>& results,
                        const std::vector<std::uint64_t>& truth, std::size_t k) {
  if (k < 1) throw std::invalid_argument("recall_at: k must be >= 1");
  if (results.size() != truth.size())
    throw std::invalid_argument("recall_at: results/truth misaligned");
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& ranking = results[i].ranking;
    for (std::size_t r = 0; r < ranking.size() && r < k; ++r)
      if (ranking[r].first == truth[i]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

}  // namespace eemb
