#pragma once

// Progressive LoRA healing: one shared adapter suite tuned exit by exit so
// coarse embeddings approach the frozen fine-grained targets. A layer's
// adapter is trainable only inside the schedule window that contains it and
// frozen afterwards, which keeps every prefix reusable bitwise.
//
// Per-exit windows have size 1 up to the pivot (the lower median of the exit
// histogram), then double (2, 4, ...) capped by the remaining depth.

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/exit_oracle.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

struct StepSchedule {
  struct Step {
    std::size_t exit = 0;
    std::vector<std::size_t> window;  // layer indices tuned at this exit
  };
  std::size_t pivot = 0;
  std::vector<Step> steps;
};

inline StepSchedule make_schedule(const std::map<std::size_t, std::size_t>& histogram,
                                  std::size_t num_layers) {
  if (histogram.empty()) throw std::invalid_argument("make_schedule: empty histogram");
  std::size_t total = 0;
  for (const auto& [e, cnt] : histogram) {
    if (e < 1 || e > num_layers) throw std::invalid_argument("make_schedule: exit out of range");
    total += cnt;
  }
  if (total == 0) throw std::invalid_argument("make_schedule: histogram has no mass");

  // lower median: the element at 1-based rank ceil(total / 2)
  const std::size_t rank = (total + 1) / 2;
  std::size_t cum = 0;
  std::size_t pivot = histogram.rbegin()->first;
  for (const auto& [e, cnt] : histogram) {
    cum += cnt;
    if (cum >= rank) {
      pivot = e;
      break;
    }
  }

  StepSchedule sched;
  sched.pivot = pivot;
  std::size_t layer = 1;
  while (layer <= pivot && layer <= num_layers) {
    sched.steps.push_back({layer, {layer}});
    ++layer;
  }
  std::size_t size = 2;
  while (layer <= num_layers) {
    std::size_t take = std::min(size, num_layers - layer + 1);
    StepSchedule::Step step;
    step.exit = layer + take - 1;
    for (std::size_t k = 0; k < take; ++k) step.window.push_back(layer + k);
    sched.steps.push_back(std::move(step));
    layer += take;
    size *= 2;
  }
  return sched;
}

struct HealConfig {
  std::string modality = "A";
  float learning_rate = 0.01f;
  std::size_t epochs_per_exit = 50;
  std::size_t min_pool = 8;  // below this, the exit trains on all items
  float monotone_tolerance = 1e-4f;
};

struct HealStepReport {
  std::size_t exit = 0;
  std::vector<std::size_t> window;
  std::size_t pool_size = 0;
  bool pool_fallback = false;
  std::vector<float> loss_curve;  // mean (1 - cosine) per epoch, pre-update
};

struct ExitAlignment {
  std::size_t exit = 0;
  std::size_t n_items = 0;
  float pre_cosine = 0.0f;
  float post_cosine = 0.0f;
};

struct HealReport {
  bool no_op = false;
  std::string modality;
  std::vector<HealStepReport> steps;
  std::vector<ExitAlignment> alignment;  // populated exits only
};

namespace detail {

struct LayerCache {
  Vec x;  // block input
  Vec u;  // w_up . x
  Vec g;  // gelu(u)
  Vec t;  // lora_a . x
};

struct WindowGrads {
  std::vector<Mat> a;  // aligned with window order
  std::vector<Mat> b;
};

// Forward through layers 1..exit with caches, then head + cosine loss
// against the unit-norm target. Backward accumulates adapter gradients for
// the window layers into `grads` (scaled by `weight`). Returns the loss.
inline float heal_loss_grad_item(const EncoderStack& stack, const std::string& modality,
                                 const Vec& raw, const Vec& target_unit, std::size_t exit,
                                 const std::vector<std::size_t>& window, float weight,
                                 WindowGrads* grads) {
  const auto& tower = stack.towers[stack.tower_index(modality)];
  const float gain = stack.cfg.lora_alpha / static_cast<float>(stack.cfg.lora_rank);
  const std::size_t d = stack.cfg.d_model;

  std::vector<LayerCache> cache(exit);
  Vec h = embed_input(stack, modality, raw);
  for (std::size_t k = 1; k <= exit; ++k) {
    const LayerBlock& blk = tower.blocks[k - 1];
    LayerCache& c = cache[k - 1];
    c.x = h;
    c.u = matvec(blk.w_up, h);
    c.g = c.u;
    for (auto& v : c.g) v = gelu(v);
    Vec down = matvec(blk.w_down, c.g);
    c.t = matvec(blk.lora_a, h);
    Vec lb = matvec(blk.lora_b, c.t);
    for (std::size_t i = 0; i < d; ++i) h[i] = c.x[i] + down[i] + gain * lb[i];
  }

  Vec y = matvec(stack.head.proj, h);
  float n = norm2(y);
  if (n == 0.0f) return 1.0f;  // degenerate head output: flat loss, no gradient
  Vec yhat(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) yhat[i] = y[i] / n;
  float cos = dot(yhat, target_unit);
  float loss = 1.0f - cos;

  if (grads == nullptr) return loss;

  // d(1 - yhat.F)/dy = (-F + (F.yhat) yhat) / n
  Vec dy(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dy[i] = (-target_unit[i] + cos * yhat[i]) / n;
  Vec dh = matvec_transposed(stack.head.proj, dy);

  std::size_t lowest = window.empty() ? exit + 1 : window.front();
  for (std::size_t k = exit; k >= lowest && k >= 1; --k) {
    const LayerBlock& blk = tower.blocks[k - 1];
    const LayerCache& c = cache[k - 1];

    for (std::size_t w = 0; w < window.size(); ++w) {
      if (window[w] != k) continue;
      Mat& gb = grads->b[w];
      for (std::size_t i = 0; i < d; ++i) {
        float di = gain * dh[i] * weight;
        for (std::size_t r = 0; r < c.t.size(); ++r) gb.at(i, r) += di * c.t[r];
      }
      Vec bt = matvec_transposed(blk.lora_b, dh);
      Mat& ga = grads->a[w];
      for (std::size_t r = 0; r < bt.size(); ++r) {
        float dr = gain * bt[r] * weight;
        for (std::size_t j = 0; j < d; ++j) ga.at(r, j) += dr * c.x[j];
      }
    }
    if (k == lowest) break;  // adapter gradients below the window are not needed

    Vec dg = matvec_transposed(blk.w_down, dh);
    Vec du(dg.size());
    for (std::size_t i = 0; i < du.size(); ++i) du[i] = dg[i] * gelu_grad(c.u[i]);
    Vec dx = matvec_transposed(blk.w_up, du);
    Vec bt = matvec_transposed(blk.lora_b, dh);
    Vec at = matvec_transposed(blk.lora_a, bt);
    for (std::size_t i = 0; i < d; ++i) dx[i] += dh[i] + gain * at[i];
    dh = std::move(dx);
  }
  return loss;
}

}  // namespace detail

// Tunes only the adapter pairs named by the schedule, exit by exit, against
// frozen adapter-free fine-grained targets. Base weights and the head never
// change. Per-exit loss must be non-increasing epoch over epoch within the
// configured tolerance; a violation aborts with a diagnostic.
inline std::pair<EncoderStack, HealReport> heal(const EncoderStack& stack, const Corpus& corpus,
                                                const std::vector<ExitLabel>& labels,
                                                const StepSchedule& schedule,
                                                const HealConfig& cfg) {
  HealReport report;
  report.modality = cfg.modality;
  if (stack.cfg.lora_rank == 0) {
    report.no_op = true;
    return {stack, report};
  }
  if (labels.size() != corpus.items.size())
    throw std::invalid_argument("heal: labels/corpus misaligned");

  EncoderStack healed = stack;
  auto& tower = healed.towers[healed.tower_index(cfg.modality)];
  const std::size_t L = healed.cfg.num_layers;

  std::map<std::uint64_t, const CorpusItem*> by_id;
  for (const auto& item : corpus.items) by_id[item.item_id] = &item;
  std::map<std::uint64_t, std::size_t> label_of;
  for (const auto& l : labels) label_of[l.item_id] = l.exit;

  // frozen targets: the adapter-free full-depth embedding
  std::map<std::uint64_t, Vec> target;
  for (const auto& [id, item] : by_id)
    target[id] = coarse_embed(stack, cfg.modality, raw_for_modality(*item, cfg.modality), L, id,
                              /*lora_on=*/false)
                     .embedding;

  auto mean_alignment = [&](const EncoderStack& s, std::size_t exit,
                            const std::vector<std::uint64_t>& ids) {
    double sum = 0.0;
    for (auto id : ids)
      sum += cosine(
          coarse_embed(s, cfg.modality, raw_for_modality(*by_id.at(id), cfg.modality), exit)
              .embedding,
          target.at(id));
    return static_cast<float>(sum / static_cast<double>(ids.size()));
  };

  std::map<std::size_t, std::vector<std::uint64_t>> labeled;  // exit -> ids, ascending
  for (const auto& [id, e] : label_of) labeled[e].push_back(id);

  for (const auto& [e, ids] : labeled)
    report.alignment.push_back({e, ids.size(), mean_alignment(healed, e, ids), 0.0f});

  std::vector<std::uint64_t> all_ids;
  for (const auto& [id, item] : by_id) all_ids.push_back(id);

  for (const auto& step : schedule.steps) {
    HealStepReport srep;
    srep.exit = step.exit;
    srep.window = step.window;

    const std::vector<std::uint64_t>* pool = &all_ids;
    auto it = labeled.find(step.exit);
    if (it != labeled.end() && it->second.size() >= cfg.min_pool) {
      pool = &it->second;
    } else {
      srep.pool_fallback = true;
    }
    srep.pool_size = pool->size();

    for (std::size_t epoch = 0; epoch < cfg.epochs_per_exit; ++epoch) {
      detail::WindowGrads grads;
      for (std::size_t w = 0; w < step.window.size(); ++w) {
        grads.a.emplace_back(healed.cfg.lora_rank, healed.cfg.d_model);
        grads.b.emplace_back(healed.cfg.d_model, healed.cfg.lora_rank);
      }
      const float weight = 1.0f / static_cast<float>(pool->size());
      double loss_sum = 0.0;
      for (auto id : *pool)
        loss_sum += detail::heal_loss_grad_item(
            healed, cfg.modality, raw_for_modality(*by_id.at(id), cfg.modality), target.at(id),
            step.exit, step.window, weight, &grads);
      float loss = static_cast<float>(loss_sum / static_cast<double>(pool->size()));

      if (!srep.loss_curve.empty() &&
          loss > srep.loss_curve.back() + cfg.monotone_tolerance)
        throw std::runtime_error(
            "heal: loss increased beyond tolerance at exit " + std::to_string(step.exit) +
            " epoch " + std::to_string(epoch) + " (" + std::to_string(srep.loss_curve.back()) +
            " -> " + std::to_string(loss) + "); lower the learning rate");
      srep.loss_curve.push_back(loss);

      for (std::size_t w = 0; w < step.window.size(); ++w) {
        LayerBlock& blk = tower.blocks[step.window[w] - 1];
        for (std::size_t i = 0; i < blk.lora_a.values.size(); ++i)
          blk.lora_a.values[i] -= cfg.learning_rate * grads.a[w].values[i];
        for (std::size_t i = 0; i < blk.lora_b.values.size(); ++i)
          blk.lora_b.values[i] -= cfg.learning_rate * grads.b[w].values[i];
      }
    }
    report.steps.push_back(std::move(srep));
  }

  for (auto& al : report.alignment) al.post_cosine = mean_alignment(healed, al.exit, labeled[al.exit]);
  return {std::move(healed), std::move(report)};
}

struct PrefixReuseReport {
  bool ok = true;
  std::size_t inputs_checked = 0;
  std::string mismatch_modality;
  std::size_t mismatch_layer = 0;  // first layer whose exit-pass hidden diverged
};

// For seeded random inputs and every n < L: the layer-n hidden of an exit-n
// pass must be bitwise equal to the layer-n intermediate of a full pass.
inline PrefixReuseReport verify_prefix_reuse(const EncoderStack& stack, std::size_t n_inputs = 50,
                                             std::uint64_t seed = 42) {
  PrefixReuseReport rep;
  Rng rng(derive_seed(seed, "prefix-reuse"));
  const std::size_t L = stack.cfg.num_layers;
  for (std::size_t t = 0; t < n_inputs; ++t) {
    Vec raw(stack.cfg.input_dim);
    for (auto& v : raw) v = rng.uniform(-2.0f, 2.0f);
    for (const auto& tower : stack.towers) {
      std::vector<Vec> inter;
      Vec h = embed_input(stack, tower.tag, raw);
      for (std::size_t k = 1; k <= L; ++k) {
        h = forward_layer(stack, tower.tag, k, h);
        inter.push_back(h);
      }
      for (std::size_t n = 1; n < L; ++n) {
        Vec exit_hidden = forward_range(stack, tower.tag, 0, n, embed_input(stack, tower.tag, raw));
        if (!(exit_hidden == inter[n - 1])) {
          rep.ok = false;
          rep.mismatch_modality = tower.tag;
          rep.mismatch_layer = n;
          rep.inputs_checked = t + 1;
          return rep;
        }
      }
    }
    rep.inputs_checked = t + 1;
  }
  return rep;
}

// ---- CSV exports ----

inline void export_heal_report_csv(const std::string& path, const HealReport& report,
                                   const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("heal: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "exit,pre_cosine,post_cosine\n";
  for (const auto& al : report.alignment)
    out << al.exit << "," << al.pre_cosine << "," << al.post_cosine << "\n";
}

inline void export_heal_loss_csv(const std::string& path, const HealReport& report,
                                 const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("heal: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "exit,epoch,loss\n";
  for (const auto& step : report.steps)
    for (std::size_t ep = 0; ep < step.loss_curve.size(); ++ep)
      out << step.exit << "," << ep << "," << step.loss_curve[ep] << "\n";
}

}  // namespace eemb
