#pragma once

// Pre-exit predictor: a two-matrix MLP over layer-N hidden states that
// scores the L exit classes before coarse embedding runs. GELU hidden
// activation: a bias-free network needs a nonlinearity with a nonzero even
// part to see feature magnitude at all (odd or piecewise-linear activations
// leave the argmax blind to radial structure).
//
// Training is full-batch softmax cross-entropy under plain gradient descent
// with seeded init: two runs with the same inputs produce identical weights.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/exit_oracle.hpp"
#include "eemb/io.hpp"
#include "eemb/numerics.hpp"

namespace eemb {

struct PredictorModel {
  std::size_t n_superficial = 0;  // N; serving predictions clamp to [N+1, L]
  std::size_t num_classes = 0;    // L
  Mat w1;                         // hidden x d_model
  Mat w2;                         // L x hidden

  std::size_t hidden() const { return w1.rows; }
  std::size_t feature_dim() const { return w1.cols; }

  bool operator==(const PredictorModel& o) const = default;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  float final_cross_entropy = 0.0f;
  float exit_accuracy = 0.0f;       // fraction exactly correct (training set)
  float tolerance_accuracy = 0.0f;  // fraction within +-1 layer
  float mean_predicted = 0.0f;
  float mean_actual = 0.0f;
};

struct PredictorTrainConfig {
  std::size_t hidden = 48;
  std::size_t epochs = 500;
  float learning_rate = 0.1f;
  std::uint64_t seed = 42;
};

// Hidden state after the first N layers; doubles as the layer-N resume
// point for the later coarse pass.
inline Vec superficial_embed(const EncoderStack& stack, const std::string& modality,
                             const Vec& raw, std::size_t n_superficial) {
  if (n_superficial < 1 || n_superficial >= stack.cfg.num_layers)
    throw std::out_of_range("superficial_embed: N must be in [1, L)");
  return forward_range(stack, modality, 0, n_superficial, embed_input(stack, modality, raw));
}

namespace detail {

// scores = w2 . gelu(w1 . x)
inline Vec predictor_scores(const PredictorModel& m, const Vec& feature) {
  Vec a = matvec(m.w1, feature);
  for (auto& v : a) v = gelu(v);
  return matvec(m.w2, a);
}

// argmax class (1-based); ties resolve toward the larger exit
inline std::size_t argmax_class(const Vec& scores) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c)
    if (scores[c] >= scores[best]) best = c;
  return best + 1;
}

}  // namespace detail

// Raw classifier prediction clamped to the serving range [N+1, L]: an exit
// at or before N is meaningless once N layers are already computed.
inline std::size_t predict_exit(const PredictorModel& m, const Vec& feature) {
  if (feature.size() != m.feature_dim())
    throw std::invalid_argument("predict_exit: feature dimension mismatch");
  std::size_t cls = detail::argmax_class(detail::predictor_scores(m, feature));
  std::size_t lo = m.n_superficial + 1;
  if (cls < lo) cls = lo;
  if (cls > m.num_classes) cls = m.num_classes;
  return cls;
}

// Unclamped argmax; the measurement used for predictor-quality reporting.
inline std::size_t predict_class(const PredictorModel& m, const Vec& feature) {
  return detail::argmax_class(detail::predictor_scores(m, feature));
}

inline std::pair<PredictorModel, TrainReport> train_predictor(
    const std::vector<Vec>& features, const std::vector<std::size_t>& labels,
    std::size_t num_classes, std::size_t n_superficial, const PredictorTrainConfig& cfg) {
  if (features.empty()) throw std::invalid_argument("train_predictor: empty training set");
  if (features.size() != labels.size())
    throw std::invalid_argument("train_predictor: features/labels misaligned");
  for (std::size_t l : labels)
    if (l < 1 || l > num_classes)
      throw std::invalid_argument("train_predictor: label outside [1, L]");

  const std::size_t dim = features[0].size();
  const std::size_t B = features.size();
  const std::size_t H = cfg.hidden;
  const std::size_t L = num_classes;

  PredictorModel m;
  m.n_superficial = n_superficial;
  m.num_classes = L;
  Rng rng(cfg.seed);
  m.w1 = Mat(H, dim);
  for (auto& v : m.w1.values) v = rng.uniform(-1.0f, 1.0f) / std::sqrt(static_cast<float>(dim));
  m.w2 = Mat(L, H);
  for (auto& v : m.w2.values) v = rng.uniform(-1.0f, 1.0f) / std::sqrt(static_cast<float>(H));

  std::vector<Vec> act(B, Vec(H));
  std::vector<Vec> probs(B, Vec(L));
  float final_ce = 0.0f;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Mat g1(H, dim);
    Mat g2(L, H);
    float ce = 0.0f;
    for (std::size_t s = 0; s < B; ++s) {
      const Vec& x = features[s];
      Vec z1 = matvec(m.w1, x);
      Vec& a1 = act[s];
      for (std::size_t i = 0; i < H; ++i) a1[i] = gelu(z1[i]);
      Vec scores = matvec(m.w2, a1);

      float mx = scores[0];
      for (float v : scores) mx = std::max(mx, v);
      float denom = 0.0f;
      for (std::size_t c = 0; c < L; ++c) {
        probs[s][c] = std::exp(scores[c] - mx);
        denom += probs[s][c];
      }
      for (std::size_t c = 0; c < L; ++c) probs[s][c] /= denom;
      ce += -std::log(std::max(probs[s][labels[s] - 1], 1e-12f));

      // backprop
      Vec dscore = probs[s];
      dscore[labels[s] - 1] -= 1.0f;
      const float inv_b = 1.0f / static_cast<float>(B);
      for (std::size_t c = 0; c < L; ++c) {
        float d = dscore[c] * inv_b;
        for (std::size_t h = 0; h < H; ++h) g2.at(c, h) += d * a1[h];
      }
      Vec da(H, 0.0f);
      for (std::size_t c = 0; c < L; ++c) {
        float d = dscore[c] * inv_b;
        for (std::size_t h = 0; h < H; ++h) da[h] += d * m.w2.at(c, h);
      }
      for (std::size_t h = 0; h < H; ++h) {
        float dz = da[h] * gelu_grad(z1[h]);
        for (std::size_t j = 0; j < dim; ++j) g1.at(h, j) += dz * x[j];
      }
    }
    for (std::size_t i = 0; i < m.w1.values.size(); ++i)
      m.w1.values[i] -= cfg.learning_rate * g1.values[i];
    for (std::size_t i = 0; i < m.w2.values.size(); ++i)
      m.w2.values[i] -= cfg.learning_rate * g2.values[i];
    final_ce = ce / static_cast<float>(B);
  }

  TrainReport report;
  report.epochs_run = cfg.epochs;
  report.final_cross_entropy = final_ce;
  double exact = 0, tol = 0, mean_pred = 0, mean_act = 0;
  for (std::size_t s = 0; s < B; ++s) {
    std::size_t pred = predict_class(m, features[s]);
    if (pred == labels[s]) exact += 1;
    if (pred + 1 >= labels[s] && pred <= labels[s] + 1) tol += 1;
    mean_pred += static_cast<double>(pred);
    mean_act += static_cast<double>(labels[s]);
  }
  report.exit_accuracy = static_cast<float>(exact / B);
  report.tolerance_accuracy = static_cast<float>(tol / B);
  report.mean_predicted = static_cast<float>(mean_pred / B);
  report.mean_actual = static_cast<float>(mean_act / B);
  return {m, report};
}

// Features and labels for one modality, aligned with ascending item id.
inline std::pair<std::vector<Vec>, std::vector<std::size_t>> predictor_dataset(
    const EncoderStack& stack, const Corpus& corpus, const std::vector<ExitLabel>& labels,
    const std::string& modality, std::size_t n_superficial) {
  std::map<std::uint64_t, const CorpusItem*> by_id;
  for (const auto& item : corpus.items) by_id[item.item_id] = &item;
  std::vector<Vec> feats;
  std::vector<std::size_t> ys;
  feats.reserve(labels.size());
  ys.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = by_id.find(l.item_id);
    if (it == by_id.end())
      throw std::invalid_argument("predictor_dataset: label id missing from corpus");
    feats.push_back(
        superficial_embed(stack, modality, raw_for_modality(*it->second, modality), n_superficial));
    ys.push_back(l.exit);
  }
  return {std::move(feats), std::move(ys)};
}

// Held-out accuracy of the raw class argmax per candidate N, under a seeded
// 80/20 split. The serving clamp is deliberately not applied: it would mask
// classifier quality wherever labels fall at or below N.
inline std::map<std::size_t, float> sweep_superficial_depth(
    const EncoderStack& stack, const Corpus& corpus, const std::vector<ExitLabel>& labels,
    const std::vector<std::size_t>& n_list, const PredictorTrainConfig& cfg) {
  if (n_list.empty()) throw std::invalid_argument("sweep_superficial_depth: empty N list");
  for (std::size_t n : n_list)
    if (n < 1 || n >= stack.cfg.num_layers)
      throw std::out_of_range("sweep_superficial_depth: N outside [1, L)");

  // one split for all N
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.seed, "sweep-split"));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.next_below(i)]);
  const std::size_t n_train = (order.size() * 4) / 5;
  if (n_train == 0 || n_train == order.size())
    throw std::invalid_argument("sweep_superficial_depth: split needs at least 5 samples");

  std::map<std::size_t, float> out;
  for (std::size_t N : n_list) {
    auto [feats, ys] = predictor_dataset(stack, corpus, labels, "A", N);
    std::vector<Vec> tr_x;
    std::vector<std::size_t> tr_y;
    for (std::size_t i = 0; i < n_train; ++i) {
      tr_x.push_back(feats[order[i]]);
      tr_y.push_back(ys[order[i]]);
    }
    auto [model, report] = train_predictor(tr_x, tr_y, stack.cfg.num_layers, N, cfg);
    (void)report;
    std::size_t hit = 0;
    for (std::size_t i = n_train; i < order.size(); ++i)
      if (predict_class(model, feats[order[i]]) == ys[order[i]]) ++hit;
    out[N] = static_cast<float>(hit) / static_cast<float>(order.size() - n_train);
  }
  return out;
}

// ---- checkpoint (magic "EMBP", same container family as the encoder) ----

inline constexpr std::uint32_t kPredictorVersion = 1;

inline void serialize_predictor(std::vector<std::uint8_t>& out, const PredictorModel& m) {
  out.push_back('E');
  out.push_back('M');
  out.push_back('B');
  out.push_back('P');
  io::put_u32(out, kPredictorVersion);
  io::put_u32(out, static_cast<std::uint32_t>(m.n_superficial));
  io::put_u32(out, static_cast<std::uint32_t>(m.num_classes));
  io::put_u32(out, static_cast<std::uint32_t>(m.w1.rows));
  io::put_u32(out, static_cast<std::uint32_t>(m.w1.cols));
  io::put_f32_span(out, m.w1.values.data(), m.w1.values.size());
  io::put_f32_span(out, m.w2.values.data(), m.w2.values.size());
  io::put_u32(out, io::crc32(out));
}

inline PredictorModel deserialize_predictor(io::Reader& r) {
  std::uint8_t magic[4];
  r.bytes(magic, 4);
  if (magic[0] != 'E' || magic[1] != 'M' || magic[2] != 'B' || magic[3] != 'P')
    throw std::runtime_error("predictor: bad magic");
  if (r.u32() != kPredictorVersion) throw std::runtime_error("predictor: unsupported version");
  PredictorModel m;
  m.n_superficial = r.u32();
  m.num_classes = r.u32();
  std::uint32_t h = r.u32();
  std::uint32_t dim = r.u32();
  m.w1 = Mat(h, dim);
  r.f32_span(m.w1.values.data(), m.w1.values.size());
  m.w2 = Mat(m.num_classes, h);
  r.f32_span(m.w2.values.data(), m.w2.values.size());
  return m;
}

inline void save_predictor(const std::string& path, const PredictorModel& m) {
  std::vector<std::uint8_t> buf;
  serialize_predictor(buf, m);
  io::write_file(path, buf);
}

inline PredictorModel load_predictor(const std::string& path) {
  auto buf = io::read_file(path);
  if (buf.size() < 4) throw std::runtime_error("predictor: file too small");
  std::uint32_t stored = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                         static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                         static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                         static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
  if (io::crc32(buf.data(), buf.size() - 4) != stored)
    throw std::runtime_error("predictor: checksum mismatch");
  io::Reader r(buf.data(), buf.size() - 4);
  return deserialize_predictor(r);
}

}  // namespace eemb
