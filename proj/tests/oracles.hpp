#pragma once

// Test-only reference implementations. Straight-line double-precision
// recomputations, deliberately sharing no forward-path code with the library.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "eemb/encoder.hpp"

namespace oracle {

using dvec = std::vector<double>;

inline dvec to_d(const eemb::Vec& x) { return dvec(x.begin(), x.end()); }

inline dvec matvec_d(const eemb::Mat& m, const dvec& x) {
  dvec y(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) y[i] += static_cast<double>(m.at(i, j)) * x[j];
  return y;
}

inline double gelu_d(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// embed + blocks 1..exit_layer, no head
inline dvec hidden_d(const eemb::EncoderStack& s, const std::string& modality,
                     const eemb::Vec& raw, std::size_t exit_layer, bool lora_on = true) {
  const auto& tower = s.towers[s.tower_index(modality)];
  dvec h = matvec_d(tower.embed, to_d(raw));
  for (std::size_t l = 0; l < exit_layer; ++l) {
    const auto& b = tower.blocks[l];
    dvec u = matvec_d(b.w_up, h);
    for (auto& v : u) v = gelu_d(v);
    dvec d = matvec_d(b.w_down, u);
    dvec out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] + d[i];
    if (lora_on && s.cfg.lora_rank > 0) {
      dvec t = matvec_d(b.lora_a, h);
      dvec lb = matvec_d(b.lora_b, t);
      double gain = static_cast<double>(s.cfg.lora_alpha) / static_cast<double>(s.cfg.lora_rank);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += gain * lb[i];
    }
    h = out;
  }
  return h;
}

inline dvec head_d(const eemb::EncoderStack& s, const dvec& h) {
  dvec e = matvec_d(s.head.proj, h);
  double n = 0.0;
  for (double v : e) n += v * v;
  n = std::sqrt(n);
  if (n == 0.0) return e;
  for (auto& v : e) v /= n;
  return e;
}

inline dvec embed_d(const eemb::EncoderStack& s, const std::string& modality,
                    const eemb::Vec& raw, std::size_t exit_layer, bool lora_on = true) {
  return head_d(s, hidden_d(s, modality, raw, exit_layer, lora_on));
}

inline double cosine_d(const dvec& a, const dvec& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// healing loss in double: 1 - cosine(head(hidden_e), target), adapters on
inline double heal_loss_d(const eemb::EncoderStack& s, const std::string& modality,
                          const eemb::Vec& raw, const dvec& target_unit, std::size_t exit) {
  dvec h = hidden_d(s, modality, raw, exit, true);
  dvec y = matvec_d(s.head.proj, h);
  double n = 0.0;
  for (double v : y) n += v * v;
  n = std::sqrt(n);
  if (n == 0.0) return 1.0;
  double cos = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) cos += (y[i] / n) * target_unit[i];
  return 1.0 - cos;
}

// max_i |f_i - d_i| / (1 + |d_i|)
inline double max_rel_diff(const eemb::Vec& f, const dvec& d) {
  double worst = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    double e = std::fabs(static_cast<double>(f[i]) - d[i]) / (1.0 + std::fabs(d[i]));
    if (e > worst) worst = e;
  }
  return worst;
}

}  // namespace oracle
