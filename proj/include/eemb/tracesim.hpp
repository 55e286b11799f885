#pragma once

// Trace-driven cost simulator. Replays a content-arrival trace against a
// per-layer device cost model under three embedding policies:
//
//   full_depth      every item runs all L layers, loaded layerwise per item
//   fixed_exit(e)   every item runs e layers, loaded layerwise per item
//   pre_exit(N)     arrivals are batched while the device is busy; each
//                   burst runs the superficial pass once per chunk, draws
//                   exits from the given distribution (clamped to the
//                   serving range [N+1, L]), groups by exit, and amortizes
//                   layer loads across each chunk
//
// Energy is count-based: one load energy per layer load event, one compute
// energy per item-layer, plus an idle floor over the horizon. Time follows
// the scheduler's two-role model when `pipelined` is set (fill latency plus
// max-dominated steady state), serial load+compute otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eemb/numerics.hpp"

namespace eemb {

struct TraceEvent {
  double timestamp = 0.0;  // seconds
  std::uint64_t item_id = 0;
  std::string modality = "A";

  bool operator==(const TraceEvent& o) const = default;
};

struct DeviceProfile {
  double layer_compute_seconds = 0.04;
  double layer_load_seconds = 0.27;
  double layer_compute_energy_j = 0.5;
  double layer_load_energy_j = 0.25;
  double battery_capacity_j = 20000.0;
  double idle_floor_watts = 0.0;

  void validate() const {
    if (layer_compute_seconds < 0 || layer_load_seconds < 0 || layer_compute_energy_j < 0 ||
        layer_load_energy_j < 0 || idle_floor_watts < 0)
      throw std::invalid_argument("profile: negative cost");
    if (battery_capacity_j <= 0) throw std::invalid_argument("profile: battery must be positive");
  }
};

enum class PolicyKind { full_depth, fixed_exit, pre_exit };

struct Policy {
  PolicyKind kind = PolicyKind::full_depth;
  std::size_t fixed_exit_layer = 0;  // fixed_exit only
  std::size_t n_superficial = 0;     // pre_exit only
  bool pipelined = false;            // load/compute overlap
  std::size_t max_batch = 32;        // pre_exit chunking

  static Policy full(std::size_t = 0) { return Policy{PolicyKind::full_depth, 0, 0, false, 32}; }
  static Policy fixed(std::size_t e) { return Policy{PolicyKind::fixed_exit, e, 0, false, 32}; }
  static Policy pre(std::size_t n, std::size_t max_batch = 32) {
    return Policy{PolicyKind::pre_exit, 0, n, true, max_batch};
  }

  std::string name() const {
    switch (kind) {
      case PolicyKind::full_depth: return "full-depth";
      case PolicyKind::fixed_exit: return "fixed-exit(" + std::to_string(fixed_exit_layer) + ")";
      case PolicyKind::pre_exit: return "pre-exit(N=" + std::to_string(n_superficial) + ")";
    }
    return "?";
  }
};

struct SimConfig {
  std::size_t num_layers = 12;
  double horizon_seconds = 0.0;  // 0: trace span plus slack to drain
  std::uint64_t seed = 42;
};

struct SimReport {
  std::string policy;
  std::size_t items_embedded = 0;
  std::size_t items_dropped = 0;
  double mean_backlog = 0.0;  // time-averaged queue length over the horizon
  double total_energy_j = 0.0;
  std::size_t battery_charges = 0;
  double throughput_items_per_s = 0.0;
  double busy_seconds = 0.0;
  double horizon_seconds = 0.0;

  bool operator==(const SimReport& o) const = default;
};

// ---- trace I/O: CSV timestamp,item_id,modality ----

inline std::vector<TraceEvent> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("trace: cannot open " + path);
  std::vector<TraceEvent> events;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // timestamp,item_id,modality
      continue;
    }
    std::istringstream ss(line);
    std::string ts, id, mod;
    if (!std::getline(ss, ts, ',') || !std::getline(ss, id, ',') || !std::getline(ss, mod))
      throw std::runtime_error("trace: malformed row at line " + std::to_string(line_no));
    TraceEvent ev;
    try {
      ev.timestamp = std::stod(ts);
      ev.item_id = std::stoull(id);
    } catch (const std::exception&) {
      throw std::runtime_error("trace: malformed row at line " + std::to_string(line_no));
    }
    ev.modality = mod;
    if (!events.empty() && ev.timestamp < events.back().timestamp)
      throw std::runtime_error("trace: non-monotone timestamp at line " + std::to_string(line_no));
    events.push_back(std::move(ev));
  }
  return events;
}

inline void save_trace(const std::string& path, const std::vector<TraceEvent>& events,
                       const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("trace: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "timestamp,item_id,modality\n";
  out.precision(17);
  for (const auto& ev : events)
    out << ev.timestamp << "," << ev.item_id << "," << ev.modality << "\n";
}

// ---- profile I/O: key=value lines ----

inline DeviceProfile load_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("profile: cannot open " + path);
  DeviceProfile p;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("profile: malformed line " + std::to_string(line_no));
    std::string key = line.substr(0, eq);
    double value = std::stod(line.substr(eq + 1));
    if (key == "layer_compute_seconds") p.layer_compute_seconds = value;
    else if (key == "layer_load_seconds") p.layer_load_seconds = value;
    else if (key == "layer_compute_energy_j") p.layer_compute_energy_j = value;
    else if (key == "layer_load_energy_j") p.layer_load_energy_j = value;
    else if (key == "battery_capacity_j") p.battery_capacity_j = value;
    else if (key == "idle_floor_watts") p.idle_floor_watts = value;
    else throw std::runtime_error("profile: unknown key '" + key + "'");
  }
  p.validate();
  return p;
}

inline void save_profile(const std::string& path, const DeviceProfile& p,
                         const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("profile: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out.precision(17);
  out << "layer_compute_seconds=" << p.layer_compute_seconds << "\n"
      << "layer_load_seconds=" << p.layer_load_seconds << "\n"
      << "layer_compute_energy_j=" << p.layer_compute_energy_j << "\n"
      << "layer_load_energy_j=" << p.layer_load_energy_j << "\n"
      << "battery_capacity_j=" << p.battery_capacity_j << "\n"
      << "idle_floor_watts=" << p.idle_floor_watts << "\n";
}

namespace detail {

// Two-role pipeline makespan for `steps` layer steps where every load takes
// `load_s` and every step's compute takes `compute_s`.
inline double pass_seconds(std::size_t steps, double load_s, double compute_s, bool pipelined) {
  if (steps == 0) return 0.0;
  if (!pipelined) return static_cast<double>(steps) * (load_s + compute_s);
  return load_s + static_cast<double>(steps - 1) * std::max(load_s, compute_s) + compute_s;
}

struct BurstCost {
  double seconds = 0.0;
  double energy_j = 0.0;
};

// Deterministic exit draw from a histogram, clamped to the serving range.
class ExitSampler {
 public:
  ExitSampler(const std::map<std::size_t, std::size_t>& histogram, std::uint64_t seed)
      : rng_(seed) {
    for (const auto& [e, cnt] : histogram) {
      total_ += cnt;
      cumulative_.emplace_back(total_, e);
    }
    if (total_ == 0) throw std::invalid_argument("simulate: empty exit distribution");
  }
  std::size_t draw(std::size_t lo, std::size_t hi) {
    std::uint64_t t = rng_.next_below(total_);
    std::size_t e = cumulative_.back().second;
    for (const auto& [cum, exit] : cumulative_)
      if (t < cum) {
        e = exit;
        break;
      }
    return std::min(hi, std::max(lo, e));
  }

 private:
  Rng rng_;
  std::uint64_t total_ = 0;
  std::vector<std::pair<std::uint64_t, std::size_t>> cumulative_;
};

// Cost of one pre-exit burst of `n` items: chunked superficial pass, exit
// draw, exit-grouped chunked resume. Loads are charged once per layer per
// chunk pass; computes once per item-layer.
inline BurstCost pre_exit_burst(std::size_t n, std::size_t N, std::size_t L,
                                std::size_t max_batch, const DeviceProfile& prof, bool pipelined,
                                ExitSampler& sampler) {
  BurstCost cost;
  auto run_pass = [&](std::size_t steps, std::size_t items) {
    if (steps == 0 || items == 0) return;
    cost.seconds += pass_seconds(steps, prof.layer_load_seconds,
                                 prof.layer_compute_seconds * static_cast<double>(items),
                                 pipelined);
    cost.energy_j += static_cast<double>(steps) * prof.layer_load_energy_j +
                     static_cast<double>(steps) * static_cast<double>(items) *
                         prof.layer_compute_energy_j;
  };

  // superficial pass, chunked
  std::size_t remaining = n;
  while (remaining > 0) {
    std::size_t chunk = std::min(remaining, max_batch);
    run_pass(N, chunk);
    remaining -= chunk;
  }
  // draw exits and group
  std::map<std::size_t, std::size_t> group_sizes;
  for (std::size_t i = 0; i < n; ++i) ++group_sizes[sampler.draw(N + 1, L)];
  for (const auto& [e, cnt] : group_sizes) {
    std::size_t left = cnt;
    while (left > 0) {
      std::size_t chunk = std::min(left, max_batch);
      run_pass(e - N, chunk);
      left -= chunk;
    }
  }
  return cost;
}

}  // namespace detail

inline SimReport simulate(const Policy& policy, const std::vector<TraceEvent>& trace,
                          const DeviceProfile& profile,
                          const std::map<std::size_t, std::size_t>& exit_distribution,
                          const SimConfig& cfg) {
  profile.validate();
  const std::size_t L = cfg.num_layers;
  if (policy.kind == PolicyKind::fixed_exit &&
      (policy.fixed_exit_layer < 1 || policy.fixed_exit_layer > L))
    throw std::invalid_argument("simulate: fixed exit outside [1, L]");
  if (policy.kind == PolicyKind::pre_exit &&
      (policy.n_superficial < 1 || policy.n_superficial >= L))
    throw std::invalid_argument("simulate: N outside [1, L)");
  for (std::size_t i = 1; i < trace.size(); ++i)
    if (trace[i].timestamp < trace[i - 1].timestamp)
      throw std::invalid_argument("simulate: trace not sorted");

  SimReport rep;
  rep.policy = policy.name();
  double span = trace.empty() ? 0.0 : trace.back().timestamp;
  rep.horizon_seconds = cfg.horizon_seconds > 0.0 ? cfg.horizon_seconds : span + 1e9;
  if (rep.horizon_seconds < span)
    throw std::invalid_argument("simulate: horizon shorter than the trace span");
  if (trace.empty()) {
    rep.total_energy_j = profile.idle_floor_watts * rep.horizon_seconds;
    rep.battery_charges = static_cast<std::size_t>(
        std::ceil(rep.total_energy_j / profile.battery_capacity_j));
    if (rep.total_energy_j == 0.0) rep.battery_charges = 0;
    return rep;
  }

  detail::ExitSampler sampler(exit_distribution, derive_seed(cfg.seed, "tracesim"));

  // FIFO device: the next unit starts at max(arrival, device-free) and a
  // pre-exit unit absorbs every arrival up to its start time as one burst.
  const bool batched = policy.kind == PolicyKind::pre_exit;
  std::vector<std::pair<double, double>> queue_deltas;  // (time, +-count)
  for (const auto& ev : trace) queue_deltas.emplace_back(ev.timestamp, 1.0);

  double free_at = 0.0;
  double last_finish = 0.0;
  std::size_t embedded = 0;
  double energy = 0.0;
  double busy = 0.0;
  std::size_t i = 0;
  while (i < trace.size()) {
    double start = std::max(trace[i].timestamp, free_at);
    std::size_t j = i + 1;
    if (batched)
      while (j < trace.size() && trace[j].timestamp <= start) ++j;
    std::size_t burst = j - i;

    detail::BurstCost cost;
    if (policy.kind == PolicyKind::pre_exit) {
      cost = detail::pre_exit_burst(burst, policy.n_superficial, L, policy.max_batch, profile,
                                    policy.pipelined, sampler);
    } else {
      std::size_t depth = policy.kind == PolicyKind::full_depth ? L : policy.fixed_exit_layer;
      cost.seconds = detail::pass_seconds(depth, profile.layer_load_seconds,
                                          profile.layer_compute_seconds, policy.pipelined);
      cost.energy_j = static_cast<double>(depth) *
                      (profile.layer_load_energy_j + profile.layer_compute_energy_j);
    }
    double finish = start + cost.seconds;
    if (finish > rep.horizon_seconds) break;  // this unit cannot complete: drop the rest
    queue_deltas.emplace_back(finish, -static_cast<double>(burst));
    free_at = finish;
    last_finish = finish;
    busy += cost.seconds;
    energy += cost.energy_j;
    embedded += burst;
    i = j;
  }

  // time-averaged backlog over [0, horizon]
  std::stable_sort(queue_deltas.begin(), queue_deltas.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  double area = 0.0, level = 0.0, prev_t = 0.0;
  for (const auto& [t, d] : queue_deltas) {
    if (t > rep.horizon_seconds) break;
    area += level * (t - prev_t);
    prev_t = t;
    level += d;
  }
  area += level * (rep.horizon_seconds - prev_t);

  rep.items_embedded = embedded;
  rep.items_dropped = trace.size() - embedded;
  rep.mean_backlog = area / rep.horizon_seconds;
  rep.total_energy_j = energy + profile.idle_floor_watts * rep.horizon_seconds;
  rep.battery_charges =
      rep.total_energy_j == 0.0
          ? 0
          : static_cast<std::size_t>(std::ceil(rep.total_energy_j / profile.battery_capacity_j));
  rep.busy_seconds = busy;
  double makespan = last_finish > trace.front().timestamp ? last_finish - trace.front().timestamp
                                                          : 0.0;
  rep.throughput_items_per_s = (embedded > 0 && makespan > 0.0)
                                   ? static_cast<double>(embedded) / makespan
                                   : 0.0;
  return rep;
}

// The integer exit a "run everything at the average depth" baseline needs:
// the smallest uniform depth not below the distribution mean.
inline std::size_t ceil_mean_exit(const std::map<std::size_t, std::size_t>& histogram) {
  std::uint64_t total = 0;
  double sum = 0.0;
  for (const auto& [e, cnt] : histogram) {
    total += cnt;
    sum += static_cast<double>(e) * static_cast<double>(cnt);
  }
  if (total == 0) throw std::invalid_argument("ceil_mean_exit: empty histogram");
  return static_cast<std::size_t>(std::ceil(sum / static_cast<double>(total) - 1e-12));
}

struct CompareRow {
  SimReport report;
  double energy_ratio_vs_first = 1.0;
  double throughput_ratio_vs_first = 1.0;
};

inline std::vector<CompareRow> compare(const std::vector<Policy>& policies,
                                       const std::vector<TraceEvent>& trace,
                                       const DeviceProfile& profile,
                                       const std::map<std::size_t, std::size_t>& exit_distribution,
                                       const SimConfig& cfg) {
  if (policies.size() < 2) throw std::invalid_argument("compare: need at least two policies");
  std::vector<CompareRow> rows;
  for (const auto& p : policies) {
    CompareRow row;
    row.report = simulate(p, trace, profile, exit_distribution, cfg);
    rows.push_back(std::move(row));
  }
  const SimReport& base = rows.front().report;
  for (auto& row : rows) {
    if (base.total_energy_j > 0.0)
      row.energy_ratio_vs_first = row.report.total_energy_j / base.total_energy_j;
    if (base.throughput_items_per_s > 0.0)
      row.throughput_ratio_vs_first =
          row.report.throughput_items_per_s / base.throughput_items_per_s;
  }
  return rows;
}

// Seeded synthetic arrival trace (Poisson-ish bursty arrivals).
inline std::vector<TraceEvent> synthesize_trace(std::size_t n, double mean_gap_seconds,
                                                std::uint64_t seed,
                                                const std::string& modality = "A") {
  Rng rng(derive_seed(seed, "trace"));
  std::vector<TraceEvent> events;
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double u = std::max(1e-7f, rng.next_unit());
    t += -mean_gap_seconds * std::log(u);
    events.push_back(TraceEvent{t, i, modality});
  }
  return events;
}

}  // namespace eemb
