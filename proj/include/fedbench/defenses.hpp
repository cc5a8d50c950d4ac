#pragma once

// Server-side aggregation rules, the Multi-Krum detector, post-aggregation
// noise, and client-side local DP. Every rule works on UpdateView, which has
// no ground-truth field.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/params.hpp"
#include "fedbench/update.hpp"

namespace fedbench {

enum class AggregationRule { fedavg, median, trimmed_mean, krum, multi_krum, rfa, foolsgold, rlr, norm_clipping };
enum class DetectorKind { none, mkrum_detector };

struct DefenseConfig {
  AggregationRule rule = AggregationRule::fedavg;
  int trim_k = 1;
  int krum_f = 1;
  int krum_m = 1;
  double rfa_tol = 1e-6;
  int rfa_max_iter = 100;
  int rlr_threshold = 1;
  std::optional<double> norm_bound;  // nullopt: median warm-up update norm
  double weakdp_sigma = 0.0;
  double ldp_bound = 0.0;  // 0 disables client-side LDP
  double ldp_sigma = 0.0;
  DetectorKind detector = DetectorKind::none;
  std::optional<int> detector_f;  // nullopt: number of malicious updates in the round is known

  void validate() const {
    if (trim_k < 0) throw std::invalid_argument("defense.trim_k must be >= 0");
    if (krum_f < 0) throw std::invalid_argument("defense.krum_f must be >= 0");
    if (krum_m < 1) throw std::invalid_argument("defense.krum_m must be >= 1");
    if (!(rfa_tol > 0.0)) throw std::invalid_argument("defense.rfa_tol must be > 0");
    if (rfa_max_iter < 1) throw std::invalid_argument("defense.rfa_max_iter must be >= 1");
    if (rlr_threshold < 1) throw std::invalid_argument("defense.rlr_threshold must be >= 1");
    if (norm_bound && !(*norm_bound > 0.0)) throw std::invalid_argument("defense.norm_bound must be > 0");
    if (weakdp_sigma < 0.0) throw std::invalid_argument("defense.weakdp_sigma must be >= 0");
    if (weakdp_sigma > 0.0 && rule != AggregationRule::norm_clipping)
      throw std::invalid_argument("defense.weakdp_sigma requires rule norm_clipping");
    if (ldp_bound < 0.0 || ldp_sigma < 0.0) throw std::invalid_argument("defense.ldp_* must be >= 0");
    if (detector_f && *detector_f < 0) throw std::invalid_argument("defense.detector_f must be >= 0");
  }
  bool operator==(const DefenseConfig&) const = default;
};

struct AggregateResult {
  ParamVector delta;
  bool includes_server_lr = false;  // delta is already the applied step (RLR)
  std::vector<int> selected;        // Krum family
  std::vector<double> weights;      // FoolsGold
  bool converged = true;            // RFA
  int iterations = 0;               // RFA
  bool fallback = false;            // FoolsGold: all weights zero
};

namespace detail {

inline AggregateResult result_of(ParamVector delta, bool includes_server_lr = false) {
  AggregateResult r;
  r.delta = std::move(delta);
  r.includes_server_lr = includes_server_lr;
  return r;
}

inline void require_nonempty(std::span<const UpdateView> u, const char* who) {
  if (u.empty()) throw std::invalid_argument(std::string(who) + ": no updates");
  for (const auto& x : u) u.front().delta().check_same_size(x.delta());
}

/// Indices of `u` in ascending client_id order.
inline std::vector<std::size_t> id_order(std::span<const UpdateView> u) {
  std::vector<std::size_t> order(u.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return u[a].client_id() < u[b].client_id(); });
  return order;
}

inline std::vector<UpdateView> sorted_by_id(std::span<const UpdateView> u) {
  std::vector<UpdateView> out;
  for (auto i : id_order(u)) out.push_back(u[i]);
  return out;
}

}  // namespace detail

inline ParamVector mean_of(std::span<const UpdateView> updates) {
  detail::require_nonempty(updates, "mean");
  const auto order = detail::id_order(updates);
  ParamVector sum = ParamVector::zeros_like(updates[order.front()].delta());
  for (auto i : order) sum += updates[i].delta();
  const double k = static_cast<double>(updates.size());
  for (auto& v : sum.values()) v /= k;
  return sum;
}

/// Unweighted mean; declared sample counts are ignored.
inline AggregateResult agg_fedavg(std::span<const UpdateView> updates) {
  return detail::result_of(mean_of(updates));
}

inline AggregateResult agg_median(std::span<const UpdateView> updates) {
  detail::require_nonempty(updates, "agg_median");
  const auto u = detail::sorted_by_id(updates);
  const std::size_t n = u.size(), d = u.front().delta().size();
  ParamVector out = ParamVector::zeros_like(u.front().delta());
  std::vector<double> col(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = u[i].delta()[j];
    std::sort(col.begin(), col.end());
    out[j] = n % 2 == 1 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
  }
  return detail::result_of(std::move(out));
}

/// Per coordinate, drops the trim_k smallest and largest values (ties ranked
/// by client_id) and averages the rest, summing in client_id order.
inline AggregateResult agg_trimmed_mean(std::span<const UpdateView> updates, int trim_k) {
  detail::require_nonempty(updates, "agg_trimmed_mean");
  const std::size_t n = updates.size();
  if (trim_k < 0 || 2 * static_cast<std::size_t>(trim_k) >= n)
    throw std::invalid_argument("agg_trimmed_mean: need 2*trim_k < number of updates (trim_k=" +
                                std::to_string(trim_k) + ", n=" + std::to_string(n) + ")");
  const auto u = detail::sorted_by_id(updates);
  const std::size_t d = u.front().delta().size();
  const auto k = static_cast<std::size_t>(trim_k);
  ParamVector out = ParamVector::zeros_like(u.front().delta());
  std::vector<std::size_t> rank(n);
  std::vector<std::uint8_t> keep(n);
  for (std::size_t j = 0; j < d; ++j) {
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(),
                     [&](std::size_t a, std::size_t b) { return u[a].delta()[j] < u[b].delta()[j]; });
    std::fill(keep.begin(), keep.end(), 1);
    for (std::size_t r = 0; r < k; ++r) keep[rank[r]] = keep[rank[n - 1 - r]] = 0;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (keep[i]) s += u[i].delta()[j];
    out[j] = s / static_cast<double>(n - 2 * k);
  }
  return detail::result_of(std::move(out));
}

/// Krum scores: sum of squared distances to the `neighbors` closest other
/// updates. Returned in the order of `updates`.
inline std::vector<double> krum_scores(std::span<const UpdateView> updates, std::size_t neighbors) {
  const std::size_t n = updates.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist[i * n + j] = dist[j * n + i] = squared_distance(updates[i].delta().values(), updates[j].delta().values());
  std::vector<double> scores(n, 0.0);
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row.push_back(dist[i * n + j]);
    std::sort(row.begin(), row.end());
    const std::size_t take = std::min(neighbors, row.size());
    scores[i] = std::accumulate(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(take), 0.0);
  }
  return scores;
}

/// Krum (m = 1) / Multi-Krum (m > 1): mean of the m lowest-scoring updates.
inline AggregateResult agg_krum(std::span<const UpdateView> updates, int f, int m) {
  detail::require_nonempty(updates, "agg_krum");
  const auto u = detail::sorted_by_id(updates);
  const std::size_t n = u.size();
  if (f < 0 || n < static_cast<std::size_t>(f) + 3)
    throw std::invalid_argument("agg_krum: need n >= f + 3 (n=" + std::to_string(n) + ", f=" + std::to_string(f) + ")");
  if (m < 1 || static_cast<std::size_t>(m) > n) throw std::invalid_argument("agg_krum: need 1 <= m <= n");
  const auto scores = krum_scores(u, n - static_cast<std::size_t>(f) - 2);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  order.resize(static_cast<std::size_t>(m));
  std::sort(order.begin(), order.end());
  std::vector<UpdateView> chosen;
  AggregateResult out;
  for (auto i : order) {
    chosen.push_back(u[i]);
    out.selected.push_back(u[i].client_id());
  }
  out.delta = mean_of(chosen);
  return out;
}

inline constexpr double kRfaSmoothing = 1e-8;

/// Geometric median by smoothed Weiszfeld iteration, started at the mean.
inline AggregateResult agg_rfa(std::span<const UpdateView> updates, double tol = 1e-6, int max_iter = 100) {
  detail::require_nonempty(updates, "agg_rfa");
  const auto u = detail::sorted_by_id(updates);
  AggregateResult out;
  ParamVector z = mean_of(u);
  out.converged = false;
  for (int it = 1; it <= max_iter; ++it) {
    ParamVector num = ParamVector::zeros_like(z);
    double den = 0.0;
    for (const auto& x : u) {
      const double w = 1.0 / std::max(kRfaSmoothing, std::sqrt(squared_distance(z.values(), x.delta().values())));
      for (std::size_t j = 0; j < num.size(); ++j) num[j] += w * x.delta()[j];
      den += w;
    }
    for (auto& v : num.values()) v /= den;
    const double moved = std::sqrt(squared_distance(num.values(), z.values()));
    z = std::move(num);
    out.iterations = it;
    if (moved < tol) {
      out.converged = true;
      break;
    }
  }
  out.delta = std::move(z);
  return out;
}

inline double geometric_median_objective(std::span<const UpdateView> updates, std::span<const double> z) {
  double s = 0.0;
  for (const auto& u : updates) s += std::sqrt(squared_distance(u.delta().values(), z));
  return s;
}

/// Cosine similarities this close to 1 are rounding noise on parallel
/// histories and count as exactly 1.
inline constexpr double kFoolsGoldSameDirection = 1e-12;

/// FoolsGold weights from cumulative histories (kappa = 1).
inline std::vector<double> foolsgold_weights(std::span<const ParamVector* const> histories) {
  const std::size_t n = histories.size();
  if (n == 0) return {};
  std::vector<double> cs(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double c = cosine_sim(*histories[i], *histories[j]);
      if (c > 1.0 - kFoolsGoldSameDirection) c = 1.0;
      cs[i * n + j] = cs[j * n + i] = c;
    }
  // the zero diagonal takes part in every row maximum
  std::vector<double> maxcs(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) maxcs[i] = std::max(maxcs[i], cs[i * n + j]);
  // pardoning
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && maxcs[i] < maxcs[j]) cs[i * n + j] *= maxcs[i] / maxcs[j];
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, cs[i * n + j]);
    w[i] = std::clamp(1.0 - m, 0.0, 1.0);
  }
  const double wmax = *std::max_element(w.begin(), w.end());
  if (wmax == 0.0) return std::vector<double>(n, 0.0);
  for (auto& x : w) {
    x /= wmax;
    if (x == 1.0) x = 0.99;
    // logit with confidence 1, centred at 0.5
    x = x == 0.0 ? 0.0 : std::clamp(std::log(x / (1.0 - x)) + 0.5, 0.0, 1.0);
  }
  return w;
}

/// FoolsGold; `histories` are the cumulative delta sums for each update in
/// the same order as `updates`.
inline AggregateResult agg_foolsgold(std::span<const UpdateView> updates,
                                     std::span<const ParamVector* const> histories) {
  detail::require_nonempty(updates, "agg_foolsgold");
  if (histories.size() != updates.size()) throw std::invalid_argument("agg_foolsgold: history count mismatch");
  const auto order = detail::id_order(updates);
  std::vector<const ParamVector*> h;
  for (auto i : order) h.push_back(histories[i]);
  AggregateResult out;
  out.weights = foolsgold_weights(h);
  const double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
  if (total == 0.0) {
    out.delta = mean_of(updates);
    out.fallback = true;
    return out;
  }
  ParamVector acc = ParamVector::zeros_like(updates.front().delta());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& d = updates[order[r]].delta();
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += out.weights[r] * d[j];
  }
  for (auto& v : acc.values()) v /= total;
  out.delta = std::move(acc);
  return out;
}

/// Robust learning rate: per coordinate, +eta when |sum of signs| >= tau,
/// otherwise -eta, times the mean delta. The server rate is included.
inline AggregateResult agg_rlr(std::span<const UpdateView> updates, int tau, double eta) {
  detail::require_nonempty(updates, "agg_rlr");
  if (tau < 1) throw std::invalid_argument("agg_rlr: tau must be >= 1");
  AggregateResult out = detail::result_of(mean_of(updates), true);
  const std::size_t d = out.delta.size();
  for (std::size_t j = 0; j < d; ++j) {
    int s = 0;
    for (const auto& u : updates) {
      const double v = u.delta()[j];
      s += (v > 0.0) - (v < 0.0);
    }
    out.delta[j] *= (std::abs(s) >= tau ? eta : -eta);
  }
  return out;
}

inline ParamVector clip_to_norm(ParamVector v, double bound) {
  if (!(bound > 0.0)) throw std::invalid_argument("clip_to_norm: bound must be > 0");
  const double n = v.empty() ? 0.0 : l2_norm(v);
  if (n > bound) v *= bound / n;
  return v;
}

/// Every update scaled to norm <= B, then the unweighted mean.
inline AggregateResult agg_norm_clipping(std::span<const UpdateView> updates, double bound) {
  detail::require_nonempty(updates, "agg_norm_clipping");
  std::vector<ParamVector> clipped;
  std::vector<int> ids;
  for (auto i : detail::id_order(updates)) {
    clipped.push_back(clip_to_norm(updates[i].delta(), bound));
    ids.push_back(updates[i].client_id());
  }
  std::vector<UpdateView> views;
  for (std::size_t i = 0; i < clipped.size(); ++i) views.emplace_back(ids[i], clipped[i], 0, 0);
  return detail::result_of(mean_of(views));
}

/// Gaussian noise N(0, sigma^2) on every coordinate of the aggregated model.
inline ParamVector post_weakdp(ParamVector model, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("post_weakdp: sigma must be >= 0");
  if (sigma == 0.0) return model;
  for (auto& v : model.values()) v += sigma * rng.normal();
  return model;
}

/// Client-side clip to `bound` then Gaussian noise.
inline ClientUpdate client_ldp(ClientUpdate update, double bound, double sigma, Rng& rng) {
  update.delta = clip_to_norm(std::move(update.delta), bound);
  if (sigma > 0.0)
    for (auto& v : update.delta.values()) v += sigma * rng.normal();
  return update;
}

// ---------------------------------------------------------------------------
// Detection

struct DetectionReport {
  int round = 0;
  std::set<int> selected;  // clients whose updates reached the detector
  std::set<int> flagged;
  std::set<int> truth;     // filled by the engine, never by the detector
};

/// Multi-Krum as a detector: flags the f highest-scoring updates. Neighbor
/// count is n - f - 2, floored at 1.
inline DetectionReport detect_mkrum(std::span<const UpdateView> updates, int f, int round = 0) {
  const std::size_t n = updates.size();
  if (f < 0 || static_cast<std::size_t>(f) >= n)
    throw std::invalid_argument("detect_mkrum: need 0 <= f < n (f=" + std::to_string(f) + ", n=" + std::to_string(n) + ")");
  DetectionReport rep;
  rep.round = round;
  for (const auto& u : updates) rep.selected.insert(u.client_id());
  if (f == 0) return rep;
  const auto u = detail::sorted_by_id(updates);
  const std::size_t nb = n >= static_cast<std::size_t>(f) + 3 ? n - static_cast<std::size_t>(f) - 2 : 1;
  const auto scores = krum_scores(u, nb);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // highest score first; ties flag the higher client_id
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a > b);
  });
  for (std::size_t r = 0; r < static_cast<std::size_t>(f); ++r) rep.flagged.insert(u[order[r]].client_id());
  return rep;
}

/// Extension point for pre-aggregation detectors. Out-of-tree detectors
/// register a function with this signature under a config name.
using DetectorFn = std::function<DetectionReport(std::span<const UpdateView>, int round, int f)>;

inline std::map<std::string, DetectorFn>& detector_registry() {
  static std::map<std::string, DetectorFn> registry{
      {"mkrum_detector", [](std::span<const UpdateView> u, int round, int f) { return detect_mkrum(u, f, round); }},
  };
  return registry;
}

/// Dispatch a configured rule. `histories` is only read by FoolsGold.
inline AggregateResult aggregate(const DefenseConfig& cfg, std::span<const UpdateView> updates, double server_lr,
                                 double norm_bound, std::span<const ParamVector* const> histories = {}) {
  switch (cfg.rule) {
    case AggregationRule::fedavg: return agg_fedavg(updates);
    case AggregationRule::median: return agg_median(updates);
    case AggregationRule::trimmed_mean: return agg_trimmed_mean(updates, cfg.trim_k);
    case AggregationRule::krum: return agg_krum(updates, cfg.krum_f, 1);
    case AggregationRule::multi_krum: return agg_krum(updates, cfg.krum_f, cfg.krum_m);
    case AggregationRule::rfa: return agg_rfa(updates, cfg.rfa_tol, cfg.rfa_max_iter);
    case AggregationRule::foolsgold: return agg_foolsgold(updates, histories);
    case AggregationRule::rlr: return agg_rlr(updates, cfg.rlr_threshold, server_lr);
    case AggregationRule::norm_clipping: return agg_norm_clipping(updates, norm_bound);
  }
  throw std::logic_error("aggregate: unknown rule");
}

}  // namespace fedbench
