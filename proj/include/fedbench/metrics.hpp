#pragma once

// Attack and detection metrics computed from per-round series.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/defenses.hpp"

namespace fedbench {

enum class LifespanMode { consecutive, count };
enum class HAsrScope { all_rounds, attack_window };

struct MetricsConfig {
  int t = 30;
  double lifespan_threshold = 0.5;
  LifespanMode lifespan_mode = LifespanMode::consecutive;
  HAsrScope h_asr_scope = HAsrScope::all_rounds;

  void validate() const {
    if (t < 1) throw std::invalid_argument("metrics.t must be >= 1");
    if (!(lifespan_threshold >= 0.0 && lifespan_threshold <= 1.0))
      throw std::invalid_argument("metrics.lifespan_threshold must be in [0,1]");
  }
  bool operator==(const MetricsConfig&) const = default;
};

/// Mean of the last t values of the attack window. `attack_window` holds
/// the window's ASR values in round order.
inline double asr_t(std::span<const double> attack_window, int t) {
  if (t < 1) throw std::invalid_argument("asr_t: t must be >= 1");
  if (attack_window.size() < static_cast<std::size_t>(t))
    throw std::invalid_argument("asr_t: attack window has " + std::to_string(attack_window.size()) +
                                " rounds, fewer than t=" + std::to_string(t));
  // Neumaier summation keeps means of constant series exact
  double sum = 0.0, comp = 0.0;
  for (double v : attack_window.last(static_cast<std::size_t>(t))) {
    const double next = sum + v;
    comp += std::abs(sum) >= std::abs(v) ? (sum - next) + v : (v - next) + sum;
    sum = next;
  }
  return (sum + comp) / static_cast<double>(t);
}

/// Overload on a full series: the window ends at index attack_end (exclusive).
inline double asr_t(std::span<const double> series, std::size_t attack_begin, std::size_t attack_end, int t) {
  if (attack_end > series.size() || attack_begin > attack_end) throw std::invalid_argument("asr_t: bad window");
  return asr_t(series.subspan(attack_begin, attack_end - attack_begin), t);
}

inline double h_asr(std::span<const double> series) {
  if (series.empty()) throw std::invalid_argument("h_asr: empty series");
  return *std::max_element(series.begin(), series.end());
}

/// Post-attack rounds with ASR >= threshold: the leading consecutive run, or
/// (count mode) all of them.
inline int lifespan(std::span<const double> post_attack, double threshold,
                    LifespanMode mode = LifespanMode::consecutive) {
  int n = 0;
  for (double v : post_attack) {
    if (v >= threshold) {
      ++n;
    } else if (mode == LifespanMode::consecutive) {
      break;
    }
  }
  return n;
}

struct DetectionMetrics {
  std::optional<double> precision;  // nullopt: nothing flagged in attack rounds
  std::optional<double> recall;     // nullopt: no attack rounds
  std::optional<double> fpr;        // nullopt: no clean rounds
};

/// Pooled over rounds: precision/recall over rounds with >= 1 true malicious,
/// FPR over rounds with none.
inline DetectionMetrics detection_metrics(std::span<const DetectionReport> reports) {
  std::size_t tp = 0, flagged_attack = 0, truth_total = 0;
  std::size_t clean_flagged = 0, clean_selected = 0;
  bool any_attack = false, any_clean = false;
  for (const auto& r : reports) {
    if (!r.truth.empty()) {
      any_attack = true;
      truth_total += r.truth.size();
      flagged_attack += r.flagged.size();
      for (int id : r.flagged) tp += r.truth.count(id);
    } else {
      any_clean = true;
      clean_selected += r.selected.size();
      clean_flagged += r.flagged.size();
    }
  }
  DetectionMetrics m;
  if (any_attack && flagged_attack > 0) m.precision = static_cast<double>(tp) / static_cast<double>(flagged_attack);
  if (any_attack && truth_total > 0) m.recall = static_cast<double>(tp) / static_cast<double>(truth_total);
  if (any_clean && clean_selected > 0)
    m.fpr = static_cast<double>(clean_flagged) / static_cast<double>(clean_selected);
  return m;
}

struct MetricSummary {
  std::optional<double> asr_t;
  std::optional<double> h_asr;
  std::optional<int> lifespan;
  std::optional<double> acc_final;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> fpr;
  int t = 30;
  double lifespan_threshold = 0.5;

  bool operator==(const MetricSummary&) const = default;
};

}  // namespace fedbench
