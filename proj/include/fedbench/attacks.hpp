#pragma once

// Malicious client behaviour: poisoned local training, update scaling,
// constrain-and-scale, dormant-coordinate masking, trigger optimization and
// the per-round context that lets attackers share one trigger.

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fedbench/model.hpp"
#include "fedbench/trigger.hpp"

namespace fedbench {

enum class AttackKind { fixed_pattern, distributed_pattern, edge_case, optimized_pattern };
enum class ModelPoison { none, model_replacement, constrain_and_scale, neurotoxin_mask };

struct AttackConfig {
  AttackKind attack_kind = AttackKind::fixed_pattern;
  ModelPoison model_poison = ModelPoison::none;
  std::size_t poison_count_per_batch = 20;
  std::optional<double> scale_factor;  // nullopt: clients_per_round / server_lr
  double alpha_blend = 0.7;
  double mask_ratio = 0.9;
  int trigger_opt_steps = 10;
  double trigger_opt_lr = 0.1;
  std::size_t trigger_opt_pool = 256;  // max samples used per optimization
  int reoptimize_every = 1;            // attack rounds between trigger re-optimizations

  void validate() const {
    if (!(alpha_blend >= 0.0 && alpha_blend <= 1.0)) throw std::invalid_argument("attack.alpha_blend must be in [0,1]");
    if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("attack.mask_ratio must be in (0,1]");
    if (scale_factor && !(*scale_factor > 0.0)) throw std::invalid_argument("attack.scale_factor must be > 0");
    if (trigger_opt_steps < 0) throw std::invalid_argument("attack.trigger_opt_steps must be >= 0");
    if (reoptimize_every < 1) throw std::invalid_argument("attack.reoptimize_every must be >= 1");
  }
  bool operator==(const AttackConfig&) const = default;
};

inline ParamVector scale_update(ParamVector delta, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("scale_update: gamma must be > 0");
  delta *= gamma;
  return delta;
}

/// Replacement factor under theta' = theta + eta * mean(delta).
inline double replacement_gamma(std::size_t clients_per_round, double server_lr) {
  return static_cast<double>(clients_per_round) / server_lr;
}

struct PenaltyTerm {
  double loss = 0.0;  // (1 - alpha) * ||local - global||^2
  ParamVector grad;   // 2 (1 - alpha) (local - global)
};

/// Anomaly-evasion term of constrain-and-scale. The full objective is
/// alpha * task_loss + penalty.loss.
inline PenaltyTerm constrain_and_scale_penalty(const ParamVector& local, const ParamVector& global,
                                               double alpha_blend) {
  if (!(alpha_blend >= 0.0 && alpha_blend <= 1.0))
    throw std::invalid_argument("constrain_and_scale_penalty: alpha must be in [0,1]");
  local.check_same_size(global);
  const double w = 1.0 - alpha_blend;
  PenaltyTerm out{0.0, ParamVector::zeros_like(local)};
  for (std::size_t i = 0; i < local.size(); ++i) {
    const double d = local[i] - global[i];
    out.loss += w * d * d;
    out.grad[i] = 2.0 * w * d;
  }
  return out;
}

struct CoordinateMask {
  std::vector<std::uint8_t> keep;  // 1 = coordinate may move
  bool unconstrained = false;      // no previous delta; every coordinate kept

  std::size_t count() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }
};

/// Keeps the floor(ratio * d) coordinates with the smallest |prev delta|
/// (ties: lower index).
inline CoordinateMask neurotoxin_mask(const ParamVector* prev_global_delta, std::size_t dim, double mask_ratio) {
  if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("neurotoxin_mask: ratio must be in (0,1]");
  CoordinateMask m;
  if (prev_global_delta == nullptr || prev_global_delta->empty()) {
    m.keep.assign(dim, 1);
    m.unconstrained = true;
    return m;
  }
  if (prev_global_delta->size() != dim) throw std::invalid_argument("neurotoxin_mask: dimension mismatch");
  const auto k = static_cast<std::size_t>(std::floor(mask_ratio * static_cast<double>(dim)));
  std::vector<std::size_t> order(dim);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& p = *prev_global_delta;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(p[a]) < std::abs(p[b]); });
  m.keep.assign(dim, 0);
  for (std::size_t i = 0; i < k; ++i) m.keep[order[i]] = 1;
  return m;
}

// ---------------------------------------------------------------------------
// Trigger optimization

struct TriggerOptResult {
  TriggerSpec trigger;
  std::vector<double> loss_trace;  // loss before step 0, then after every step
};

namespace detail {

inline double poisoned_pool_loss(const ParamVector& params, const ModelSpec& spec, const Dataset& pool,
                                 const TriggerSpec& t, std::vector<double>* pixel_grad) {
  const ImageShape shape = pool.image_shape.value_or(ImageShape{1, pool.num_features, 1});
  std::vector<int> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  RawBatch raw = RawBatch::gather(pool, idx);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    apply_trigger_inplace(raw.sample(i), shape, t);
    raw.labels[i] = t.target_class;
  }
  const ModelBatch mb = spec.normalizer(raw);
  Network net(spec, params.values());
  net.forward(mb);
  std::vector<double> param_grad(params.size());
  std::vector<double> input_grad;
  const double loss = net.backward(mb.labels, param_grad, pixel_grad ? &input_grad : nullptr);
  if (pixel_grad) {
    pixel_grad->assign(t.pixels.size(), 0.0);
    for (std::size_t k = 0; k < t.pixels.size(); ++k) {
      const auto& px = t.pixels[k];
      const std::size_t col = shape.index(px.row, px.col, px.channel);
      double g = 0.0;
      for (std::size_t s = 0; s < mb.size(); ++s) g += input_grad[s * mb.num_features + col];
      (*pixel_grad)[k] = g / spec.normalizer.stddev;
    }
  }
  return loss;
}

}  // namespace detail

/// Projected gradient descent on the patch values against the frozen model.
/// A step that raises the loss is retried with a halved rate (at most 10
/// times) and otherwise skipped, so the loss trace never increases.
inline TriggerOptResult optimize_trigger(const ParamVector& global, const ModelSpec& spec, const Dataset& pool,
                                         const TriggerSpec& trigger, int steps, double lr) {
  if (pool.empty()) throw std::invalid_argument("optimize_trigger: empty sample pool");
  if (trigger.kind != TriggerKind::optimized_pattern)
    throw std::invalid_argument("optimize_trigger: trigger must be an optimized pattern");
  TriggerOptResult out{trigger, {}};
  for (auto& p : out.trigger.pixels) p.value = std::clamp(p.value, 0.0, 1.0);
  std::vector<double> g;
  double loss = detail::poisoned_pool_loss(global, spec, pool, out.trigger, &g);
  out.loss_trace.push_back(loss);
  for (int step = 0; step < steps; ++step) {
    double rate = lr;
    bool moved = false;
    for (int halving = 0; halving <= 10 && !moved; ++halving, rate *= 0.5) {
      TriggerSpec cand = out.trigger;
      for (std::size_t k = 0; k < cand.pixels.size(); ++k)
        cand.pixels[k].value = std::clamp(cand.pixels[k].value - rate * g[k], 0.0, 1.0);
      std::vector<double> cand_g;
      const double cand_loss = detail::poisoned_pool_loss(global, spec, pool, cand, &cand_g);
      if (cand_loss <= loss) {
        out.trigger = std::move(cand);
        loss = cand_loss;
        g = std::move(cand_g);
        moved = true;
      }
    }
    out.loss_trace.push_back(loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared attacker state

class AttackContextError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-round trigger shared by colluding clients. All access is serialized;
/// publish happens-before every fetch that observes it.
class AttackContext {
 public:
  explicit AttackContext(TriggerSpec static_trigger) : static_(std::move(static_trigger)) {}

  void begin_round(int round) {
    std::lock_guard lock(mu_);
    round_ = round;
    published_by_.reset();
  }

  void publish(int round, int client_id, TriggerSpec trigger) {
    std::lock_guard lock(mu_);
    if (round != round_) throw AttackContextError("publish: context is at round " + std::to_string(round_));
    if (published_by_)
      throw AttackContextError("publish: round " + std::to_string(round) + " already published by client " +
                               std::to_string(*published_by_));
    published_by_ = client_id;
    latest_ = std::move(trigger);
  }

  /// The trigger published this round, or the configured static trigger.
  TriggerSpec fetch(int round) const {
    std::lock_guard lock(mu_);
    if (round == round_ && published_by_ && latest_) return *latest_;
    return static_;
  }

  /// Latest published trigger of any round (the starting point for the next
  /// optimization), falling back to the static one.
  TriggerSpec latest() const {
    std::lock_guard lock(mu_);
    return latest_ ? *latest_ : static_;
  }

  void restore_latest(std::optional<TriggerSpec> t) {
    std::lock_guard lock(mu_);
    latest_ = std::move(t);
  }
  std::optional<TriggerSpec> latest_published() const {
    std::lock_guard lock(mu_);
    return latest_;
  }

  std::optional<int> published_by() const {
    std::lock_guard lock(mu_);
    return published_by_;
  }
  int round() const {
    std::lock_guard lock(mu_);
    return round_;
  }
  const TriggerSpec& static_trigger() const { return static_; }

 private:
  mutable std::mutex mu_;
  TriggerSpec static_;
  std::optional<TriggerSpec> latest_;
  std::optional<int> published_by_;
  int round_ = -1;
};

// ---------------------------------------------------------------------------
// Malicious local training

struct MaliciousTrainArgs {
  const TriggerSpec* trigger = nullptr;  // already resolved (fragment / fetched)
  const CoordinateMask* mask = nullptr;  // neurotoxin only
  double gamma = 1.0;                    // scale for replacement-style poisons
  bool force_replacement = false;        // single-shot rounds
};

/// Poisoned local training followed by the configured model-poisoning
/// transform. The returned update is marked malicious (ground truth only).
inline ClientUpdate malicious_train(const ParamVector& global, const ModelSpec& spec, const Dataset& data,
                                    const TrainConfig& tc, const AttackConfig& ac, const MaliciousTrainArgs& args,
                                    std::uint64_t seed) {
  TrainHooks hooks;
  hooks.trigger = args.trigger;
  hooks.poison_count = args.trigger ? ac.poison_count_per_batch : 0;
  if (ac.model_poison == ModelPoison::neurotoxin_mask && args.mask) hooks.mask = &args.mask->keep;
  if (ac.model_poison == ModelPoison::constrain_and_scale) hooks.task_weight = ac.alpha_blend;
  ClientUpdate u = local_train(global, spec, data, tc, seed, hooks);
  const bool scale = args.force_replacement || ac.model_poison == ModelPoison::model_replacement ||
                     ac.model_poison == ModelPoison::constrain_and_scale;
  if (scale && args.gamma != 1.0) u.delta = scale_update(std::move(u.delta), args.gamma);
  u.truth_is_malicious = true;
  return u;
}

}  // namespace fedbench
