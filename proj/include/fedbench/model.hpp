#pragma once

// Small feed-forward classifier with analytic gradients and a local SGD trainer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/data.hpp"
#include "fedbench/params.hpp"
#include "fedbench/trigger.hpp"
#include "fedbench/update.hpp"

namespace fedbench {

enum class Activation { relu, tanh };

struct ModelSpec {
  std::vector<std::size_t> layer_sizes;  // input, hidden..., classes
  Activation activation = Activation::relu;
  double init_scale = 0.1;
  Normalizer normalizer;  // applied to raw inputs before the first layer

  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t num_classes() const { return layer_sizes.back(); }

  void validate() const {
    if (layer_sizes.size() < 2) throw std::invalid_argument("ModelSpec: need at least input and output sizes");
    for (auto s : layer_sizes)
      if (s == 0) throw std::invalid_argument("ModelSpec: layer sizes must be positive");
    if (!(normalizer.stddev > 0.0)) throw std::invalid_argument("ModelSpec: normalizer stddev must be > 0");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) n += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return n;
  }

  Layout layout() const {
    Layout out;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      out.push_back({"fc" + std::to_string(l) + ".weight", {layer_sizes[l + 1], layer_sizes[l]}});
      out.push_back({"fc" + std::to_string(l) + ".bias", {layer_sizes[l + 1]}});
    }
    return out;
  }

  bool operator==(const ModelSpec&) const = default;
};

struct TrainConfig {
  int local_epochs = 2;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;

  void validate() const {
    if (local_epochs < 0) throw std::invalid_argument("TrainConfig: local_epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (learning_rate < 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline ParamVector init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed({seed, 0, 0, StreamTag::init}));
  std::vector<double> values;
  values.reserve(spec.param_count());
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t nw = spec.layer_sizes[l] * spec.layer_sizes[l + 1];
    for (std::size_t i = 0; i < nw; ++i)
      values.push_back(spec.init_scale == 0.0 ? 0.0 : rng.uniform(-spec.init_scale, spec.init_scale));
    values.insert(values.end(), spec.layer_sizes[l + 1], 0.0);
  }
  return ParamVector(std::move(values), spec.layout());
}

namespace detail {

/// Four-way unrolled dot product; the accumulation order is fixed.
inline double fdot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double activate(Activation act, double z) {
  return act == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

/// Derivative expressed through the pre-activation z and activation a.
inline double activate_grad(Activation act, double z, double a) {
  return act == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - a * a;
}

}  // namespace detail

/// Forward/backward on one batch. Keeps per-layer activations for backprop.
class Network {
 public:
  Network(const ModelSpec& spec, std::span<const double> params) : spec_(spec), params_(params) {
    if (params.size() != spec.param_count())
      throw std::invalid_argument("Network: parameter count " + std::to_string(params.size()) +
                                  " does not match spec (" + std::to_string(spec.param_count()) + ")");
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      w_off_.push_back(off);
      off += spec.layer_sizes[l] * spec.layer_sizes[l + 1];
      b_off_.push_back(off);
      off += spec.layer_sizes[l + 1];
    }
  }

  /// Returns logits (batch x classes, row-major).
  const std::vector<double>& forward(const ModelBatch& batch) {
    if (batch.num_features != spec_.input_dim())
      throw std::invalid_argument("forward: feature dim " + std::to_string(batch.num_features) +
                                  " does not match model input " + std::to_string(spec_.input_dim()));
    const std::size_t n = batch.size();
    const std::size_t L = spec_.num_layers();
    acts_.assign(L + 1, {});
    pre_.assign(L, {});
    acts_[0] = batch.inputs;
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t in = spec_.layer_sizes[l], out = spec_.layer_sizes[l + 1];
      const double* W = params_.data() + w_off_[l];
      const double* b = params_.data() + b_off_[l];
      auto& z = pre_[l];
      z.resize(n * out);
      for (std::size_t s = 0; s < n; ++s) {
        const double* x = acts_[l].data() + s * in;
        for (std::size_t o = 0; o < out; ++o) z[s * out + o] = b[o] + detail::fdot(W + o * in, x, in);
      }
      if (l + 1 < L) {
        auto& a = acts_[l + 1];
        a.resize(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) a[i] = detail::activate(spec_.activation, z[i]);
      } else {
        acts_[l + 1] = z;
      }
    }
    return acts_[L];
  }

  /// Mean cross-entropy of the last forward pass; fills `grad` (same layout
  /// as params) and optionally the gradient w.r.t. the normalized inputs.
  double backward(const std::vector<int>& labels, std::span<double> grad,
                  std::vector<double>* input_grad = nullptr) const {
    const std::size_t L = spec_.num_layers();
    const std::size_t C = spec_.num_classes();
    const std::size_t n = labels.size();
    std::fill(grad.begin(), grad.end(), 0.0);
    const auto& logits = acts_[L];
    std::vector<double> delta(n * C);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) {
      const double* z = logits.data() + s * C;
      const double m = *std::max_element(z, z + C);
      double sum = 0.0;
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
      const double log_sum = std::log(sum) + m;
      const auto y = static_cast<std::size_t>(labels[s]);
      if (y >= C) throw std::invalid_argument("backward: label out of range");
      loss += log_sum - z[y];
      for (std::size_t c = 0; c < C; ++c)
        delta[s * C + c] = (std::exp(z[c] - log_sum) - (c == y ? 1.0 : 0.0)) * inv_n;
    }
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t in = spec_.layer_sizes[l], out = spec_.layer_sizes[l + 1];
      const double* W = params_.data() + w_off_[l];
      double* gW = grad.data() + w_off_[l];
      double* gb = grad.data() + b_off_[l];
      const auto& a_in = acts_[l];
      for (std::size_t s = 0; s < n; ++s) {
        const double* x = a_in.data() + s * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double d = delta[s * out + o];
          if (d == 0.0) continue;
          detail::axpy(d, x, gW + o * in, in);
          gb[o] += d;
        }
      }
      if (l == 0 && input_grad == nullptr) break;
      std::vector<double> prev(n * in, 0.0);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < out; ++o) {
          const double d = delta[s * out + o];
          if (d != 0.0) detail::axpy(d, W + o * in, prev.data() + s * in, in);
        }
      if (l == 0) {
        *input_grad = std::move(prev);
        break;
      }
      const auto& z = pre_[l - 1];
      const auto& a = acts_[l];
      for (std::size_t i = 0; i < prev.size(); ++i) prev[i] *= detail::activate_grad(spec_.activation, z[i], a[i]);
      delta = std::move(prev);
    }
    return loss * inv_n;
  }

 private:
  const ModelSpec& spec_;
  std::span<const double> params_;
  std::vector<std::size_t> w_off_, b_off_;
  std::vector<std::vector<double>> acts_, pre_;
};

inline std::vector<double> forward(const ParamVector& params, const ModelSpec& spec, const ModelBatch& batch) {
  Network net(spec, params.values());
  return net.forward(batch);
}

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean cross-entropy plus (weight_decay / 2) * ||theta||^2 and its gradient.
inline LossGrad loss_and_grad(const ParamVector& params, const ModelSpec& spec, const ModelBatch& batch,
                              double weight_decay = 0.0) {
  if (batch.size() == 0) throw std::invalid_argument("grad: empty batch");
  Network net(spec, params.values());
  net.forward(batch);
  LossGrad out{0.0, ParamVector::zeros_like(params)};
  out.loss = net.backward(batch.labels, out.grad.values());
  if (weight_decay != 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.grad[i] += weight_decay * params[i];
      sq += params[i] * params[i];
    }
    out.loss += 0.5 * weight_decay * sq;
  }
  return out;
}

inline ParamVector grad(const ParamVector& params, const ModelSpec& spec, const ModelBatch& batch,
                        double weight_decay = 0.0) {
  return loss_and_grad(params, spec, batch, weight_decay).grad;
}

/// Argmax with ties going to the lowest class index.
inline std::vector<int> predict(const ParamVector& params, const ModelSpec& spec, const ModelBatch& batch) {
  const auto logits = forward(params, spec, batch);
  const std::size_t C = spec.num_classes();
  std::vector<int> out(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[s * C + c] > logits[s * C + best]) best = c;
    out[s] = static_cast<int>(best);
  }
  return out;
}

inline constexpr std::size_t kEvalChunk = 512;

inline double evaluate_acc(const ParamVector& params, const ModelSpec& spec, const Dataset& ds) {
  if (ds.empty()) throw std::invalid_argument("evaluate_acc: empty dataset");
  std::size_t correct = 0;
  std::vector<int> idx;
  for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
    idx.resize(std::min(kEvalChunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    const auto mb = spec.normalizer(RawBatch::gather(ds, idx));
    const auto pred = predict(params, spec, mb);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == mb.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Fraction of triggered non-target samples classified as the target.
/// Edge-case triggers are scored on `ds` as given (an out-of-distribution
/// test pool), with no exclusion.
inline double evaluate_asr(const ParamVector& params, const ModelSpec& spec, const Dataset& ds,
                           const TriggerSpec& trigger) {
  std::vector<int> eligible;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (trigger.kind == TriggerKind::edge_case || ds.labels[i] != trigger.target_class)
      eligible.push_back(static_cast<int>(i));
  if (eligible.empty())
    throw std::invalid_argument("evaluate_asr: no samples outside the target class");
  const ImageShape shape = ds.image_shape.value_or(ImageShape{1, ds.num_features, 1});
  std::size_t hits = 0;
  for (std::size_t start = 0; start < eligible.size(); start += kEvalChunk) {
    const std::size_t len = std::min(kEvalChunk, eligible.size() - start);
    RawBatch raw = RawBatch::gather(ds, std::span(eligible).subspan(start, len));
    if (trigger.kind != TriggerKind::edge_case)
      for (std::size_t i = 0; i < raw.size(); ++i) apply_trigger_inplace(raw.sample(i), shape, trigger);
    const auto pred = predict(params, spec, spec.normalizer(raw));
    for (int p : pred) hits += p == trigger.target_class;
  }
  return static_cast<double>(hits) / static_cast<double>(eligible.size());
}

// ---------------------------------------------------------------------------
// Local training

/// Optional behaviour layered on top of plain SGD by malicious clients.
struct TrainHooks {
  const TriggerSpec* trigger = nullptr;  // poison the first poison_count of each batch
  std::size_t poison_count = 0;
  const std::vector<std::uint8_t>* mask = nullptr;  // steps zeroed where mask == 0
  double task_weight = 1.0;                         // constrain-and-scale alpha
};

/// Seeded minibatch SGD starting at `global`. The delta is accumulated
/// directly (theta_local = global + delta), so the returned delta is exactly
/// the sum of the applied steps.
inline ClientUpdate local_train(const ParamVector& global, const ModelSpec& spec, const Dataset& data,
                                const TrainConfig& tc, std::uint64_t seed, const TrainHooks& hooks = {}) {
  if (data.empty()) throw std::invalid_argument("local_train: empty client dataset");
  tc.validate();
  const auto t0 = std::chrono::steady_clock::now();

  Rng shuffle_rng(mix64(seed));
  Rng poison_rng(mix64(seed ^ 0x5bd1e9955bd1e995ULL));
  const std::size_t P = global.size();
  ParamVector delta = ParamVector::zeros_like(global);
  std::vector<double> velocity(P, 0.0);
  ParamVector local = global;
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const double penalty = 1.0 - hooks.task_weight;

  for (int epoch = 0; epoch < tc.local_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t len = std::min(tc.batch_size, order.size() - start);
      const auto idx = std::span<const int>(order).subspan(start, len);
      const auto mb = prepare_batch(data, idx, spec.normalizer, hooks.trigger, hooks.poison_count, &poison_rng);
      auto g = loss_and_grad(local, spec, mb, tc.weight_decay).grad;
      for (std::size_t i = 0; i < P; ++i) {
        double gi = hooks.task_weight * g[i];
        if (penalty != 0.0) gi += 2.0 * penalty * delta[i];
        if (hooks.mask && (*hooks.mask)[i] == 0) gi = 0.0;
        velocity[i] = tc.momentum * velocity[i] + gi;
        delta[i] -= tc.learning_rate * velocity[i];
        local[i] = global[i] + delta[i];
      }
    }
  }

  ClientUpdate u;
  u.delta = std::move(delta);
  u.declared_num_samples = static_cast<std::int64_t>(data.size());
  u.train_wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  return u;
}

}  // namespace fedbench
