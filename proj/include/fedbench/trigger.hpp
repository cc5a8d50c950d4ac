#pragma once

// Backdoor triggers and the raw-input batch pipeline.
//
// Triggers are always written into raw [0,1] inputs. Model-side
// normalization only accepts a RawBatch and produces a ModelBatch, so a
// trigger can never be applied to already-normalized data.

#include <algorithm>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "fedbench/data.hpp"
#include "fedbench/params.hpp"

namespace fedbench {

enum class TriggerKind { fixed_pattern, distributed_fragment, optimized_pattern, edge_case };

inline const char* to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::fixed_pattern: return "fixed_pattern";
    case TriggerKind::distributed_fragment: return "distributed_fragment";
    case TriggerKind::optimized_pattern: return "optimized_pattern";
    case TriggerKind::edge_case: return "edge_case";
  }
  return "?";
}

struct TriggerPixel {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t channel = 0;
  double value = 1.0;

  bool operator==(const TriggerPixel&) const = default;
  auto position() const { return std::tuple(row, col, channel); }
};

struct TriggerSpec {
  TriggerKind kind = TriggerKind::fixed_pattern;
  int target_class = 0;
  std::vector<TriggerPixel> pixels;
  int fragment_id = 0;
  int fragment_of = 1;
  std::shared_ptr<const Dataset> edge_pool;  // edge_case only

  bool operator==(const TriggerSpec& o) const {
    return kind == o.kind && target_class == o.target_class && pixels == o.pixels &&
           fragment_id == o.fragment_id && fragment_of == o.fragment_of && edge_pool == o.edge_pool;
  }
};

/// size x size patch with its top-left corner at (row, col) on every channel.
inline TriggerSpec square_trigger(std::size_t size, std::size_t row, std::size_t col, double value,
                                  int target_class, std::size_t channels = 1,
                                  TriggerKind kind = TriggerKind::fixed_pattern) {
  TriggerSpec t;
  t.kind = kind;
  t.target_class = target_class;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      for (std::size_t ch = 0; ch < channels; ++ch) t.pixels.push_back({row + r, col + c, ch, value});
  return t;
}

/// Checks pixel coordinates against `shape`; throws std::out_of_range.
inline void check_trigger_bounds(const TriggerSpec& t, const ImageShape& shape) {
  for (const auto& p : t.pixels) {
    if (p.row >= shape.height || p.col >= shape.width || p.channel >= shape.channels)
      throw std::out_of_range("trigger pixel (" + std::to_string(p.row) + "," + std::to_string(p.col) + "," +
                              std::to_string(p.channel) + ") outside image " + std::to_string(shape.height) +
                              "x" + std::to_string(shape.width) + "x" + std::to_string(shape.channels));
  }
}

/// Overwrites the pattern pixels of one raw sample in place, clipping to [0,1].
inline void apply_trigger_inplace(std::span<float> sample, const ImageShape& shape, const TriggerSpec& t) {
  if (t.kind == TriggerKind::edge_case)
    throw std::invalid_argument("apply_trigger: edge-case triggers replace samples, see poison_batch");
  if (sample.size() != shape.size()) throw std::invalid_argument("apply_trigger: sample/shape size mismatch");
  check_trigger_bounds(t, shape);
  for (const auto& p : t.pixels)
    sample[shape.index(p.row, p.col, p.channel)] = static_cast<float>(std::clamp(p.value, 0.0, 1.0));
}

struct PoisonedSample {
  std::vector<float> input;
  int label = 0;
};

inline PoisonedSample apply_trigger(std::span<const float> sample, const ImageShape& shape, const TriggerSpec& t) {
  PoisonedSample out{{sample.begin(), sample.end()}, t.target_class};
  apply_trigger_inplace(out.input, shape, t);
  return out;
}

/// Splits the pattern into `n` disjoint fragments of equal pixel count,
/// cutting the row-major-sorted pixel list into consecutive runs.
inline std::vector<TriggerSpec> make_fragments(const TriggerSpec& t, int n) {
  if (n < 1) throw std::invalid_argument("make_fragments: n must be >= 1");
  const std::size_t count = t.pixels.size();
  if (count % static_cast<std::size_t>(n) != 0) {
    std::string suggestion;
    for (std::size_t d = 1; d <= count; ++d)
      if (count % d == 0) suggestion += (suggestion.empty() ? "" : ", ") + std::to_string(d);
    throw std::invalid_argument("make_fragments: " + std::to_string(count) + " pixels cannot be split into " +
                                std::to_string(n) + " equal fragments; valid counts: " + suggestion);
  }
  auto sorted = t.pixels;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const TriggerPixel& a, const TriggerPixel& b) { return a.position() < b.position(); });
  const std::size_t per = count / static_cast<std::size_t>(n);
  std::vector<TriggerSpec> out;
  for (int f = 0; f < n; ++f) {
    TriggerSpec frag = t;
    frag.kind = TriggerKind::distributed_fragment;
    frag.fragment_id = f;
    frag.fragment_of = n;
    frag.pixels.assign(sorted.begin() + static_cast<std::ptrdiff_t>(f * per),
                       sorted.begin() + static_cast<std::ptrdiff_t>((f + 1) * per));
    out.push_back(std::move(frag));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

/// Inputs in raw [0,1] space.
struct RawBatch {
  std::vector<float> inputs;
  std::vector<int> labels;
  std::size_t num_features = 0;

  std::size_t size() const { return labels.size(); }
  std::span<float> sample(std::size_t i) { return {inputs.data() + i * num_features, num_features}; }
  std::span<const float> sample(std::size_t i) const { return {inputs.data() + i * num_features, num_features}; }

  static RawBatch gather(const Dataset& ds, std::span<const int> indices) {
    RawBatch b;
    b.num_features = ds.num_features;
    b.inputs.reserve(indices.size() * ds.num_features);
    for (int i : indices) {
      auto s = ds.sample(static_cast<std::size_t>(i));
      b.inputs.insert(b.inputs.end(), s.begin(), s.end());
      b.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    return b;
  }
};

/// Inputs after normalization, ready for the model.
struct ModelBatch {
  std::vector<double> inputs;
  std::vector<int> labels;
  std::size_t num_features = 0;

  std::size_t size() const { return labels.size(); }
  std::span<const double> sample(std::size_t i) const { return {inputs.data() + i * num_features, num_features}; }
};

/// Marks the first `poison_count` samples of an (already shuffled) batch
/// with the trigger and relabels them to the target class. Edge-case
/// triggers swap those samples for seeded draws from the edge pool.
inline RawBatch poison_batch(RawBatch batch, const ImageShape& shape, const TriggerSpec& t,
                             std::size_t poison_count, Rng* rng = nullptr) {
  if (poison_count > batch.size())
    throw std::invalid_argument("poison_batch: poison_count " + std::to_string(poison_count) +
                                " exceeds batch size " + std::to_string(batch.size()));
  if (t.kind == TriggerKind::edge_case) {
    if (!t.edge_pool || t.edge_pool->empty()) throw std::invalid_argument("poison_batch: empty edge pool");
    if (poison_count > 0 && rng == nullptr) throw std::invalid_argument("poison_batch: edge-case needs an rng");
    for (std::size_t i = 0; i < poison_count; ++i) {
      const auto src = t.edge_pool->sample(rng->below(t.edge_pool->size()));
      std::copy(src.begin(), src.end(), batch.sample(i).begin());
      batch.labels[i] = t.target_class;
    }
    return batch;
  }
  for (std::size_t i = 0; i < poison_count; ++i) {
    apply_trigger_inplace(batch.sample(i), shape, t);
    batch.labels[i] = t.target_class;
  }
  return batch;
}

struct Normalizer {
  double mean = 0.0;
  double stddev = 1.0;

  double apply(float raw) const { return (static_cast<double>(raw) - mean) / stddev; }

  ModelBatch operator()(const RawBatch& raw) const {
    ModelBatch out;
    out.num_features = raw.num_features;
    out.labels = raw.labels;
    out.inputs.resize(raw.inputs.size());
    for (std::size_t i = 0; i < raw.inputs.size(); ++i) out.inputs[i] = apply(raw.inputs[i]);
    return out;
  }
  bool operator==(const Normalizer&) const = default;
};

enum class PipelineStage { gather, poison, normalize };

/// Builds one training batch: gather raw rows, optionally poison, normalize.
/// `trace`, when given, receives the stage order for inspection.
inline ModelBatch prepare_batch(const Dataset& ds, std::span<const int> indices, const Normalizer& norm,
                                const TriggerSpec* trigger = nullptr, std::size_t poison_count = 0,
                                Rng* rng = nullptr, std::vector<PipelineStage>* trace = nullptr) {
  RawBatch raw = RawBatch::gather(ds, indices);
  if (trace) trace->push_back(PipelineStage::gather);
  if (trigger && poison_count > 0) {
    raw = poison_batch(std::move(raw), ds.image_shape.value_or(ImageShape{1, ds.num_features, 1}), *trigger,
                       std::min(poison_count, raw.size()), rng);
    if (trace) trace->push_back(PipelineStage::poison);
  }
  ModelBatch mb = norm(raw);
  if (trace) trace->push_back(PipelineStage::normalize);
  return mb;
}

}  // namespace fedbench
