#pragma once

// ExperimentConfig and its JSON document form.
//
// A config file is a JSON object. It may name a base document with a
// top-level "include" (resolved relative to the including file); the
// including file's keys are deep-merged over the base. Command-line
// overrides ("a.b.c=value") are applied last. Unknown keys are rejected.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/attacks.hpp"
#include "fedbench/defenses.hpp"
#include "fedbench/metrics.hpp"
#include "fedbench/model.hpp"
#include "json.hpp"

namespace fedbench {

using Json = nlohmann::ordered_json;

enum class SelectionScheme { random_sampling, single_shot, fixed_frequency, continuous };
enum class DataSource { synthetic, mnist };
enum class PartitionKind { dirichlet, uniform };

struct RoundsConfig {
  int pretrain = 0;
  std::optional<int> warmup;  // nullopt ("auto"): 15% of pretrain
  int attack_window = 0;
  int post_attack = 0;

  int warmup_rounds() const {
    return warmup ? *warmup : static_cast<int>(std::lround(0.15 * static_cast<double>(pretrain)));
  }
  bool operator==(const RoundsConfig&) const = default;
};

struct SelectionConfig {
  SelectionScheme scheme = SelectionScheme::random_sampling;
  int frequency = 5;          // fixed_frequency: one attacker every `frequency` attack rounds
  int single_shot_round = 0;  // offset into the attack window
  bool operator==(const SelectionConfig&) const = default;
};

struct TriggerConfig {
  int size = 4;
  int row = 0;
  int col = 0;
  double value = 1.0;
  int target_class = 0;
  int n_fragments = 4;
  std::string edge_pool_csv;          // optional file-backed edge pool
  std::string edge_pool_images;       // or an IDX pair
  std::string edge_pool_labels;
  std::size_t edge_pool_size = 400;   // synthetic pool size (half train, half test)
  bool operator==(const TriggerConfig&) const = default;
};

struct AttackSettings {
  AttackConfig config;
  TriggerConfig trigger;
  bool shared_poison_dataset = false;
  std::optional<TrainConfig> train;  // attacker-side training overrides
  bool operator==(const AttackSettings&) const = default;
};

struct SyntheticConfig {
  std::size_t n_train = 3000;
  std::size_t n_test = 1000;
  std::size_t n_features = 64;
  int n_classes = 10;
  double spread = 0.1;
  std::optional<ImageShape> image_shape;
  bool operator==(const SyntheticConfig&) const = default;
};

struct MnistConfig {
  std::string train_images = "data/mnist/train-images-idx3-ubyte";
  std::string train_labels = "data/mnist/train-labels-idx1-ubyte";
  std::string test_images = "data/mnist/t10k-images-idx3-ubyte";
  std::string test_labels = "data/mnist/t10k-labels-idx1-ubyte";
  bool operator==(const MnistConfig&) const = default;
};

struct PartitionConfig {
  PartitionKind kind = PartitionKind::dirichlet;
  double alpha = 0.5;
  bool allow_empty = false;
  bool operator==(const PartitionConfig&) const = default;
};

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticConfig synthetic;
  MnistConfig mnist;
  PartitionConfig partition;
  std::size_t max_samples_per_client = 500;  // 0 = no cap
  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  int num_clients = 100;
  int clients_per_round = 10;
  double server_lr = 1.0;
  RoundsConfig rounds;
  double malicious_fraction = 0.1;
  SelectionConfig selection;
  AttackSettings attack;
  DefenseConfig defense;
  ModelSpec model;
  TrainConfig train;
  DataConfig data;
  MetricsConfig metrics;
  std::uint64_t master_seed = 0;
  int workers = 1;
  std::optional<std::int64_t> timeout_ms;
  bool enforce_timeouts = false;
  std::string pretrained_checkpoint;  // empty: run the pretrain phase
  int checkpoint_every = 50;

  int num_malicious() const {
    return static_cast<int>(std::ceil(malicious_fraction * static_cast<double>(num_clients) - 1e-9));
  }
  double gamma() const {
    return attack.config.scale_factor.value_or(replacement_gamma(static_cast<std::size_t>(clients_per_round), server_lr));
  }
  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Errors

enum class ConfigErrorKind { parse, unknown_key, missing_key, type_mismatch, constraint };

class ConfigError : public std::runtime_error {
 public:
  ConfigError(ConfigErrorKind kind, std::string key, const std::string& msg)
      : std::runtime_error(key.empty() ? msg : key + ": " + msg), kind_(kind), key_(std::move(key)) {}
  ConfigErrorKind kind() const { return kind_; }
  const std::string& key() const { return key_; }

 private:
  ConfigErrorKind kind_;
  std::string key_;
};

// ---------------------------------------------------------------------------
// Enum <-> string

namespace detail {

template <typename E>
struct EnumNames;

#define FEDBENCH_ENUM_NAMES(E, ...)                                 \
  template <>                                                       \
  struct EnumNames<E> {                                             \
    static const std::vector<std::pair<E, std::string>>& get() {    \
      static const std::vector<std::pair<E, std::string>> v{__VA_ARGS__}; \
      return v;                                                     \
    }                                                               \
  };

FEDBENCH_ENUM_NAMES(Activation, {Activation::relu, "relu"}, {Activation::tanh, "tanh"})
FEDBENCH_ENUM_NAMES(SelectionScheme, {SelectionScheme::random_sampling, "random_sampling"},
                    {SelectionScheme::single_shot, "single_shot"}, {SelectionScheme::fixed_frequency, "fixed_frequency"},
                    {SelectionScheme::continuous, "continuous"})
FEDBENCH_ENUM_NAMES(DataSource, {DataSource::synthetic, "synthetic"}, {DataSource::mnist, "mnist"})
FEDBENCH_ENUM_NAMES(PartitionKind, {PartitionKind::dirichlet, "dirichlet"}, {PartitionKind::uniform, "uniform"})
FEDBENCH_ENUM_NAMES(AttackKind, {AttackKind::fixed_pattern, "fixed_pattern"},
                    {AttackKind::distributed_pattern, "distributed_pattern"}, {AttackKind::edge_case, "edge_case"},
                    {AttackKind::optimized_pattern, "optimized_pattern"})
FEDBENCH_ENUM_NAMES(ModelPoison, {ModelPoison::none, "none"}, {ModelPoison::model_replacement, "model_replacement"},
                    {ModelPoison::constrain_and_scale, "constrain_and_scale"},
                    {ModelPoison::neurotoxin_mask, "neurotoxin_mask"})
FEDBENCH_ENUM_NAMES(AggregationRule, {AggregationRule::fedavg, "fedavg"}, {AggregationRule::median, "median"},
                    {AggregationRule::trimmed_mean, "trimmed_mean"}, {AggregationRule::krum, "krum"},
                    {AggregationRule::multi_krum, "multi_krum"}, {AggregationRule::rfa, "rfa"},
                    {AggregationRule::foolsgold, "foolsgold"}, {AggregationRule::rlr, "rlr"},
                    {AggregationRule::norm_clipping, "norm_clipping"})
FEDBENCH_ENUM_NAMES(DetectorKind, {DetectorKind::none, "none"}, {DetectorKind::mkrum_detector, "mkrum_detector"})
FEDBENCH_ENUM_NAMES(LifespanMode, {LifespanMode::consecutive, "consecutive"}, {LifespanMode::count, "count"})
FEDBENCH_ENUM_NAMES(HAsrScope, {HAsrScope::all_rounds, "all_rounds"}, {HAsrScope::attack_window, "attack_window"})

#undef FEDBENCH_ENUM_NAMES

}  // namespace detail

template <typename E>
std::string enum_name(E e) {
  for (const auto& [v, s] : detail::EnumNames<E>::get())
    if (v == e) return s;
  throw std::logic_error("enum_name: unmapped value");
}

template <typename E>
std::optional<E> enum_from(const std::string& s) {
  for (const auto& [v, n] : detail::EnumNames<E>::get())
    if (n == s) return v;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Reading

namespace detail {

/// Walks one JSON object, recording which keys were read so leftovers can
/// be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object())
      throw ConfigError(ConfigErrorKind::type_mismatch, path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const Json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out, bool required = false) {
    const Json* j = raw(key);
    if (!j) {
      if (required) throw ConfigError(ConfigErrorKind::missing_key, key_path(key), "required key is missing");
      return;
    }
    out = convert<T>(*j, key_path(key));
  }

  template <typename T>
  void read_optional(const std::string& key, std::optional<T>& out) {
    const Json* j = raw(key);
    if (!j) return;
    if (j->is_null()) {
      out.reset();
      return;
    }
    out = convert<T>(*j, key_path(key));
  }

  template <typename E>
  void read_enum(const std::string& key, E& out) {
    const Json* j = raw(key);
    if (!j) return;
    if (!j->is_string()) throw ConfigError(ConfigErrorKind::type_mismatch, key_path(key), "expected a string");
    auto v = enum_from<E>(j->get<std::string>());
    if (!v) {
      std::string allowed;
      for (const auto& [_, n] : EnumNames<E>::get()) allowed += (allowed.empty() ? "" : ", ") + n;
      throw ConfigError(ConfigErrorKind::constraint, key_path(key),
                        "unknown value '" + j->get<std::string>() + "' (allowed: " + allowed + ")");
    }
    out = *v;
  }

  ObjectReader child(const std::string& key) {
    static const Json empty = Json::object();
    const Json* j = raw(key);
    return ObjectReader(j ? *j : empty, key_path(key));
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw ConfigError(ConfigErrorKind::unknown_key, key_path(k), "unknown key");
  }

  template <typename T>
  static T convert(const Json& j, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError(ConfigErrorKind::type_mismatch, where, "expected a boolean");
      return j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw ConfigError(ConfigErrorKind::type_mismatch, where, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (j.is_number_unsigned()) return j.get<T>();
        if (j.get<std::int64_t>() < 0)
          throw ConfigError(ConfigErrorKind::constraint, where, "must be non-negative");
      }
      return j.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError(ConfigErrorKind::type_mismatch, where, "expected a number");
      return j.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError(ConfigErrorKind::type_mismatch, where, "expected a string");
      return j.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!j.is_array()) throw ConfigError(ConfigErrorKind::type_mismatch, where, "expected an array of integers");
      std::vector<std::size_t> v;
      for (std::size_t i = 0; i < j.size(); ++i)
        v.push_back(convert<std::size_t>(j[i], where + "[" + std::to_string(i) + "]"));
      return v;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void constraint(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(ConfigErrorKind::constraint, key, "constraint violated: " + what);
}

inline void read_train(ObjectReader r, TrainConfig& t) {
  r.read("local_epochs", t.local_epochs);
  r.read("batch_size", t.batch_size);
  r.read("learning_rate", t.learning_rate);
  r.read("momentum", t.momentum);
  r.read("weight_decay", t.weight_decay);
  r.finish();
  const auto p = [&](const char* k) { return r.key_path(k); };
  constraint(t.local_epochs >= 0, p("local_epochs"), "local_epochs >= 0");
  constraint(t.batch_size >= 1, p("batch_size"), "batch_size >= 1");
  constraint(t.learning_rate >= 0.0, p("learning_rate"), "learning_rate >= 0");
  constraint(t.momentum >= 0.0 && t.momentum < 1.0, p("momentum"), "0 <= momentum < 1");
  constraint(t.weight_decay >= 0.0, p("weight_decay"), "weight_decay >= 0");
}

inline Json train_to_json(const TrainConfig& t) {
  return Json{{"local_epochs", t.local_epochs},
              {"batch_size", t.batch_size},
              {"learning_rate", t.learning_rate},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay}};
}

template <typename T>
Json opt_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& doc) {
  using detail::constraint;
  ExperimentConfig c;
  detail::ObjectReader root(doc, "");
  root.raw("include");  // consumed by load_config_document
  root.read("name", c.name);
  root.read("num_clients", c.num_clients);
  root.read("clients_per_round", c.clients_per_round);
  root.read("server_lr", c.server_lr);
  root.read("malicious_fraction", c.malicious_fraction);
  root.read("master_seed", c.master_seed);
  root.read("workers", c.workers);
  root.read_optional("timeout_ms", c.timeout_ms);
  root.read("enforce_timeouts", c.enforce_timeouts);
  root.read("pretrained_checkpoint", c.pretrained_checkpoint);
  root.read("checkpoint_every", c.checkpoint_every);

  {
    auto r = root.child("rounds");
    r.read("pretrain", c.rounds.pretrain);
    if (const Json* w = r.raw("warmup"); w && !(w->is_string() && w->get<std::string>() == "auto")) {
      if (w->is_null()) {
        c.rounds.warmup.reset();
      } else {
        c.rounds.warmup = detail::ObjectReader::convert<int>(*w, r.key_path("warmup"));
      }
    } else if (w) {
      c.rounds.warmup.reset();
    }
    r.read("attack_window", c.rounds.attack_window);
    r.read("post_attack", c.rounds.post_attack);
    r.finish();
    constraint(c.rounds.pretrain >= 0 && c.rounds.warmup.value_or(0) >= 0 && c.rounds.attack_window >= 0 &&
                   c.rounds.post_attack >= 0,
               "rounds", "phase lengths >= 0");
  }
  {
    auto r = root.child("selection");
    r.read_enum("scheme", c.selection.scheme);
    r.read("frequency", c.selection.frequency);
    r.read("single_shot_round", c.selection.single_shot_round);
    r.finish();
    constraint(c.selection.frequency >= 1, "selection.frequency", "frequency >= 1");
    constraint(c.selection.single_shot_round >= 0 &&
                   (c.rounds.attack_window == 0 || c.selection.single_shot_round < c.rounds.attack_window),
               "selection.single_shot_round", "0 <= single_shot_round < rounds.attack_window");
  }
  // attacker overrides layer on top of the benign training config
  detail::read_train(root.child("train"), c.train);
  {
    auto r = root.child("attack");
    auto& a = c.attack.config;
    r.read_enum("kind", a.attack_kind);
    r.read_enum("model_poison", a.model_poison);
    r.read("poison_count_per_batch", a.poison_count_per_batch);
    r.read_optional("scale_factor", a.scale_factor);
    r.read("alpha_blend", a.alpha_blend);
    r.read("mask_ratio", a.mask_ratio);
    r.read("trigger_opt_steps", a.trigger_opt_steps);
    r.read("trigger_opt_lr", a.trigger_opt_lr);
    r.read("trigger_opt_pool", a.trigger_opt_pool);
    r.read("reoptimize_every", a.reoptimize_every);
    r.read("shared_poison_dataset", c.attack.shared_poison_dataset);
    if (const Json* t = r.raw("train"); t && !t->is_null()) {
      TrainConfig tc = c.train;
      detail::read_train(detail::ObjectReader(*t, r.key_path("train")), tc);
      c.attack.train = tc;
    }
    {
      auto tr = r.child("trigger");
      auto& t = c.attack.trigger;
      tr.read("size", t.size);
      tr.read("row", t.row);
      tr.read("col", t.col);
      tr.read("value", t.value);
      tr.read("target_class", t.target_class);
      tr.read("n_fragments", t.n_fragments);
      tr.read("edge_pool_csv", t.edge_pool_csv);
      tr.read("edge_pool_images", t.edge_pool_images);
      tr.read("edge_pool_labels", t.edge_pool_labels);
      tr.read("edge_pool_size", t.edge_pool_size);
      tr.finish();
      constraint(t.size >= 1, "attack.trigger.size", "size >= 1");
      constraint(t.row >= 0 && t.col >= 0, "attack.trigger.row", "row, col >= 0");
      constraint(t.value >= 0.0 && t.value <= 1.0, "attack.trigger.value", "0 <= value <= 1");
      constraint(t.n_fragments >= 1, "attack.trigger.n_fragments", "n_fragments >= 1");
      constraint(t.edge_pool_size >= 2, "attack.trigger.edge_pool_size", "edge_pool_size >= 2");
    }
    r.finish();
    constraint(a.alpha_blend >= 0.0 && a.alpha_blend <= 1.0, "attack.alpha_blend", "0 <= alpha_blend <= 1");
    constraint(a.mask_ratio > 0.0 && a.mask_ratio <= 1.0, "attack.mask_ratio", "0 < mask_ratio <= 1");
    constraint(!a.scale_factor || *a.scale_factor > 0.0, "attack.scale_factor", "scale_factor > 0");
    constraint(a.trigger_opt_steps >= 0, "attack.trigger_opt_steps", "trigger_opt_steps >= 0");
    constraint(a.trigger_opt_lr > 0.0, "attack.trigger_opt_lr", "trigger_opt_lr > 0");
    constraint(a.trigger_opt_pool >= 1, "attack.trigger_opt_pool", "trigger_opt_pool >= 1");
    constraint(a.reoptimize_every >= 1, "attack.reoptimize_every", "reoptimize_every >= 1");
  }
  {
    auto r = root.child("defense");
    auto& d = c.defense;
    r.read_enum("rule", d.rule);
    r.read("trim_k", d.trim_k);
    r.read("krum_f", d.krum_f);
    r.read("krum_m", d.krum_m);
    r.read("rfa_tol", d.rfa_tol);
    r.read("rfa_max_iter", d.rfa_max_iter);
    r.read("rlr_threshold", d.rlr_threshold);
    r.read_optional("norm_bound", d.norm_bound);
    r.read("weakdp_sigma", d.weakdp_sigma);
    r.read("ldp_bound", d.ldp_bound);
    r.read("ldp_sigma", d.ldp_sigma);
    r.read_enum("detector", d.detector);
    if (const Json* f = r.raw("detector_f"); f && !(f->is_string() && f->get<std::string>() == "known")) {
      if (f->is_null()) {
        d.detector_f.reset();
      } else {
        d.detector_f = detail::ObjectReader::convert<int>(*f, r.key_path("detector_f"));
      }
    } else if (f) {
      d.detector_f.reset();
    }
    r.finish();
    try {
      d.validate();
    } catch (const std::invalid_argument& e) {
      std::string msg = e.what();
      throw ConfigError(ConfigErrorKind::constraint, msg.substr(0, msg.find(' ')), "constraint violated: " + msg);
    }
  }
  {
    auto r = root.child("model");
    r.read("layer_sizes", c.model.layer_sizes, true);
    r.read_enum("activation", c.model.activation);
    r.read("init_scale", c.model.init_scale);
    {
      auto n = r.child("normalize");
      n.read("mean", c.model.normalizer.mean);
      n.read("std", c.model.normalizer.stddev);
      n.finish();
    }
    r.finish();
    constraint(c.model.layer_sizes.size() >= 2, "model.layer_sizes", "at least input and output sizes");
    for (auto s : c.model.layer_sizes) constraint(s >= 1, "model.layer_sizes", "all sizes >= 1");
    constraint(c.model.init_scale >= 0.0, "model.init_scale", "init_scale >= 0");
    constraint(c.model.normalizer.stddev > 0.0, "model.normalize.std", "std > 0");
  }
  {
    auto r = root.child("data");
    r.read_enum("source", c.data.source);
    r.read("max_samples_per_client", c.data.max_samples_per_client);
    {
      auto s = r.child("synthetic");
      auto& sc = c.data.synthetic;
      s.read("n_train", sc.n_train);
      s.read("n_test", sc.n_test);
      s.read("n_features", sc.n_features);
      s.read("n_classes", sc.n_classes);
      s.read("spread", sc.spread);
      if (const Json* shape = s.raw("image_shape"); shape && !shape->is_null()) {
        const auto v = detail::ObjectReader::convert<std::vector<std::size_t>>(*shape, s.key_path("image_shape"));
        constraint(v.size() == 3, s.key_path("image_shape"), "image_shape = [height, width, channels]");
        sc.image_shape = ImageShape{v[0], v[1], v[2]};
      } else if (shape) {
        sc.image_shape.reset();
      }
      s.finish();
      constraint(sc.n_classes >= 2, "data.synthetic.n_classes", "n_classes >= 2");
      constraint(sc.n_train >= 1 && sc.n_test >= 1, "data.synthetic.n_train", "n_train, n_test >= 1");
      constraint(sc.n_features >= 1, "data.synthetic.n_features", "n_features >= 1");
      constraint(sc.spread >= 0.0, "data.synthetic.spread", "spread >= 0");
      constraint(!sc.image_shape || sc.image_shape->size() == sc.n_features, "data.synthetic.image_shape",
                 "height * width * channels = n_features");
    }
    {
      auto m = r.child("mnist");
      m.read("train_images", c.data.mnist.train_images);
      m.read("train_labels", c.data.mnist.train_labels);
      m.read("test_images", c.data.mnist.test_images);
      m.read("test_labels", c.data.mnist.test_labels);
      m.finish();
    }
    {
      auto p = r.child("partition");
      p.read_enum("kind", c.data.partition.kind);
      p.read("alpha", c.data.partition.alpha);
      p.read("allow_empty", c.data.partition.allow_empty);
      p.finish();
      constraint(c.data.partition.alpha > 0.0, "data.partition.alpha", "alpha > 0");
    }
    r.finish();
  }
  {
    auto r = root.child("metrics");
    r.read("t", c.metrics.t);
    r.read("lifespan_threshold", c.metrics.lifespan_threshold);
    r.read_enum("lifespan_mode", c.metrics.lifespan_mode);
    r.read_enum("h_asr_scope", c.metrics.h_asr_scope);
    r.finish();
    constraint(c.metrics.t >= 1, "metrics.t", "t >= 1");
    constraint(c.metrics.lifespan_threshold >= 0.0 && c.metrics.lifespan_threshold <= 1.0,
               "metrics.lifespan_threshold", "0 <= lifespan_threshold <= 1");
  }
  root.finish();

  constraint(c.num_clients >= 1, "num_clients", "num_clients >= 1");
  constraint(c.clients_per_round >= 1, "clients_per_round", "clients_per_round >= 1");
  constraint(c.clients_per_round <= c.num_clients, "clients_per_round", "clients_per_round ≤ num_clients");
  constraint(c.server_lr > 0.0, "server_lr", "server_lr > 0");
  constraint(c.malicious_fraction >= 0.0 && c.malicious_fraction < 0.5, "malicious_fraction",
             "0 ≤ malicious_fraction < 0.5");
  constraint(c.workers >= 1, "workers", "workers >= 1");
  constraint(!c.timeout_ms || *c.timeout_ms > 0, "timeout_ms", "timeout_ms > 0");
  constraint(c.checkpoint_every >= 1, "checkpoint_every", "checkpoint_every >= 1");
  const int n_classes = c.data.source == DataSource::synthetic ? c.data.synthetic.n_classes : 10;
  constraint(c.model.layer_sizes.back() == static_cast<std::size_t>(n_classes), "model.layer_sizes",
             "last size equals the class count (" + std::to_string(n_classes) + ")");
  if (c.data.source == DataSource::synthetic)
    constraint(c.model.layer_sizes.front() == c.data.synthetic.n_features, "model.layer_sizes",
               "first size equals data.synthetic.n_features");
  constraint(c.attack.trigger.target_class >= 0 && c.attack.trigger.target_class < n_classes,
             "attack.trigger.target_class", "0 <= target_class < class count");
  if (c.selection.scheme == SelectionScheme::single_shot && c.rounds.attack_window > 0)
    constraint(c.num_malicious() <= c.clients_per_round, "clients_per_round",
               "clients_per_round >= number of malicious clients for single_shot");
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  using detail::opt_json;
  const auto& a = c.attack.config;
  const auto& t = c.attack.trigger;
  const auto& d = c.defense;
  const auto& sc = c.data.synthetic;
  Json shape = sc.image_shape ? Json::array({sc.image_shape->height, sc.image_shape->width, sc.image_shape->channels})
                              : Json(nullptr);
  return Json{
      {"name", c.name},
      {"num_clients", c.num_clients},
      {"clients_per_round", c.clients_per_round},
      {"server_lr", c.server_lr},
      {"rounds",
       {{"pretrain", c.rounds.pretrain},
        {"warmup", c.rounds.warmup ? Json(*c.rounds.warmup) : Json("auto")},
        {"attack_window", c.rounds.attack_window},
        {"post_attack", c.rounds.post_attack}}},
      {"malicious_fraction", c.malicious_fraction},
      {"selection",
       {{"scheme", enum_name(c.selection.scheme)},
        {"frequency", c.selection.frequency},
        {"single_shot_round", c.selection.single_shot_round}}},
      {"attack",
       {{"kind", enum_name(a.attack_kind)},
        {"model_poison", enum_name(a.model_poison)},
        {"poison_count_per_batch", a.poison_count_per_batch},
        {"scale_factor", opt_json(a.scale_factor)},
        {"alpha_blend", a.alpha_blend},
        {"mask_ratio", a.mask_ratio},
        {"trigger_opt_steps", a.trigger_opt_steps},
        {"trigger_opt_lr", a.trigger_opt_lr},
        {"trigger_opt_pool", a.trigger_opt_pool},
        {"reoptimize_every", a.reoptimize_every},
        {"shared_poison_dataset", c.attack.shared_poison_dataset},
        {"train", c.attack.train ? detail::train_to_json(*c.attack.train) : Json(nullptr)},
        {"trigger",
         {{"size", t.size},
          {"row", t.row},
          {"col", t.col},
          {"value", t.value},
          {"target_class", t.target_class},
          {"n_fragments", t.n_fragments},
          {"edge_pool_csv", t.edge_pool_csv},
          {"edge_pool_images", t.edge_pool_images},
          {"edge_pool_labels", t.edge_pool_labels},
          {"edge_pool_size", t.edge_pool_size}}}}},
      {"defense",
       {{"rule", enum_name(d.rule)},
        {"trim_k", d.trim_k},
        {"krum_f", d.krum_f},
        {"krum_m", d.krum_m},
        {"rfa_tol", d.rfa_tol},
        {"rfa_max_iter", d.rfa_max_iter},
        {"rlr_threshold", d.rlr_threshold},
        {"norm_bound", opt_json(d.norm_bound)},
        {"weakdp_sigma", d.weakdp_sigma},
        {"ldp_bound", d.ldp_bound},
        {"ldp_sigma", d.ldp_sigma},
        {"detector", enum_name(d.detector)},
        {"detector_f", d.detector_f ? Json(*d.detector_f) : Json("known")}}},
      {"model",
       {{"layer_sizes", c.model.layer_sizes},
        {"activation", enum_name(c.model.activation)},
        {"init_scale", c.model.init_scale},
        {"normalize", {{"mean", c.model.normalizer.mean}, {"std", c.model.normalizer.stddev}}}}},
      {"train", detail::train_to_json(c.train)},
      {"data",
       {{"source", enum_name(c.data.source)},
        {"synthetic",
         {{"n_train", sc.n_train},
          {"n_test", sc.n_test},
          {"n_features", sc.n_features},
          {"n_classes", sc.n_classes},
          {"spread", sc.spread},
          {"image_shape", shape}}},
        {"mnist",
         {{"train_images", c.data.mnist.train_images},
          {"train_labels", c.data.mnist.train_labels},
          {"test_images", c.data.mnist.test_images},
          {"test_labels", c.data.mnist.test_labels}}},
        {"partition",
         {{"kind", enum_name(c.data.partition.kind)},
          {"alpha", c.data.partition.alpha},
          {"allow_empty", c.data.partition.allow_empty}}},
        {"max_samples_per_client", c.data.max_samples_per_client}}},
      {"metrics",
       {{"t", c.metrics.t},
        {"lifespan_threshold", c.metrics.lifespan_threshold},
        {"lifespan_mode", enum_name(c.metrics.lifespan_mode)},
        {"h_asr_scope", enum_name(c.metrics.h_asr_scope)}}},
      {"master_seed", c.master_seed},
      {"workers", c.workers},
      {"timeout_ms", opt_json(c.timeout_ms)},
      {"enforce_timeouts", c.enforce_timeouts},
      {"pretrained_checkpoint", c.pretrained_checkpoint},
      {"checkpoint_every", c.checkpoint_every},
  };
}

// ---------------------------------------------------------------------------
// Documents, includes and overrides

/// Recursive merge: objects merge key by key, everything else replaces.
inline void deep_merge(Json& base, const Json& top) {
  if (!base.is_object() || !top.is_object()) {
    base = top;
    return;
  }
  for (const auto& [k, v] : top.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object()) {
      deep_merge(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(ConfigErrorKind::parse, "", origin + ": " + e.what());
  }
}

inline Json load_config_document(const std::filesystem::path& path, int depth = 0) {
  if (depth > 8) throw ConfigError(ConfigErrorKind::parse, "include", "include nesting too deep");
  std::ifstream in(path);
  if (!in) throw ConfigError(ConfigErrorKind::parse, "", "cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  Json doc = parse_json_text(ss.str(), path.string());
  if (!doc.is_object()) throw ConfigError(ConfigErrorKind::type_mismatch, "<root>", "config must be a JSON object");
  if (doc.contains("include")) {
    if (!doc["include"].is_string()) throw ConfigError(ConfigErrorKind::type_mismatch, "include", "expected a string");
    Json base = load_config_document(path.parent_path() / doc["include"].get<std::string>(), depth + 1);
    doc.erase("include");
    deep_merge(base, doc);
    return base;
  }
  return doc;
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a plain string otherwise.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(ConfigErrorKind::parse, "", "override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(ConfigErrorKind::parse, key, "empty path component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = Json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline ExperimentConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  Json doc = load_config_document(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  Json doc = parse_json_text(text, "<string>");
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace fedbench
