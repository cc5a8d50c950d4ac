#pragma once

// Experiment lifecycle: pretrain -> warm-up -> attack window -> post-attack.
//
// Rounds are numbered from 0 across all phases. Client training runs on the
// worker pool; selection, detection, aggregation, evaluation and persistence
// run on the calling thread. Every random draw comes from a stream derived
// from (master_seed, round, client, tag), and updates are aggregated in
// client_id order, so results do not depend on the worker count.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/attacks.hpp"
#include "fedbench/checkpoint.hpp"
#include "fedbench/config.hpp"
#include "fedbench/data.hpp"
#include "fedbench/defenses.hpp"
#include "fedbench/metrics.hpp"
#include "fedbench/model.hpp"
#include "fedbench/thread_pool.hpp"
#include "fedbench/trigger.hpp"

namespace fedbench {

/// Global update: theta' = theta + kUpdateSign * eta * AGR(deltas), with
/// delta = theta_local - theta. The replacement scale K/eta and RLR assume +1.
inline constexpr double kUpdateSign = 1.0;

enum class Phase { pretrain, warmup, attack, post };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::warmup: return "warmup";
    case Phase::attack: return "attack";
    case Phase::post: return "post";
  }
  return "?";
}

inline std::optional<Phase> phase_from(const std::string& s) {
  for (Phase p : {Phase::pretrain, Phase::warmup, Phase::attack, Phase::post})
    if (s == phase_name(p)) return p;
  return std::nullopt;
}

/// Round index ranges of the four phases.
struct PhasePlan {
  int warmup_begin = 0;
  int attack_begin = 0;
  int post_begin = 0;
  int end = 0;

  explicit PhasePlan(const RoundsConfig& r)
      : warmup_begin(r.pretrain),
        attack_begin(r.pretrain + r.warmup_rounds()),
        post_begin(attack_begin + r.attack_window),
        end(post_begin + r.post_attack) {}

  Phase phase_of(int round) const {
    if (round < warmup_begin) return Phase::pretrain;
    if (round < attack_begin) return Phase::warmup;
    if (round < post_begin) return Phase::attack;
    return Phase::post;
  }
  bool is_phase_end(int round) const {
    return round + 1 == warmup_begin || round + 1 == attack_begin || round + 1 == post_begin || round + 1 == end;
  }
};

struct RoundTimings {
  std::vector<std::pair<int, std::int64_t>> client_ms;
  std::int64_t aggregation_ms = 0;
  std::int64_t round_ms = 0;
};

struct RoundRecord {
  int round = 0;
  Phase phase = Phase::pretrain;
  std::vector<int> selected;
  std::vector<int> malicious_selected;  // selected clients that sent a poisoned update
  double acc = 0.0;
  std::optional<double> asr;
  double aggregate_norm = 0.0;  // norm of the applied step
  std::optional<DetectionReport> detection;
  bool empty_round = false;
  std::vector<int> dropped_timeouts;
  std::vector<int> failed_clients;
  std::optional<int> trigger_publisher;
  std::optional<double> norm_bound;  // B used by norm clipping this round
  RoundTimings timings;
};

// ---------------------------------------------------------------------------
// Client selection

struct SelectionParams {
  SelectionScheme scheme = SelectionScheme::random_sampling;
  int num_clients = 0;
  int clients_per_round = 0;
  int num_malicious = 0;  // ids [0, num_malicious) are malicious
  int frequency = 1;
  int single_shot_round = 0;
};

inline SelectionParams selection_params(const ExperimentConfig& c) {
  return {c.selection.scheme, c.num_clients, c.clients_per_round, c.num_malicious(),
          c.selection.frequency, c.selection.single_shot_round};
}

/// Selected ids, ascending. `attack_index` is the round's offset into the
/// attack window, or nullopt outside it (where every scheme samples
/// uniformly).
inline std::vector<int> select_round_clients(const SelectionParams& p, std::optional<int> attack_index, Rng& rng) {
  const int n = p.num_clients, k = p.clients_per_round, m = p.num_malicious;
  if (k < 1 || k > n) throw std::invalid_argument("select_round_clients: need 1 <= clients_per_round <= num_clients");
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> benign(all.begin() + m, all.end());

  std::vector<int> forced;
  bool benign_only = false;
  if (attack_index && m > 0) {
    const int a = *attack_index;
    switch (p.scheme) {
      case SelectionScheme::random_sampling: break;
      case SelectionScheme::single_shot:
        if (m > k)
          throw std::invalid_argument("select_round_clients: single_shot needs clients_per_round (" +
                                      std::to_string(k) + ") >= malicious clients (" + std::to_string(m) + ")");
        if (a == p.single_shot_round) {
          forced.assign(all.begin(), all.begin() + m);
        } else {
          benign_only = true;
        }
        break;
      case SelectionScheme::fixed_frequency:
        benign_only = true;
        if (a % p.frequency == 0) forced.push_back((a / p.frequency) % m);
        break;
      case SelectionScheme::continuous:
        if (m > k)
          throw std::invalid_argument("select_round_clients: continuous needs clients_per_round >= malicious clients");
        forced.assign(all.begin(), all.begin() + m);
        break;
    }
  }

  std::vector<int> out;
  if (forced.empty() && !benign_only) {
    out = rng.sample_without_replacement(all, static_cast<std::size_t>(k));
  } else {
    const auto fill = static_cast<std::size_t>(k) - forced.size();
    if (fill > benign.size())
      throw std::invalid_argument("select_round_clients: not enough benign clients to fill the round");
    out = rng.sample_without_replacement(benign, fill);
    out.insert(out.end(), forced.begin(), forced.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Data

struct ExperimentData {
  Dataset train;
  Dataset test;
  PartitionMap partition;
  std::vector<Dataset> client_data;
  std::shared_ptr<const Dataset> edge_train;  // edge-case attacks only
  std::shared_ptr<const Dataset> edge_test;
};

namespace detail {

inline SyntheticSpec synthetic_spec(const ExperimentConfig& c, std::size_t n) {
  SyntheticSpec s;
  s.n_samples = n;
  s.n_features = c.data.synthetic.n_features;
  s.n_classes = c.data.synthetic.n_classes;
  s.cluster_spread = c.data.synthetic.spread;
  s.seed = c.master_seed;
  s.image_shape = c.data.synthetic.image_shape;
  return s;
}

inline Dataset relabel(Dataset ds, int target) {
  std::fill(ds.labels.begin(), ds.labels.end(), target);
  return ds;
}

inline std::pair<Dataset, Dataset> split_half(const Dataset& ds) {
  std::vector<int> a, b;
  for (std::size_t i = 0; i < ds.size(); ++i) (i % 2 == 0 ? a : b).push_back(static_cast<int>(i));
  return {ds.subset(a), ds.subset(b)};
}

}  // namespace detail

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.data.source == DataSource::synthetic) {
    d.train = gen_synthetic(detail::synthetic_spec(c, c.data.synthetic.n_train), 0);
    d.test = gen_synthetic(detail::synthetic_spec(c, c.data.synthetic.n_test), 1);
  } else {
    const auto& m = c.data.mnist;
    d.train = load_mnist_idx(m.train_images, m.train_labels);
    d.test = load_mnist_idx(m.test_images, m.test_labels);
  }
  if (d.train.num_features != c.model.input_dim())
    throw ConfigError(ConfigErrorKind::constraint, "model.layer_sizes",
                      "first size " + std::to_string(c.model.input_dim()) + " does not match the data's " +
                          std::to_string(d.train.num_features) + " features");

  const auto n = static_cast<std::size_t>(c.num_clients);
  d.partition = c.data.partition.kind == PartitionKind::dirichlet
                    ? partition_dirichlet(d.train, n, c.data.partition.alpha, c.master_seed, c.data.partition.allow_empty)
                    : partition_uniform(d.train, n, c.master_seed, c.data.partition.allow_empty);
  d.partition = truncate_partition(std::move(d.partition), c.data.max_samples_per_client, c.master_seed);
  for (const auto& a : d.partition.assignments) d.client_data.push_back(d.train.subset(a));

  if (c.attack.config.attack_kind == AttackKind::edge_case) {
    const auto& t = c.attack.trigger;
    Dataset pool;
    if (!t.edge_pool_csv.empty()) {
      pool = load_csv_dataset(t.edge_pool_csv, d.train.num_classes);
    } else if (!t.edge_pool_images.empty()) {
      pool = load_mnist_idx(t.edge_pool_images, t.edge_pool_labels, d.train.num_classes);
    } else if (c.data.source == DataSource::synthetic) {
      pool = gen_synthetic_edge_pool(detail::synthetic_spec(c, 0), t.edge_pool_size, t.target_class);
    } else {
      throw ConfigError(ConfigErrorKind::missing_key, "attack.trigger.edge_pool_images",
                        "edge_case on non-synthetic data needs an edge pool file");
    }
    if (pool.num_features != d.train.num_features || pool.size() < 2)
      throw ConfigError(ConfigErrorKind::constraint, "attack.trigger", "edge pool does not match the data shape");
    pool.image_shape = d.train.image_shape;
    auto [tr, te] = detail::split_half(detail::relabel(std::move(pool), t.target_class));
    d.edge_train = std::make_shared<const Dataset>(std::move(tr));
    d.edge_test = std::make_shared<const Dataset>(std::move(te));
  }
  return d;
}

/// The configured trigger in its global (unfragmented) form.
inline TriggerSpec make_static_trigger(const ExperimentConfig& c, const ExperimentData& d) {
  const auto& t = c.attack.trigger;
  const ImageShape shape = d.train.image_shape.value_or(ImageShape{1, d.train.num_features, 1});
  TriggerKind kind = TriggerKind::fixed_pattern;
  if (c.attack.config.attack_kind == AttackKind::optimized_pattern) kind = TriggerKind::optimized_pattern;
  if (c.attack.config.attack_kind == AttackKind::edge_case) kind = TriggerKind::edge_case;
  TriggerSpec spec = square_trigger(static_cast<std::size_t>(t.size), static_cast<std::size_t>(t.row),
                                    static_cast<std::size_t>(t.col), t.value, t.target_class, shape.channels, kind);
  try {
    check_trigger_bounds(spec, shape);
  } catch (const std::out_of_range& e) {
    throw ConfigError(ConfigErrorKind::constraint, "attack.trigger", e.what());
  }
  if (kind == TriggerKind::edge_case) spec.edge_pool = d.edge_train;
  if (c.attack.config.attack_kind == AttackKind::distributed_pattern) {
    try {
      make_fragments(spec, t.n_fragments);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(ConfigErrorKind::constraint, "attack.trigger.n_fragments", e.what());
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Record serialization

namespace detail {

inline Json ids_json(const std::set<int>& s) { return Json(std::vector<int>(s.begin(), s.end())); }

inline std::set<int> ids_from(const Json& j) {
  std::set<int> s;
  for (const auto& v : j) s.insert(v.get<int>());
  return s;
}

template <typename T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline Json detection_to_json(const DetectionReport& r) {
  return Json{{"round", r.round},
              {"selected", detail::ids_json(r.selected)},
              {"flagged", detail::ids_json(r.flagged)},
              {"truth", detail::ids_json(r.truth)}};
}

inline DetectionReport detection_from_json(const Json& j) {
  DetectionReport r;
  r.round = j.at("round").get<int>();
  r.selected = detail::ids_from(j.at("selected"));
  r.flagged = detail::ids_from(j.at("flagged"));
  r.truth = detail::ids_from(j.at("truth"));
  return r;
}

/// Stable key order. "timings" is the only nondeterministic field and is
/// always last so comparisons can drop it.
inline Json record_to_json(const RoundRecord& r, bool with_timings = true) {
  Json j{{"round", r.round},
         {"phase", phase_name(r.phase)},
         {"selected", r.selected},
         {"malicious_selected", r.malicious_selected},
         {"acc", r.acc},
         {"asr", detail::optional_json(r.asr)},
         {"aggregate_norm", r.aggregate_norm},
         {"empty_round", r.empty_round},
         {"dropped_timeouts", r.dropped_timeouts},
         {"failed_clients", r.failed_clients},
         {"trigger_publisher", detail::optional_json(r.trigger_publisher)},
         {"norm_bound", detail::optional_json(r.norm_bound)},
         {"detection", r.detection ? detection_to_json(*r.detection) : Json(nullptr)}};
  if (with_timings) {
    Json clients = Json::array();
    for (const auto& [id, ms] : r.timings.client_ms) clients.push_back(Json::array({id, ms}));
    j["timings"] = Json{{"clients", clients}, {"aggregation_ms", r.timings.aggregation_ms}, {"round_ms", r.timings.round_ms}};
  }
  return j;
}

inline RoundRecord record_from_json(const Json& j) {
  RoundRecord r;
  r.round = j.at("round").get<int>();
  const auto phase = phase_from(j.at("phase").get<std::string>());
  if (!phase) throw std::runtime_error("record_from_json: unknown phase");
  r.phase = *phase;
  r.selected = j.at("selected").get<std::vector<int>>();
  r.malicious_selected = j.at("malicious_selected").get<std::vector<int>>();
  r.acc = j.at("acc").get<double>();
  if (!j.at("asr").is_null()) r.asr = j.at("asr").get<double>();
  r.aggregate_norm = j.at("aggregate_norm").get<double>();
  r.empty_round = j.at("empty_round").get<bool>();
  r.dropped_timeouts = j.at("dropped_timeouts").get<std::vector<int>>();
  r.failed_clients = j.at("failed_clients").get<std::vector<int>>();
  if (!j.at("trigger_publisher").is_null()) r.trigger_publisher = j.at("trigger_publisher").get<int>();
  if (!j.at("norm_bound").is_null()) r.norm_bound = j.at("norm_bound").get<double>();
  if (!j.at("detection").is_null()) r.detection = detection_from_json(j.at("detection"));
  if (j.contains("timings")) {
    const auto& t = j.at("timings");
    for (const auto& c : t.at("clients")) r.timings.client_ms.emplace_back(c[0].get<int>(), c[1].get<std::int64_t>());
    r.timings.aggregation_ms = t.at("aggregation_ms").get<std::int64_t>();
    r.timings.round_ms = t.at("round_ms").get<std::int64_t>();
  }
  return r;
}

/// Rounds.jsonl text with the timing fields removed.
inline std::string strip_timings(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    j.erase("timings");
    out += j.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Summary

inline MetricSummary compute_summary(const ExperimentConfig& c, const std::vector<RoundRecord>& records) {
  MetricSummary s;
  s.t = c.metrics.t;
  s.lifespan_threshold = c.metrics.lifespan_threshold;
  std::vector<double> all, window, post;
  std::vector<DetectionReport> reports;
  for (const auto& r : records) {
    if (r.asr) {
      all.push_back(*r.asr);
      if (r.phase == Phase::attack) window.push_back(*r.asr);
      if (r.phase == Phase::post) post.push_back(*r.asr);
    }
    if (r.detection) reports.push_back(*r.detection);
  }
  if (window.size() >= static_cast<std::size_t>(c.metrics.t)) s.asr_t = asr_t(window, c.metrics.t);
  const auto& scope = c.metrics.h_asr_scope == HAsrScope::all_rounds ? all : window;
  if (!scope.empty()) s.h_asr = h_asr(scope);
  if (c.rounds.post_attack > 0 && !post.empty())
    s.lifespan = lifespan(post, c.metrics.lifespan_threshold, c.metrics.lifespan_mode);
  if (!records.empty()) s.acc_final = records.back().acc;
  if (!reports.empty()) {
    const auto dm = detection_metrics(reports);
    s.precision = dm.precision;
    s.recall = dm.recall;
    s.fpr = dm.fpr;
  }
  return s;
}

inline Json summary_to_json(const MetricSummary& s) {
  using detail::optional_json;
  return Json{{"asr_t", optional_json(s.asr_t)},
              {"h_asr", optional_json(s.h_asr)},
              {"lifespan", optional_json(s.lifespan)},
              {"acc_final", optional_json(s.acc_final)},
              {"precision", optional_json(s.precision)},
              {"recall", optional_json(s.recall)},
              {"fpr", optional_json(s.fpr)},
              {"t", s.t},
              {"lifespan_threshold", s.lifespan_threshold}};
}

/// Fixed-order two-column table; undefined values print as "undefined".
inline std::string format_summary_table(const MetricSummary& s) {
  const auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  const auto row = [&](const std::string& k, const std::string& v) {
    out << k << std::string(k.size() < 20 ? 20 - k.size() : 1, ' ') << v << '\n';
  };
  row("metric", "value");
  row("asr_t (t=" + std::to_string(s.t) + ")", num(s.asr_t));
  row("h_asr", num(s.h_asr));
  row("lifespan", s.lifespan ? std::to_string(*s.lifespan) : "undefined");
  row("acc_final", num(s.acc_final));
  row("precision", num(s.precision));
  row("recall", num(s.recall));
  row("fpr", num(s.fpr));
  return out.str();
}

// ---------------------------------------------------------------------------
// Engine

class RoundError : public std::runtime_error {
 public:
  RoundError(int round, Phase phase, const std::string& what)
      : std::runtime_error("round " + std::to_string(round) + " (" + phase_name(phase) + "): " + what),
        round_(round) {}
  int round() const { return round_; }

 private:
  int round_;
};

class OutputExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::filesystem::path out_dir;      // empty: nothing is written
  bool force = false;                 // replace an existing out_dir
  std::optional<int> resume_from;     // continue after checkpoint round_<n> in out_dir
  std::optional<int> stop_after;      // stop once this round is done (simulated interruption)
  std::function<void(const RoundRecord&)> on_round;
  std::function<void(ClientUpdate&)> tamper;  // applied to every update after training
  std::optional<DetectorFn> detector;         // replaces the configured detector
};

struct ExperimentResult {
  std::vector<RoundRecord> records;
  MetricSummary summary;
  ParamVector final_model;
  std::filesystem::path out_dir;
};

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, RunOptions opts = {})
      : cfg_(std::move(cfg)),
        opts_(std::move(opts)),
        plan_(cfg_.rounds),
        data_(load_experiment_data(cfg_)),
        static_trigger_(make_static_trigger(cfg_, data_)),
        ctx_(static_trigger_),
        pool_(static_cast<std::size_t>(cfg_.workers)) {
    const int m = cfg_.num_malicious();
    // shared mode: every adversary trains on adversary 0's data
    if (cfg_.attack.shared_poison_dataset && m > 0) shared_poison_ = data_.client_data.front();
    if (cfg_.attack.config.attack_kind == AttackKind::distributed_pattern)
      fragments_ = make_fragments(static_trigger_, cfg_.attack.trigger.n_fragments);
    init_state();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentData& data() const { return data_; }
  const PhasePlan& plan() const { return plan_; }
  const ParamVector& global() const { return global_; }
  const TriggerSpec& static_trigger() const { return static_trigger_; }
  int next_round() const { return next_round_; }
  const std::vector<RoundRecord>& records() const { return records_; }

  /// Trigger used for ASR: the latest published (optimized) trigger, or
  /// the configured global pattern.
  TriggerSpec eval_trigger() const { return ctx_.latest(); }

  double evaluate_asr_now() const {
    if (static_trigger_.kind == TriggerKind::edge_case)
      return evaluate_asr(global_, cfg_.model, *data_.edge_test, static_trigger_);
    return evaluate_asr(global_, cfg_.model, data_.test, eval_trigger());
  }

  RoundRecord run_round(int round) {
    const Phase phase = plan_.phase_of(round);
    try {
      return run_round_impl(round, phase);
    } catch (const RoundError&) {
      throw;
    } catch (const std::exception& e) {
      throw RoundError(round, phase, e.what());
    }
  }

  ExperimentResult run() {
    for (int r = next_round_; r < plan_.end; ++r) {
      RoundRecord rec = run_round(r);
      persist_round(rec);
      records_.push_back(std::move(rec));
      next_round_ = r + 1;
      if (opts_.on_round) opts_.on_round(records_.back());
      if (!opts_.out_dir.empty() && (plan_.is_phase_end(r) || (r + 1) % cfg_.checkpoint_every == 0))
        save_checkpoint(r);
      if (opts_.stop_after && r >= *opts_.stop_after) break;
    }
    ExperimentResult res;
    res.records = records_;
    res.summary = compute_summary(cfg_, records_);
    res.final_model = global_;
    res.out_dir = opts_.out_dir;
    if (!opts_.out_dir.empty()) write_text(opts_.out_dir / "summary.json", summary_to_json(res.summary).dump(2) + "\n");
    return res;
  }

 private:
  static std::int64_t ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  }

  static void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    out << text;
  }

  std::uint64_t seed(int round, int client, StreamTag tag) const {
    return derive_seed({cfg_.master_seed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client), tag});
  }

  void init_state() {
    const bool resuming = opts_.resume_from.has_value();
    if (!opts_.out_dir.empty()) prepare_out_dir(resuming);
    if (resuming) {
      restore(*opts_.resume_from);
      return;
    }
    if (!cfg_.pretrained_checkpoint.empty()) {
      global_ = load_params(cfg_.pretrained_checkpoint, cfg_.model.layout());
      next_round_ = plan_.warmup_begin;
    } else {
      global_ = init_model(cfg_.model, cfg_.master_seed);
      next_round_ = 0;
    }
  }

  void prepare_out_dir(bool resuming) {
    namespace fs = std::filesystem;
    const auto& dir = opts_.out_dir;
    const Json cfg_json = config_to_json(cfg_);
    if (resuming) {
      std::ifstream in(dir / "config.json");
      if (!in) throw std::runtime_error("resume: no config.json in '" + dir.string() + "'");
      Json stored = Json::parse(in);
      Json mine = cfg_json;
      stored.erase("workers");
      mine.erase("workers");
      if (stored != mine) throw std::runtime_error("resume: config differs from the one stored in '" + dir.string() + "'");
      return;
    }
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!opts_.force)
        throw OutputExistsError("output directory '" + dir.string() + "' already exists (use --force to replace it)");
      fs::remove_all(dir);
    }
    fs::create_directories(dir / "checkpoints");
    write_text(dir / "config.json", cfg_json.dump(2) + "\n");
    write_text(dir / "rounds.jsonl", "");
    write_text(dir / "detections.jsonl", "");
  }

  void persist_round(const RoundRecord& rec) {
    if (opts_.out_dir.empty()) return;
    {
      std::ofstream out(opts_.out_dir / "rounds.jsonl", std::ios::app);
      out << record_to_json(rec).dump() << '\n';
    }
    if (rec.detection) {
      std::ofstream out(opts_.out_dir / "detections.jsonl", std::ios::app);
      out << detection_to_json(*rec.detection).dump() << '\n';
    }
  }

  // -- checkpoint state ----------------------------------------------------
  // state_<n>.json holds counts and ids; state_<n>.bin holds, in order, the
  // float64 global model, the previous applied step, the FoolsGold histories (ascending id), the
  // warm-up norms and the latest published trigger values, all float64.

  void save_checkpoint(int round) {
    const auto bin = checkpoint_path(opts_.out_dir, round);
    save_params(bin, global_);
    std::vector<double> blob(global_.values().begin(), global_.values().end());
    blob.insert(blob.end(), prev_step_.values().begin(), prev_step_.values().end());
    Json fg_ids = Json::array();
    for (const auto& [id, h] : fg_history_) {
      fg_ids.push_back(id);
      blob.insert(blob.end(), h.values().begin(), h.values().end());
    }
    blob.insert(blob.end(), warmup_norms_.begin(), warmup_norms_.end());
    const auto latest = ctx_.latest_published();
    if (latest)
      for (const auto& p : latest->pixels) blob.push_back(p.value);
    Json state{{"round", round},
               {"prev_step", prev_step_.size()},
               {"foolsgold_ids", fg_ids},
               {"warmup_norms", warmup_norms_.size()},
               {"latest_trigger", latest ? Json(latest->pixels.size()) : Json(nullptr)}};
    const auto dir = opts_.out_dir / "checkpoints";
    write_text(dir / ("state_" + std::to_string(round) + ".json"), state.dump(2) + "\n");
    std::ofstream out(dir / ("state_" + std::to_string(round) + ".bin"), std::ios::binary | std::ios::trunc);
    detail::write_f64_le(out, blob);
  }

  void restore(int round) {
    const auto dir = opts_.out_dir / "checkpoints";
    load_params(checkpoint_path(opts_.out_dir, round), cfg_.model.layout());  // validates the layout
    std::ifstream sin(dir / ("state_" + std::to_string(round) + ".json"));
    if (!sin) throw CheckpointError("resume: no state for round " + std::to_string(round));
    const Json state = Json::parse(sin);
    const auto blob = detail::read_f64_le(dir / ("state_" + std::to_string(round) + ".bin"));
    std::size_t off = 0;
    const auto take = [&](std::size_t n) {
      if (off + n > blob.size()) throw CheckpointError("resume: state blob is truncated");
      std::vector<double> v(blob.begin() + static_cast<std::ptrdiff_t>(off),
                            blob.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
      return v;
    };
    global_ = ParamVector(take(cfg_.model.param_count()), cfg_.model.layout());
    const auto p = state.at("prev_step").get<std::size_t>();
    prev_step_ = p ? ParamVector(take(p), cfg_.model.layout()) : ParamVector();
    for (const auto& id : state.at("foolsgold_ids"))
      fg_history_[id.get<int>()] = ParamVector(take(global_.size()), cfg_.model.layout());
    warmup_norms_ = take(state.at("warmup_norms").get<std::size_t>());
    if (!state.at("latest_trigger").is_null()) {
      TriggerSpec t = static_trigger_;
      const auto vals = take(state.at("latest_trigger").get<std::size_t>());
      if (vals.size() != t.pixels.size()) throw CheckpointError("resume: trigger size mismatch");
      for (std::size_t i = 0; i < vals.size(); ++i) t.pixels[i].value = vals[i];
      ctx_.restore_latest(std::move(t));
    }

    // keep the records up to the checkpoint (last line wins per round) and
    // rewrite the logs
    std::ifstream rin(opts_.out_dir / "rounds.jsonl");
    std::string line;
    std::map<int, RoundRecord> kept;
    while (std::getline(rin, line)) {
      if (line.empty()) continue;
      auto rec = record_from_json(Json::parse(line));
      if (rec.round <= round) kept.insert_or_assign(rec.round, std::move(rec));
    }
    rin.close();
    for (auto& [_, rec] : kept) records_.push_back(std::move(rec));
    write_text(opts_.out_dir / "rounds.jsonl", "");
    write_text(opts_.out_dir / "detections.jsonl", "");
    for (const auto& r : records_) persist_round(r);
    next_round_ = round + 1;
  }

  // -- one round -------------------------------------------------------------

  double current_norm_bound(Phase phase, const std::vector<double>& round_norms) {
    if (cfg_.defense.norm_bound) return *cfg_.defense.norm_bound;
    std::vector<double> v = warmup_norms_;
    if (phase == Phase::warmup || v.empty()) v.insert(v.end(), round_norms.begin(), round_norms.end());
    if (v.empty()) throw std::runtime_error("norm clipping: no update norms to derive the bound from");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  const Dataset& client_dataset(int id, bool malicious) const {
    if (malicious && shared_poison_) return *shared_poison_;
    return data_.client_data[static_cast<std::size_t>(id)];
  }

  /// Trigger optimization by the lowest selected attacker, before dispatch.
  std::optional<int> publish_trigger(int round, int attack_index, const std::vector<int>& attackers) {
    if (attackers.empty() || cfg_.attack.config.attack_kind != AttackKind::optimized_pattern) return std::nullopt;
    const int publisher = attackers.front();
    TriggerSpec t = ctx_.latest();
    if (attack_index % cfg_.attack.config.reoptimize_every == 0 && cfg_.attack.config.trigger_opt_steps > 0) {
      const Dataset& own = client_dataset(publisher, true);
      std::vector<int> idx;
      for (std::size_t i = 0; i < own.size() && idx.size() < cfg_.attack.config.trigger_opt_pool; ++i)
        if (own.labels[i] != t.target_class) idx.push_back(static_cast<int>(i));
      if (!idx.empty())
        t = optimize_trigger(global_, cfg_.model, own.subset(idx), t, cfg_.attack.config.trigger_opt_steps,
                             cfg_.attack.config.trigger_opt_lr)
                .trigger;
    }
    ctx_.publish(round, publisher, std::move(t));
    return publisher;
  }

  RoundRecord run_round_impl(int round, Phase phase) {
    const auto t_round = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = round;
    rec.phase = phase;
    const bool defended = phase != Phase::pretrain;
    const bool attacking = phase == Phase::attack;
    const std::optional<int> attack_index = attacking ? std::optional<int>(round - plan_.attack_begin) : std::nullopt;
    const int m = cfg_.num_malicious();

    Rng sel_rng(seed(round, 0, StreamTag::selection));
    rec.selected = select_round_clients(selection_params(cfg_), attack_index, sel_rng);

    std::vector<int> attackers;
    if (attacking)
      for (int id : rec.selected)
        if (id < m) attackers.push_back(id);

    ctx_.begin_round(round);
    rec.trigger_publisher = publish_trigger(round, attack_index.value_or(0), attackers);
    const TriggerSpec round_trigger = rec.trigger_publisher ? ctx_.fetch(round) : static_trigger_;

    std::optional<CoordinateMask> mask;
    if (!attackers.empty() && cfg_.attack.config.model_poison == ModelPoison::neurotoxin_mask)
      mask = neurotoxin_mask(prev_step_.empty() ? nullptr : &prev_step_, global_.size(), cfg_.attack.config.mask_ratio);

    // per-attacker resolved triggers; fragments are assigned by id
    std::map<int, TriggerSpec> triggers;
    for (int id : attackers)
      triggers[id] = fragments_.empty() ? round_trigger : fragments_[static_cast<std::size_t>(id) % fragments_.size()];

    const TrainConfig mal_tc = cfg_.attack.train.value_or(cfg_.train);
    const bool single_shot = cfg_.selection.scheme == SelectionScheme::single_shot;
    const double gamma = cfg_.gamma();
    const bool ldp = defended && cfg_.defense.ldp_bound > 0.0;

    std::vector<std::function<ClientUpdate()>> tasks;
    for (int id : rec.selected) {
      const bool mal = triggers.count(id) > 0;
      const std::uint64_t s = seed(round, id, StreamTag::shuffle);
      const Dataset& data = client_dataset(id, mal);
      if (mal) {
        const TriggerSpec* trig = &triggers.at(id);
        const CoordinateMask* mk = mask ? &*mask : nullptr;
        tasks.emplace_back([this, id, s, &data, trig, mk, &mal_tc, single_shot, gamma] {
          MaliciousTrainArgs args{trig, mk, gamma, single_shot};
          ClientUpdate u = malicious_train(global_, cfg_.model, data, mal_tc, cfg_.attack.config, args, s);
          u.client_id = id;
          return u;
        });
      } else {
        const std::uint64_t ldp_seed = seed(round, id, StreamTag::ldp);
        tasks.emplace_back([this, id, s, &data, ldp, ldp_seed] {
          ClientUpdate u = local_train(global_, cfg_.model, data, cfg_.train, s);
          u.client_id = id;
          if (ldp) {
            Rng rng(ldp_seed);
            u = client_ldp(std::move(u), cfg_.defense.ldp_bound, cfg_.defense.ldp_sigma, rng);
          }
          return u;
        });
      }
    }

    auto dispatched = dispatch_with_timeout(pool_, std::move(tasks), cfg_.timeout_ms, cfg_.enforce_timeouts);
    std::vector<ClientUpdate> updates;
    for (std::size_t i = 0; i < rec.selected.size(); ++i) {
      const int id = rec.selected[i];
      rec.timings.client_ms.emplace_back(id, dispatched.wall_ms[i]);
      if (dispatched.results[i]) updates.push_back(std::move(*dispatched.results[i]));
    }
    for (auto i : dispatched.dropped) rec.dropped_timeouts.push_back(rec.selected[i]);
    for (auto i : dispatched.failed) rec.failed_clients.push_back(rec.selected[i]);
    if (opts_.tamper)
      for (auto& u : updates) opts_.tamper(u);
    for (const auto& u : updates)
      if (u.truth_is_malicious) rec.malicious_selected.push_back(u.client_id);

    const auto t_agg = std::chrono::steady_clock::now();

    // detection
    if (defended && !updates.empty() && (cfg_.defense.detector != DetectorKind::none || opts_.detector)) {
      const auto views = project(updates);
      std::set<int> truth;
      for (const auto& u : updates)
        if (u.truth_is_malicious) truth.insert(u.client_id);
      const int f = cfg_.defense.detector_f.value_or(static_cast<int>(truth.size()));
      DetectionReport rep;
      if (opts_.detector) {
        rep = (*opts_.detector)(views, round, f);
      } else if (f >= static_cast<int>(views.size())) {
        for (const auto& v : views) rep.selected.insert(v.client_id());
        if (f > 0) rep.flagged = rep.selected;
      } else {
        rep = detector_registry().at(enum_name(cfg_.defense.detector))(views, round, f);
      }
      rep.round = round;
      rep.truth = std::move(truth);
      std::erase_if(updates, [&](const ClientUpdate& u) { return rep.flagged.count(u.client_id) > 0; });
      rec.detection = std::move(rep);
    }

    if (updates.empty()) {
      rec.empty_round = true;
      prev_step_ = ParamVector();
    } else {
      std::vector<double> norms;
      for (const auto& u : updates) norms.push_back(l2_norm(u.delta));
      if (phase == Phase::warmup) warmup_norms_.insert(warmup_norms_.end(), norms.begin(), norms.end());

      const auto views = project(updates);
      const DefenseConfig pretrain_rule{};
      const DefenseConfig& dc = defended ? cfg_.defense : pretrain_rule;
      double bound = 0.0;
      if (dc.rule == AggregationRule::norm_clipping) {
        bound = current_norm_bound(phase, norms);
        rec.norm_bound = bound;
      }
      std::vector<const ParamVector*> hist;
      if (dc.rule == AggregationRule::foolsgold) {
        for (const auto& u : updates) {
          auto it = fg_history_.find(u.client_id);
          if (it == fg_history_.end()) {
            fg_history_.emplace(u.client_id, u.delta);
          } else {
            it->second += u.delta;
          }
        }
        for (const auto& u : updates) hist.push_back(&fg_history_.at(u.client_id));
      }
      AggregateResult agg = aggregate(dc, views, cfg_.server_lr, bound, hist);
      ParamVector step = std::move(agg.delta);
      if (!agg.includes_server_lr) step *= cfg_.server_lr;
      step *= kUpdateSign;
      rec.aggregate_norm = l2_norm(step);
      global_ += step;
      step.set_layout(global_.layout());
      prev_step_ = std::move(step);
      if (defended && dc.rule == AggregationRule::norm_clipping && dc.weakdp_sigma > 0.0) {
        Rng noise(seed(round, 0, StreamTag::noise));
        global_ = post_weakdp(std::move(global_), dc.weakdp_sigma, noise);
      }
    }
    rec.timings.aggregation_ms = ms_since(t_agg);

    rec.acc = evaluate_acc(global_, cfg_.model, data_.test);
    rec.asr = evaluate_asr_now();
    rec.timings.round_ms = ms_since(t_round);
    return rec;
  }

  ExperimentConfig cfg_;
  RunOptions opts_;
  PhasePlan plan_;
  ExperimentData data_;
  TriggerSpec static_trigger_;
  std::vector<TriggerSpec> fragments_;
  std::optional<Dataset> shared_poison_;
  AttackContext ctx_;
  ThreadPool pool_;

  ParamVector global_;
  ParamVector prev_step_;
  std::map<int, ParamVector> fg_history_;
  std::vector<double> warmup_norms_;
  std::vector<RoundRecord> records_;
  int next_round_ = 0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, RunOptions opts = {}) {
  Experiment e(cfg, std::move(opts));
  return e.run();
}

}  // namespace fedbench
