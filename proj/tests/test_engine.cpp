#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "fedbench/fedbench.hpp"

using namespace fedbench;
namespace fs = std::filesystem;

namespace {

// 30 clients, 10 per round, 3 malicious; small synthetic data.
ExperimentConfig small_config(std::vector<std::string> sets = {}) {
  std::vector<std::string> base{"num_clients=30", "data.synthetic.n_train=1500", "data.synthetic.n_test=400",
                                "data.synthetic.image_shape=[8,8,1]", "train.local_epochs=1", "train.batch_size=32",
                                "master_seed=7"};
  base.insert(base.end(), sets.begin(), sets.end());
  return parse_config_text(R"({"model": {"layer_sizes": [64, 16, 10]}})", base);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("fedbench_engine_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool same_bits(const ParamVector& a, const ParamVector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Selection

TEST(Selection, RandomSamplingDrawsDistinctIds) {
  SelectionParams p{SelectionScheme::random_sampling, 100, 10, 10, 5, 0};
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = select_round_clients(p, trial % 2 ? std::optional<int>(trial) : std::nullopt, rng);
    ASSERT_EQ(s.size(), 10u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    EXPECT_GE(s.front(), 0);
    EXPECT_LT(s.back(), 100);
  }
}

TEST(Selection, SingleShotDesignatedRoundIsTheMaliciousSet) {
  SelectionParams p{SelectionScheme::single_shot, 100, 10, 10, 5, 3};
  Rng rng(2);
  std::vector<int> mal(10);
  std::iota(mal.begin(), mal.end(), 0);
  EXPECT_EQ(select_round_clients(p, 3, rng), mal);
  for (int a : {0, 1, 2, 4, 20}) {
    const auto s = select_round_clients(p, a, rng);
    EXPECT_GE(s.front(), 10) << "attacker outside the designated round " << a;
  }
  p.clients_per_round = 9;
  EXPECT_THROW(select_round_clients(p, 3, rng), std::invalid_argument);
}

TEST(Selection, FixedFrequencyForcesOneAttackerEveryFRounds) {
  SelectionParams p{SelectionScheme::fixed_frequency, 100, 10, 10, 5, 0};
  Rng rng(3);
  for (int a = 0; a < 60; ++a) {
    const auto s = select_round_clients(p, a, rng);
    const auto n_mal = std::count_if(s.begin(), s.end(), [](int id) { return id < 10; });
    EXPECT_EQ(n_mal, a % 5 == 0 ? 1 : 0) << a;
  }
}

TEST(Selection, ContinuousIncludesEveryAttacker) {
  SelectionParams p{SelectionScheme::continuous, 30, 10, 3, 5, 0};
  Rng rng(4);
  for (int a = 0; a < 20; ++a) {
    const auto s = select_round_clients(p, a, rng);
    ASSERT_EQ(s.size(), 10u);
    EXPECT_EQ(std::vector<int>(s.begin(), s.begin() + 3), (std::vector<int>{0, 1, 2}));
  }
}

TEST(Selection, OutsideTheWindowEveryIdIsReachable) {
  SelectionParams p{SelectionScheme::continuous, 20, 5, 2, 5, 0};
  Rng rng(5);
  std::set<int> seen;
  for (int r = 0; r < 200; ++r)
    for (int id : select_round_clients(p, std::nullopt, rng)) seen.insert(id);
  EXPECT_EQ(seen.size(), 20u);
}

// ---------------------------------------------------------------------------
// Phases and the update rule

TEST(Engine, PhasesFollowThePlanWithAutoWarmup) {
  const auto cfg = small_config({"rounds.pretrain=20", "rounds.attack_window=3", "rounds.post_attack=2",
                                 "train.local_epochs=1", "data.max_samples_per_client=20"});
  PhasePlan plan(cfg.rounds);
  EXPECT_EQ(plan.attack_begin - plan.warmup_begin, 3);
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.records.size(), 28u);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.phase, plan.phase_of(r.round));
    EXPECT_TRUE(r.asr.has_value());
    for (int id : r.malicious_selected) {
      EXPECT_TRUE(std::binary_search(r.selected.begin(), r.selected.end(), id));
      EXPECT_EQ(r.phase, Phase::attack);
    }
  }
  EXPECT_EQ(res.records[20].phase, Phase::warmup);
  EXPECT_EQ(res.records[23].phase, Phase::attack);
  EXPECT_EQ(res.records[26].phase, Phase::post);
}

TEST(Engine, FedAvgRoundIsGlobalPlusMeanDelta) {
  const auto cfg = small_config({"rounds.pretrain=1"});
  Experiment e(cfg);
  const ParamVector before = e.global();
  const auto rec = e.run_round(0);
  ParamVector expect = before;
  std::vector<ParamVector> deltas;
  for (int id : rec.selected) {
    const auto s = derive_seed({cfg.master_seed, 0, static_cast<std::uint64_t>(id), StreamTag::shuffle});
    deltas.push_back(local_train(before, cfg.model, e.data().client_data[static_cast<std::size_t>(id)], cfg.train, s).delta);
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    long double sum = 0.0L;
    for (const auto& d : deltas) sum += d[i];
    expect[i] += static_cast<double>(sum / static_cast<long double>(deltas.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(expect[i] - e.global()[i]));
  EXPECT_LT(worst, 1e-12);
  EXPECT_GT(rec.aggregate_norm, 0.0);
  EXPECT_TRUE(rec.malicious_selected.empty());
}

TEST(Engine, ReplacementRoundLandsOnTheAttackerModel) {
  for (const double eta : {1.0, 0.5}) {
    // one attacker; benign clients cannot move (learning rate 0)
    const auto cfg = small_config({"malicious_fraction=0.03", "rounds.warmup=0", "rounds.attack_window=1",
                                   "selection.scheme=single_shot", "train.learning_rate=0",
                                   "attack.train={\"learning_rate\": 0.1}", "server_lr=" + Json(eta).dump()});
    ASSERT_EQ(cfg.num_malicious(), 1);
    Experiment e(cfg);
    const ParamVector before = e.global();
    const auto rec = e.run_round(0);
    ASSERT_EQ(rec.malicious_selected, std::vector<int>{0});
    const auto seed = derive_seed({cfg.master_seed, 0, 0, StreamTag::shuffle});
    const TriggerSpec trig = e.static_trigger();
    MaliciousTrainArgs args{&trig, nullptr, 1.0, false};
    const auto raw = malicious_train(before, cfg.model, e.data().client_data[0], *cfg.attack.train,
                                     cfg.attack.config, args, seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i)
      worst = std::max(worst, std::abs(e.global()[i] - (before[i] + raw.delta[i])));
    EXPECT_LT(worst, 1e-10) << "eta " << eta;
    EXPECT_GT(l2_norm(raw.delta), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Detection plumbing

TEST(Engine, DetectorFlaggingEveryoneLeavesTheModelUnchanged) {
  const auto cfg = small_config({"rounds.warmup=2"});
  RunOptions opts;
  opts.detector = [](std::span<const UpdateView> u, int, int) {
    DetectionReport r;
    for (const auto& v : u) r.selected.insert(v.client_id());
    r.flagged = r.selected;
    return r;
  };
  Experiment e(cfg, opts);
  const ParamVector before = e.global();
  const auto rec = e.run_round(0);
  EXPECT_TRUE(rec.empty_round);
  EXPECT_TRUE(same_bits(before, e.global()));
  EXPECT_EQ(rec.aggregate_norm, 0.0);
  ASSERT_TRUE(rec.detection);
  EXPECT_EQ(rec.detection->flagged.size(), 10u);
}

TEST(Engine, FlaggedSentinelsNeverReachAggregation) {
  constexpr double kSentinel = 1e9;
  for (const char* rule : {"fedavg", "median", "trimmed_mean", "krum", "multi_krum", "rfa", "foolsgold", "rlr",
                           "norm_clipping"}) {
    const auto cfg = small_config({"rounds.warmup=1", std::string("defense.rule=") + rule, "defense.krum_m=3"});
    RunOptions opts;
    int sentinel_id = -1;
    opts.tamper = [&](ClientUpdate& u) {
      if (sentinel_id < 0) sentinel_id = u.client_id;
      if (u.client_id == sentinel_id)
        for (std::size_t i = 0; i < u.delta.size(); ++i) u.delta[i] = kSentinel;
    };
    opts.detector = [&](std::span<const UpdateView> u, int, int) {
      DetectionReport r;
      for (const auto& v : u) r.selected.insert(v.client_id());
      r.flagged = {sentinel_id};
      return r;
    };
    Experiment e(cfg, opts);
    const ParamVector before = e.global();
    const auto rec = e.run_round(0);
    ASSERT_FALSE(rec.empty_round) << rule;
    double worst = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) worst = std::max(worst, std::abs(e.global()[i] - before[i]));
    EXPECT_LT(worst, 1e3) << rule;
    EXPECT_LT(rec.aggregate_norm, 1e3) << rule;
  }
}

TEST(Engine, KnownFDetectorScoresAScaledRound) {
  // single-shot replacement against the MKrum detector: the scaled updates
  // stand out, so the round is scored perfectly
  const auto cfg = small_config({"rounds.pretrain=3", "rounds.warmup=2", "rounds.attack_window=1",
                                 "selection.scheme=single_shot", "defense.detector=mkrum_detector"});
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.records.size(), 6u);
  const auto& attack = res.records.back();
  ASSERT_TRUE(attack.detection);
  EXPECT_EQ(attack.detection->truth, (std::set<int>{0, 1, 2}));
  EXPECT_EQ(attack.detection->flagged, (std::set<int>{0, 1, 2}));
  EXPECT_EQ(res.summary.precision, 1.0);
  EXPECT_EQ(res.summary.recall, 1.0);
  EXPECT_EQ(res.summary.fpr, 0.0);
  EXPECT_FALSE(res.records[0].detection) << "no detection before warm-up";
}

// ---------------------------------------------------------------------------
// Determinism and resume

TEST(Engine, WorkerCountDoesNotChangeResults) {
  TempDir tmp;
  const std::vector<std::string> sets{"rounds.pretrain=4", "rounds.warmup=2", "rounds.attack_window=4",
                                      "rounds.post_attack=2", "defense.rule=norm_clipping",
                                      "attack.model_poison=neurotoxin_mask"};
  std::optional<ParamVector> ref_model;
  std::string ref_rounds, ref_summary, ref_ckpt;
  for (int workers : {1, 4, 8}) {
    auto s = sets;
    s.push_back("workers=" + std::to_string(workers));
    RunOptions opts;
    opts.out_dir = tmp.path / ("w" + std::to_string(workers));
    const auto res = run_experiment(small_config(s), opts);
    const auto rounds = strip_timings(slurp(opts.out_dir / "rounds.jsonl"));
    const auto summary = slurp(opts.out_dir / "summary.json");
    const auto ckpt = slurp(checkpoint_path(opts.out_dir, 11));
    ASSERT_FALSE(ckpt.empty());
    if (!ref_model) {
      ref_model = res.final_model;
      ref_rounds = rounds;
      ref_summary = summary;
      ref_ckpt = ckpt;
      continue;
    }
    EXPECT_TRUE(same_bits(*ref_model, res.final_model)) << workers;
    EXPECT_EQ(rounds, ref_rounds) << workers;
    EXPECT_EQ(summary, ref_summary) << workers;
    EXPECT_EQ(ckpt, ref_ckpt) << workers;
  }
}

class ResumeTest : public ::testing::TestWithParam<std::vector<std::string>> {};

TEST_P(ResumeTest, ResumedRunMatchesUninterruptedRun) {
  TempDir tmp;
  auto sets = GetParam();
  sets.insert(sets.end(), {"rounds.pretrain=4", "rounds.warmup=3", "rounds.attack_window=6", "rounds.post_attack=3",
                           "checkpoint_every=5"});
  const auto cfg = small_config(sets);

  RunOptions full;
  full.out_dir = tmp.path / "full";
  const auto ref = run_experiment(cfg, full);

  // interrupt after round 9 (checkpoint_every), mid attack window
  RunOptions part;
  part.out_dir = tmp.path / "part";
  part.stop_after = 9;
  const auto first = run_experiment(cfg, part);
  ASSERT_EQ(first.records.size(), 10u);
  // stale lines (a repeated round, a round past the checkpoint) must not
  // survive the resume
  {
    auto stale = first.records.back();
    std::ofstream out(part.out_dir / "rounds.jsonl", std::ios::app);
    out << record_to_json(stale).dump() << '\n';
    stale.round = 10;
    stale.acc = -1.0;
    out << record_to_json(stale).dump() << '\n';
  }

  auto resumed_cfg = cfg;
  resumed_cfg.workers = 2;
  RunOptions resume;
  resume.out_dir = part.out_dir;
  resume.resume_from = 9;
  const auto res = run_experiment(resumed_cfg, resume);

  EXPECT_TRUE(same_bits(ref.final_model, res.final_model));
  EXPECT_EQ(strip_timings(slurp(full.out_dir / "rounds.jsonl")), strip_timings(slurp(part.out_dir / "rounds.jsonl")));
  EXPECT_EQ(slurp(full.out_dir / "detections.jsonl"), slurp(part.out_dir / "detections.jsonl"));
  EXPECT_EQ(slurp(full.out_dir / "summary.json"), slurp(part.out_dir / "summary.json"));
  EXPECT_EQ(res.records.size(), ref.records.size());
}

INSTANTIATE_TEST_SUITE_P(
    Engine, ResumeTest,
    ::testing::Values(std::vector<std::string>{"defense.rule=norm_clipping", "attack.model_poison=neurotoxin_mask"},
                      std::vector<std::string>{"defense.rule=foolsgold", "attack.kind=optimized_pattern",
                                               "attack.trigger_opt_steps=2", "defense.detector=mkrum_detector"},
                      std::vector<std::string>{"defense.rule=rlr", "defense.rlr_threshold=2",
                                               "attack.kind=distributed_pattern", "selection.scheme=continuous"}));

TEST(Engine, ResumeRejectsADifferentConfig) {
  TempDir tmp;
  const auto cfg = small_config({"rounds.pretrain=5"});
  RunOptions opts;
  opts.out_dir = tmp.path / "run";
  opts.stop_after = 4;
  run_experiment(cfg, opts);
  RunOptions resume;
  resume.out_dir = opts.out_dir;
  resume.resume_from = 4;
  EXPECT_THROW(run_experiment(small_config({"rounds.pretrain=5", "server_lr=0.5"}), resume), std::runtime_error);
  resume.resume_from = 3;  // no checkpoint for that round
  EXPECT_THROW(run_experiment(cfg, resume), std::exception);
}

TEST(Engine, ExistingOutputNeedsForce) {
  TempDir tmp;
  const auto cfg = small_config({"rounds.pretrain=1"});
  RunOptions opts;
  opts.out_dir = tmp.path / "run";
  run_experiment(cfg, opts);
  EXPECT_THROW(run_experiment(cfg, opts), OutputExistsError);
  opts.force = true;
  EXPECT_NO_THROW(run_experiment(cfg, opts));
  EXPECT_TRUE(fs::exists(opts.out_dir / "summary.json"));
  EXPECT_TRUE(fs::exists(opts.out_dir / "checkpoints" / "round_0.bin"));
  EXPECT_TRUE(fs::exists(opts.out_dir / "checkpoints" / "round_0.layout"));
}

TEST(Engine, RoundErrorsCarryTheRound) {
  // trimming 2*5 of 10 updates leaves nothing to average
  auto cfg = small_config({"rounds.pretrain=1", "rounds.warmup=1", "defense.rule=trimmed_mean", "defense.trim_k=5"});
  try {
    run_experiment(cfg);
    FAIL() << "expected a RoundError";
  } catch (const RoundError& e) {
    EXPECT_EQ(e.round(), 1);
    EXPECT_NE(std::string(e.what()).find("round 1 (warmup)"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Control runs

TEST(Engine, NoAttackControlStaysNearBaseline) {
  const auto cfg = small_config({"rounds.pretrain=40", "rounds.warmup=0", "train.local_epochs=2"});
  const auto res = run_experiment(cfg);
  double late = 0.0;
  for (const auto& r : res.records) {
    ASSERT_TRUE(r.asr);
    EXPECT_TRUE(r.malicious_selected.empty());
    if (r.round >= 25) late += *r.asr;
  }
  EXPECT_GT(res.records.back().acc, 0.95);
  // once converged, triggered non-target inputs keep their own class
  EXPECT_LT(late / 15.0, 0.05);
  EXPECT_FALSE(res.summary.asr_t);
  EXPECT_FALSE(res.summary.lifespan);
  EXPECT_TRUE(res.summary.h_asr);
}

TEST(Engine, PretrainedCheckpointSkipsPretraining) {
  TempDir tmp;
  const auto cfg = small_config({"rounds.pretrain=3"});
  RunOptions opts;
  opts.out_dir = tmp.path / "pre";
  const auto pre = run_experiment(cfg, opts);
  auto next = small_config({"rounds.pretrain=3", "rounds.warmup=2",
                            "pretrained_checkpoint=\"" + checkpoint_path(opts.out_dir, 2).string() + "\""});
  const auto res = run_experiment(next);
  ASSERT_EQ(res.records.size(), 2u);
  EXPECT_EQ(res.records.front().round, 3);
  EXPECT_EQ(res.records.front().phase, Phase::warmup);
}

// ---------------------------------------------------------------------------
// Dispatch

TEST(Dispatch, TimeoutsAreDroppedOnlyWhenEnforced) {
  ThreadPool pool(2);
  const auto make = [] {
    std::vector<std::function<int()>> tasks;
    tasks.emplace_back([] { return 1; });
    tasks.emplace_back([] {
      std::this_thread::sleep_for(std::chrono::milliseconds(120));
      return 2;
    });
    tasks.emplace_back([]() -> int { throw std::runtime_error("worker crashed"); });
    tasks.emplace_back([] { return 4; });
    return tasks;
  };
  const auto lax = dispatch_with_timeout(pool, make(), std::int64_t{20}, false);
  EXPECT_TRUE(lax.dropped.empty());
  EXPECT_EQ(lax.wall_ms.size(), 4u);
  EXPECT_EQ(lax.results[1], 2);
  EXPECT_GE(lax.wall_ms[1], 100);
  EXPECT_EQ(lax.failed, std::vector<std::size_t>{2});
  EXPECT_EQ(lax.errors, std::vector<std::string>{"worker crashed"});

  const auto strict = dispatch_with_timeout(pool, make(), std::int64_t{20}, true);
  EXPECT_EQ(strict.dropped, std::vector<std::size_t>{1});
  EXPECT_FALSE(strict.results[1]);
  EXPECT_EQ(strict.results[0], 1);
  EXPECT_EQ(strict.results[3], 4);
  EXPECT_EQ(strict.failed, std::vector<std::size_t>{2});

  const auto untimed = dispatch_with_timeout(pool, make(), std::nullopt, true);
  EXPECT_TRUE(untimed.dropped.empty());
}

TEST(Dispatch, EngineRecordsTimingsForEveryClient) {
  auto cfg = small_config({"rounds.pretrain=2", "workers=3"});
  const auto res = run_experiment(cfg);
  for (const auto& r : res.records) {
    ASSERT_EQ(r.timings.client_ms.size(), r.selected.size());
    for (std::size_t i = 0; i < r.selected.size(); ++i) EXPECT_EQ(r.timings.client_ms[i].first, r.selected[i]);
    EXPECT_TRUE(r.dropped_timeouts.empty());
  }
}

TEST(Records, JsonRoundTripAndStableKeys) {
  RoundRecord r;
  r.round = 12;
  r.phase = Phase::attack;
  r.selected = {0, 4, 9};
  r.malicious_selected = {0};
  r.acc = 0.875;
  r.asr = 0.25;
  r.aggregate_norm = 1.5;
  DetectionReport d;
  d.round = 12;
  d.selected = {0, 4, 9};
  d.flagged = {0};
  d.truth = {0};
  r.detection = d;
  r.norm_bound = 2.0;
  r.timings.client_ms = {{0, 3}, {4, 5}, {9, 1}};
  const Json j = record_to_json(r);
  EXPECT_EQ(j.items().begin().key(), "round");
  EXPECT_EQ((--j.end()).key(), "timings");
  const RoundRecord back = record_from_json(j);
  EXPECT_EQ(record_to_json(back), j);
  EXPECT_EQ(strip_timings(j.dump() + "\n"), record_to_json(r, false).dump() + "\n");
}
