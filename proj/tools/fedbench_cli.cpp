// fedbench: run, export, partition and validate experiments.
//
// Output root defaults to $FEDBENCH_OUT_ROOT, else ./runs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedbench/fedbench.hpp"

namespace fs = std::filesystem;
using namespace fedbench;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, CommonArgs& a) {
  app->add_option("--config", a.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("--set", a.sets, "override key=value (dotted path, repeatable)");
  app->add_option("--workers", a.workers, "worker threads");
  app->add_option("--seed", a.seed, "master seed");
}

ExperimentConfig load(const CommonArgs& a) {
  auto sets = a.sets;
  if (a.workers) sets.push_back("workers=" + std::to_string(*a.workers));
  if (a.seed) sets.push_back("master_seed=" + std::to_string(*a.seed));
  return parse_config(a.config, sets);
}

const char* kind_name(ConfigErrorKind k) {
  switch (k) {
    case ConfigErrorKind::parse: return "parse error";
    case ConfigErrorKind::unknown_key: return "unknown key";
    case ConfigErrorKind::missing_key: return "missing key";
    case ConfigErrorKind::type_mismatch: return "type mismatch";
    case ConfigErrorKind::constraint: return "constraint violation";
  }
  return "error";
}

fs::path default_out_root() {
  const char* env = std::getenv("FEDBENCH_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string num(double v) { return Json(v).dump(); }

int cmd_run(const CommonArgs& a, const std::string& out, bool force, std::optional<int> resume) {
  const ExperimentConfig cfg = load(a);
  RunOptions opts;
  opts.out_dir = out.empty() ? default_out_root() / cfg.name : fs::path(out);
  opts.force = force;
  opts.resume_from = resume;
  opts.on_round = [](const RoundRecord& r) {
    std::cerr << "round " << r.round << " [" << phase_name(r.phase) << "] acc=" << num(r.acc)
              << " asr=" << (r.asr ? num(*r.asr) : "-") << " malicious=" << r.malicious_selected.size()
              << (r.empty_round ? " empty" : "") << " " << r.timings.round_ms << "ms\n";
  };
  const auto res = run_experiment(cfg, opts);
  std::cout << format_summary_table(res.summary);
  std::cout << "output: " << res.out_dir.string() << "\n";
  return 0;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << text;
}

int cmd_export(const std::string& run_dir, const std::string& what, const std::string& out) {
  const fs::path dir(run_dir);
  std::ifstream in(dir / "rounds.jsonl");
  if (!in) throw std::runtime_error("missing rounds.jsonl in '" + run_dir + "'");
  std::vector<RoundRecord> records;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) records.push_back(record_from_json(Json::parse(line)));

  const fs::path dest = out.empty() ? dir : fs::path(out);
  fs::create_directories(dest);
  const bool all = what == "all";
  if (all || what == "asr") {
    std::string s = "round,phase,value\n";
    for (const auto& r : records)
      s += std::to_string(r.round) + "," + phase_name(r.phase) + "," + (r.asr ? num(*r.asr) : "") + "\n";
    write_file(dest / "asr_series.csv", s);
  }
  if (all || what == "acc") {
    std::string s = "round,phase,value\n";
    for (const auto& r : records) s += std::to_string(r.round) + "," + phase_name(r.phase) + "," + num(r.acc) + "\n";
    write_file(dest / "acc_series.csv", s);
  }
  if (all || what == "detections") {
    std::string s = "round,client_id,flagged,malicious\n";
    for (const auto& r : records) {
      if (!r.detection) continue;
      for (int id : r.detection->selected)
        s += std::to_string(r.round) + "," + std::to_string(id) + "," +
             (r.detection->flagged.count(id) ? "1" : "0") + "," + (r.detection->truth.count(id) ? "1" : "0") + "\n";
    }
    write_file(dest / "detections.csv", s);
  }
  return 0;
}

int cmd_partition(const CommonArgs& a, const std::string& out) {
  const ExperimentConfig cfg = load(a);
  const ExperimentData data = load_experiment_data(cfg);
  std::ostringstream s;
  s << "client_id,sample_index,label\n";
  for (std::size_t k = 0; k < data.partition.assignments.size(); ++k)
    for (int i : data.partition.assignments[k])
      s << k << "," << i << "," << data.train.labels[static_cast<std::size_t>(i)] << "\n";
  if (out.empty()) {
    std::cout << s.str();
  } else {
    write_file(out, s.str());
  }
  return 0;
}

int cmd_validate(const CommonArgs& a, bool print) {
  const ExperimentConfig cfg = load(a);
  if (print) {
    std::cout << config_to_json(cfg).dump(2) << "\n";
    return 0;
  }
  std::cout << "ok: " << cfg.name << " (" << PhasePlan(cfg.rounds).end << " rounds, " << cfg.num_malicious()
            << " malicious of " << cfg.num_clients << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated backdoor attack/defense simulator"};
  app.require_subcommand(1);

  CommonArgs run_args, part_args, val_args;
  std::string run_out, part_out, export_dir, export_what = "all", export_out;
  bool force = false;
  std::optional<int> resume;

  auto* run = app.add_subcommand("run", "run an experiment");
  add_common(run, run_args);
  run->add_option("--out", run_out, "output directory (default: $FEDBENCH_OUT_ROOT/<name> or runs/<name>)");
  run->add_flag("--force", force, "replace an existing output directory");
  run->add_option("--resume", resume, "continue after checkpoint round_<n> in the output directory");

  auto* exp = app.add_subcommand("export", "export CSV series from a run directory");
  exp->add_option("run_dir", export_dir, "run directory")->required();
  exp->add_option("--what", export_what, "asr, acc, detections or all")
      ->check(CLI::IsMember({"asr", "acc", "detections", "all"}));
  exp->add_option("--out", export_out, "destination directory (default: the run directory)");

  auto* part = app.add_subcommand("partition", "write the client partition as CSV");
  add_common(part, part_args);
  part->add_option("--out", part_out, "CSV path (default: stdout)");

  auto* val = app.add_subcommand("validate", "check a config without running it");
  add_common(val, val_args);
  bool print_config = false;
  val->add_flag("--print", print_config, "print the fully resolved config as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args, run_out, force, resume);
    if (*exp) return cmd_export(export_dir, export_what, export_out);
    if (*part) return cmd_partition(part_args, part_out);
    if (*val) return cmd_validate(val_args, print_config);
  } catch (const ConfigError& e) {
    std::cerr << "config " << kind_name(e.kind()) << ": " << e.what() << "\n";
    return 2;
  } catch (const OutputExistsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
