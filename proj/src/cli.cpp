#include "sbfa/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "sbfa/attack.hpp"
#include "sbfa/bundle.hpp"
#include "sbfa/report_io.hpp"
#include "sbfa/tasks.hpp"
#include "sbfa/train.hpp"

namespace sbfa {

namespace {

namespace fs = std::filesystem;

constexpr const char* kCsvHelp = R"(Output files (every CSV starts with a "# config=<json>" line):
  report.json       full attack record, one per seed directory
  timings.json      wall-clock phase timings of that run
  flips.csv         iteration,tensor,layer_index,param_kind,flat_index,bit,
                    old_value,new_value,delta,impact_score,accuracy_after
  census.csv        rank,tensor,layer_index,param_kind,flat_index,bit,delta,
                    impact_score,post_flip_accuracy,critical
  distribution.csv  layer_index,param_kind,count
  transfer.csv      task,pre_acc,post_acc
  timings.csv       phase,description,seconds
  summary.csv       seed,pre_acc,post_acc,flip_count,crit_1flip_count,
                    termination,best

Exit codes: 0 below threshold, 2 iteration budget exhausted, 3 numerical
error, 64 usage error, 65 I/O or format error.
Environment: SBFA_OUT_DIR sets the default output directory.)";

// Errors caused by bad arguments rather than bad files.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

fs::path default_out_dir() {
  if (const char* env = std::getenv("SBFA_OUT_DIR"); env && *env) return env;
  return "sbfa-out";
}

template <typename T>
T require(std::optional<T> value, const std::string& what, const std::string& given) {
  if (!value) throw UsageError(fmt::format("unknown {} '{}'", what, given));
  return *value;
}

struct Common {
  int verbosity = 1;
  void log(int level, const std::string& msg) const {
    if (verbosity >= level) std::cerr << msg << '\n';
  }
};

struct TrainArgs {
  std::string arch = "mlp";
  std::string format = "bf16";
  std::vector<int> hidden{32, 32};
  std::uint64_t seed = 1;
  TrainConfig train;
  std::string out;
};

struct AttackArgs {
  std::string bundle;
  std::string tasks;
  std::string task = "toy-mmlu";
  std::string mode = "float";
  std::string method = "sbfa";
  std::optional<double> threshold;
  std::vector<std::string> transfer_tasks;
  AttackConfig config;
  std::string out;
};

void add_attack_options(CLI::App* app, AttackArgs& a) {
  app->add_option("--bundle", a.bundle, "Bundle manifest")->required();
  app->add_option("--tasks", a.tasks, "Task spec file")->required();
  app->add_option("--task", a.task, "Task to attack")->capture_default_str();
  app->add_option("--mode", a.mode, "float | int8 | mixed")->capture_default_str();
  app->add_option("--method", a.method, "sbfa | bfa-no-range | bfa-in-range | bfa-sign-only")
      ->capture_default_str();
  app->add_option("--k", a.config.k, "Candidates evaluated per iteration")->capture_default_str();
  app->add_option("--threshold", a.threshold, "Critical accuracy (default: chance level)");
  app->add_option("--seeds", a.config.seeds, "Attack seeds")->delimiter(',')->capture_default_str();
  app->add_option("--max-iter", a.config.max_iterations, "Iteration budget")
      ->capture_default_str();
  app->add_option("--grad-samples", a.config.grad_samples, "Gradient split size")
      ->capture_default_str();
  app->add_option("--eval-samples", a.config.eval_samples, "Eval split size")
      ->capture_default_str();
  app->add_option("--exclude", a.config.exclusions, "Tensor name glob to skip (repeatable)");
  app->add_flag("--freeze-range", a.config.freeze_range,
                "Keep each layer's [min, max] fixed at its pre-attack value");
  app->add_option("--fast-eval", a.config.fast_eval,
                  "Evaluate candidates on the first N eval samples only (0 = all)")
      ->capture_default_str();
  app->add_option("--workers", a.config.workers, "Threads for candidate evaluation")
      ->capture_default_str();
  app->add_option("--out", a.out, "Output directory (default: $SBFA_OUT_DIR or sbfa-out)");
}

AttackConfig resolve(AttackArgs& a) {
  AttackConfig c = a.config;
  c.mode = require(parse_mode(a.mode), "mode", a.mode);
  c.method = require(parse_method(a.method), "method", a.method);
  c.critical_threshold = a.threshold;
  if (c.k == 0) throw UsageError("--k must be positive");
  if (c.seeds.empty()) throw UsageError("--seeds must list at least one seed");
  if (c.workers < 1) throw UsageError("--workers must be at least 1");
  if (c.fast_eval < 0) throw UsageError("--fast-eval must be non-negative");
  return c;
}

fs::path out_dir(const std::string& flag) { return flag.empty() ? default_out_dir() : fs::path(flag); }

std::vector<TaskSpec> fitting_tasks(const std::vector<TaskSpec>& tasks, const Architecture& arch,
                                    const std::vector<std::string>& names) {
  std::vector<TaskSpec> out;
  if (!names.empty()) {
    for (const auto& n : names) out.push_back(find_task(tasks, n));
    return out;
  }
  for (const auto& t : tasks) {
    if (t.input_dim == arch.input_dim && t.num_classes <= arch.num_outputs) out.push_back(t);
  }
  return out;
}

int cmd_train(const TrainArgs& a, const Common& common) {
  const Format format = require(parse_format(a.format), "format", a.format);
  Architecture arch;
  if (a.arch == "mlp") {
    arch = toy_mlp(16, a.hidden);
  } else if (a.arch == "attention") {
    arch = toy_attention();
  } else {
    throw UsageError("unknown architecture '" + a.arch + "'");
  }
  TrainConfig cfg = a.train;
  cfg.seed = a.seed;
  const ToyModel model = train_toy(arch, format, cfg);

  const fs::path dir = out_dir(a.out);
  fs::create_directories(dir);
  save_bundle(model.bundle, dir / "model.json");
  save_tasks(dir / "tasks.json", model.tasks, model.bundle.provenance);
  for (std::size_t i = 0; i < model.tasks.size(); ++i) {
    common.log(1, fmt::format("{}: eval accuracy {}", model.tasks[i].name,
                              model.eval_accuracy[i]));
  }
  common.log(1, fmt::format("wrote {} and {}", (dir / "model.json").string(),
                            (dir / "tasks.json").string()));
  return 0;
}

int cmd_quantize(const std::string& in, const std::string& out, const Common& common) {
  const ModelBundle q = quantize_int8(load_bundle(in));
  fs::create_directories(fs::path(out).parent_path().empty() ? fs::path(".")
                                                               : fs::path(out).parent_path());
  save_bundle(q, out);
  common.log(1, "wrote " + out);
  return 0;
}

int cmd_attack(AttackArgs& a, const Common& common) {
  const AttackConfig config = resolve(a);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelBundle bundle = load_bundle(a.bundle);
  const auto tasks = load_tasks(a.tasks);
  const TaskSpec& task = find_task(tasks, a.task);
  const double load_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto transfer_set = fitting_tasks(tasks, bundle.architecture(), a.transfer_tasks);

  MultiRun multi = run_seeds(bundle, task, config);
  const fs::path dir = out_dir(a.out);
  fs::create_directories(dir);
  std::string summary = fmt::format(
      "# config={}\nseed,pre_acc,post_acc,flip_count,crit_1flip_count,termination,best\n",
      to_json(config).dump());
  nlohmann::ordered_json sj;
  sj["config"] = nlohmann::ordered_json::parse(to_json(config).dump());
  sj["task"] = task.name;
  sj["runs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < multi.runs.size(); ++i) {
    AttackReport& r = multi.runs[i];
    r.timings.setup += load_seconds;
    r.transfer = transfer_eval(bundle, r.applied, transfer_set, config, r.seed);
    const std::string sub = fmt::format("seed-{}", r.seed);
    write_report_dir(dir / sub, r);
    const bool best = i == multi.best;
    summary += fmt::format("{},{},{},{},{},{},{}\n", r.seed, r.pre_acc, r.post_acc,
                           r.flip_count(), r.crit_1flip_count, termination_name(r.termination),
                           best ? 1 : 0);
    sj["runs"].push_back({{"seed", r.seed},
                          {"dir", sub},
                          {"pre_acc", r.pre_acc},
                          {"post_acc", r.post_acc},
                          {"flip_count", r.flip_count()},
                          {"crit_1flip_count", r.crit_1flip_count},
                          {"termination", std::string(termination_name(r.termination))}});
    common.log(1, fmt::format("seed {}: {} -> {} after {} flips ({}), crit_1flip={}", r.seed,
                              r.pre_acc, r.post_acc, r.flip_count(),
                              termination_name(r.termination), r.crit_1flip_count));
  }
  const AttackReport& best = multi.runs[multi.best];
  sj["best_seed"] = best.seed;
  write_text(dir / "summary.csv", summary);
  write_text(dir / "summary.json", sj.dump(2) + "\n");
  return exit_code(best.termination);
}

int cmd_census(const std::string& dir_flag, AttackArgs& a, bool fresh, const Common& common) {
  const fs::path dir = out_dir(dir_flag);
  if (!fresh) {
    // Reuses the persisted first-iteration sweep; nothing is re-evaluated.
    const AttackReport r = read_report(dir);
    write_text(dir / "census.csv", census_csv(r));
    write_text(dir / "distribution.csv", distribution_csv(r));
    const CensusResult c = census_from_report(r);
    std::cout << "crit_1flip_count " << c.label() << '\n';
    common.log(2, fmt::format("{} candidates examined", c.rows.size()));
    return 0;
  }
  const AttackConfig config = resolve(a);
  const ModelBundle bundle = load_bundle(a.bundle);
  const auto tasks = load_tasks(a.tasks);
  const TaskSpec& task = find_task(tasks, a.task);
  const CensusResult c = census_crit_1flip(bundle, task, config, config.seeds.front());
  AttackReport r;
  r.config = to_json(config);
  r.task = task.name;
  r.seed = config.seeds.front();
  r.threshold = config.critical_threshold.value_or(task.chance_level());
  IterationRecord it;
  it.iteration = 1;
  for (const auto& row : c.rows) it.candidates.push_back(row.record);
  r.iterations.push_back(std::move(it));
  fs::create_directories(dir);
  write_text(dir / "census.csv", census_csv(r));
  write_text(dir / "distribution.csv", distribution_csv(r));
  std::cout << "crit_1flip_count " << c.label() << '\n';
  return 0;
}

int cmd_transfer(const std::string& bundle_path, const std::string& tasks_path,
                 const std::string& report_dir, const std::vector<std::string>& names,
                 const std::string& out, const Common& common) {
  const ModelBundle bundle = load_bundle(bundle_path);
  const auto tasks = load_tasks(tasks_path);
  AttackReport r = read_report(report_dir);
  const AttackConfig config = attack_config_from_json(r.config);
  r.transfer = transfer_eval(bundle, r.applied, fitting_tasks(tasks, bundle.architecture(), names),
                             config, r.seed);
  const fs::path dir = out.empty() ? fs::path(report_dir) : fs::path(out);
  fs::create_directories(dir);
  write_text(dir / "transfer.csv", transfer_csv(r));
  for (const auto& t : r.transfer) {
    common.log(1, fmt::format("{}: {} -> {}", t.task, t.pre_acc, t.post_acc));
  }
  return 0;
}

int cmd_report(const std::string& dir_flag, const Common& common) {
  const fs::path dir = out_dir(dir_flag);
  if (!fs::is_directory(dir)) throw std::runtime_error("no such directory " + dir.string());
  std::vector<fs::path> targets;
  if (fs::exists(dir / "report.json")) targets.push_back(dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "report.json")) targets.push_back(e.path());
  }
  if (targets.empty()) throw std::runtime_error("no report.json under " + dir.string());
  std::sort(targets.begin(), targets.end());
  for (const auto& t : targets) {
    regenerate_csvs(t);
    common.log(1, "regenerated " + t.string());
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Sneaky bit-flip attack toolkit", "sbfa"};
  app.footer(kCsvHelp);
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a TOML/INI file; explicit flags win");

  Common common;
  bool quiet = false;
  int verbose = 0;
  app.add_flag("-q,--quiet", quiet, "Only print errors");
  app.add_flag("-v,--verbose", verbose, "More logging (repeatable)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train-toy", "Train a toy victim and write bundle + tasks");
  train_cmd->add_option("--arch", train.arch, "mlp | attention")->capture_default_str();
  train_cmd->add_option("--format", train.format, "bf16 | fp16 | fp32")->capture_default_str();
  train_cmd->add_option("--hidden", train.hidden, "MLP hidden widths")
      ->delimiter(',')
      ->capture_default_str();
  train_cmd->add_option("--seed", train.seed, "Training seed")->capture_default_str();
  train_cmd->add_option("--epochs", train.train.epochs, "SGD epochs")->capture_default_str();
  train_cmd->add_option("--lr", train.train.learning_rate, "Learning rate")
      ->capture_default_str();
  train_cmd->add_option("--out", train.out, "Output directory");

  std::string q_in;
  std::string q_out;
  auto* quant_cmd = app.add_subcommand("quantize", "Quantize a float bundle to INT8");
  quant_cmd->add_option("--bundle", q_in, "Input manifest")->required();
  quant_cmd->add_option("--out", q_out, "Output manifest")->required();

  AttackArgs attack;
  auto* attack_cmd = app.add_subcommand("attack", "Run the attack once per seed");
  add_attack_options(attack_cmd, attack);
  attack_cmd->add_option("--transfer-task", attack.transfer_tasks,
                         "Tasks for transfer.csv (default: every task the model serves)");

  std::string census_dir;
  AttackArgs census;
  bool census_fresh = false;
  auto* census_cmd = app.add_subcommand(
      "census", "Count single flips that cross the threshold (reuses --dir/report.json)");
  census_cmd->add_option("--dir", census_dir, "Seed directory of a finished attack");
  census_cmd->add_option("--bundle", census.bundle, "Bundle manifest (fresh sweep)");
  census_cmd->add_option("--tasks", census.tasks, "Task spec file (fresh sweep)");
  census_cmd->add_option("--task", census.task, "Task")->capture_default_str();
  census_cmd->add_option("--mode", census.mode, "float | int8 | mixed")->capture_default_str();
  census_cmd->add_option("--k", census.config.k, "Candidates")->capture_default_str();
  census_cmd->add_option("--threshold", census.threshold, "Critical accuracy");
  census_cmd->add_option("--seeds", census.config.seeds, "First seed is used")->delimiter(',');
  census_cmd->add_option("--eval-samples", census.config.eval_samples, "Eval split size");
  census_cmd->add_option("--grad-samples", census.config.grad_samples, "Gradient split size");
  census_cmd->add_option("--exclude", census.config.exclusions, "Tensor name glob to skip");
  census_cmd->add_option("--workers", census.config.workers, "Threads");
  census_cmd->add_flag("--fresh", census_fresh, "Run a new sweep instead of reading a report");

  std::string t_bundle;
  std::string t_tasks;
  std::string t_report;
  std::string t_out;
  std::vector<std::string> t_names;
  auto* transfer_cmd = app.add_subcommand("transfer", "Evaluate a report's flips on other tasks");
  transfer_cmd->add_option("--bundle", t_bundle, "Pre-attack bundle manifest")->required();
  transfer_cmd->add_option("--tasks", t_tasks, "Task spec file")->required();
  transfer_cmd->add_option("--report", t_report, "Seed directory holding report.json")
      ->required();
  transfer_cmd->add_option("--task", t_names, "Tasks to evaluate (default: all that fit)");
  transfer_cmd->add_option("--out", t_out, "Output directory (default: the report directory)");

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Regenerate every CSV from report.json");
  report_cmd->add_option("--dir", report_dir, "Attack output or seed directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  common.verbosity = quiet ? 0 : 1 + verbose;

  try {
    if (*train_cmd) return cmd_train(train, common);
    if (*quant_cmd) return cmd_quantize(q_in, q_out, common);
    if (*attack_cmd) return cmd_attack(attack, common);
    if (*census_cmd) {
      if (census_fresh && (census.bundle.empty() || census.tasks.empty())) {
        throw UsageError("--fresh needs --bundle and --tasks");
      }
      return cmd_census(census_dir, census, census_fresh, common);
    }
    if (*transfer_cmd) return cmd_transfer(t_bundle, t_tasks, t_report, t_names, t_out, common);
    if (*report_cmd) return cmd_report(report_dir, common);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace sbfa
