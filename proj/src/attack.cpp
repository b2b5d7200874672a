#include "sbfa/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "sbfa/nnet.hpp"

namespace sbfa {

std::string_view method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::Sbfa:
      return "sbfa";
    case AttackMethod::BfaNoRange:
      return "bfa-no-range";
    case AttackMethod::BfaInRange:
      return "bfa-in-range";
    case AttackMethod::BfaSignOnly:
      return "bfa-sign-only";
  }
  return "?";
}

std::optional<AttackMethod> parse_method(std::string_view name) {
  for (auto m : {AttackMethod::Sbfa, AttackMethod::BfaNoRange, AttackMethod::BfaInRange,
                 AttackMethod::BfaSignOnly}) {
    if (method_name(m) == name) return m;
  }
  return std::nullopt;
}

bool is_range_constrained(AttackMethod m) {
  return m == AttackMethod::Sbfa || m == AttackMethod::BfaInRange;
}

std::string_view termination_name(Termination t) {
  switch (t) {
    case Termination::BelowThreshold:
      return "BELOW_THRESHOLD";
    case Termination::MaxIter:
      return "MAX_ITER";
    case Termination::NumericalError:
      return "NUMERICAL_ERROR";
    case Termination::NoCandidates:
      return "NO_CANDIDATES";
  }
  return "?";
}

std::optional<Termination> parse_termination(std::string_view name) {
  for (auto t : {Termination::BelowThreshold, Termination::MaxIter, Termination::NumericalError,
                 Termination::NoCandidates}) {
    if (termination_name(t) == name) return t;
  }
  return std::nullopt;
}

int exit_code(Termination t) {
  switch (t) {
    case Termination::BelowThreshold:
      return 0;
    case Termination::MaxIter:
    case Termination::NoCandidates:
      return 2;
    case Termination::NumericalError:
      return 3;
  }
  return 2;
}

nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json j;
  j["mode"] = mode_name(c.mode);
  j["method"] = method_name(c.method);
  j["k"] = c.k;
  j["grad_samples"] = c.grad_samples;
  j["eval_samples"] = c.eval_samples;
  j["critical_threshold"] =
      c.critical_threshold ? nlohmann::json(*c.critical_threshold) : nlohmann::json(nullptr);
  j["max_iterations"] = c.max_iterations;
  j["seeds"] = c.seeds;
  j["exclusions"] = c.exclusions;
  j["freeze_range"] = c.freeze_range;
  j["fast_eval"] = c.fast_eval;
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  const auto mode = parse_mode(j.at("mode").get<std::string>());
  const auto method = parse_method(j.at("method").get<std::string>());
  if (!mode || !method) throw std::invalid_argument("bad mode or method in config");
  c.mode = *mode;
  c.method = *method;
  c.k = j.at("k").get<std::size_t>();
  c.grad_samples = j.at("grad_samples").get<int>();
  c.eval_samples = j.at("eval_samples").get<int>();
  if (!j.at("critical_threshold").is_null()) {
    c.critical_threshold = j.at("critical_threshold").get<double>();
  }
  c.max_iterations = j.at("max_iterations").get<int>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.exclusions = j.at("exclusions").get<std::vector<std::string>>();
  c.freeze_range = j.at("freeze_range").get<bool>();
  c.fast_eval = j.at("fast_eval").get<int>();
  return c;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

CandidateRecord describe(const ModelBundle& bundle, const FlipCandidate& c) {
  const TensorMeta& m = bundle.meta(c.ref.tensor);
  return {c, m.name, m.layer_index, m.param_kind, std::nullopt, {}};
}

std::vector<FlipCandidate> rank(const ModelBundle& bundle, const AttackConfig& config,
                                IterationRecord& it) {
  switch (config.method) {
    case AttackMethod::Sbfa: {
      auto r = skip_search(bundle, config.mode, config.k, config.exclusions);
      it.weights_considered = r.stats.weights_considered;
      it.weights_scored = r.stats.weights_scored;
      it.layers_early_broken = r.stats.layers_early_broken;
      return r.queue.entries();
    }
    case AttackMethod::BfaNoRange:
    case AttackMethod::BfaInRange:
    case AttackMethod::BfaSignOnly: {
      const auto variant = config.method == AttackMethod::BfaNoRange ? BaselineVariant::NoRange
                           : config.method == AttackMethod::BfaInRange
                               ? BaselineVariant::InRange
                               : BaselineVariant::SignOnly;
      // Classic progressive BFA: the single best-ranked flip per iteration.
      auto q = baseline_rank(bundle, config.mode, variant, 1, config.exclusions);
      for (std::size_t t : bundle.targets(config.mode, config.exclusions)) {
        it.weights_considered += bundle.effective(t).size();
      }
      it.weights_scored = it.weights_considered;
      return q.entries();
    }
  }
  return {};
}

}  // namespace

std::vector<CandidateRecord> evaluate_candidates(const ModelBundle& bundle,
                                                 std::span<const FlipCandidate> candidates,
                                                 const Batch& eval, int num_classes, int workers) {
  std::vector<CandidateRecord> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(describe(bundle, c));

  const auto sweep = [&](std::size_t first, std::size_t stride) {
    ModelBundle local = bundle;
    local.clear_gradients();
    const Network net(local.architecture());
    for (std::size_t i = first; i < candidates.size(); i += stride) {
      const UndoToken token = local.apply_flip(candidates[i].ref, candidates[i].bit_position);
      try {
        out[i].accuracy = accuracy(net, params_of(local), eval, num_classes);
      } catch (const NumericalRuntimeError& e) {
        out[i].error_tensor = e.tensor();
      }
      local.undo(token);
    }
  };

  const auto n = static_cast<std::size_t>(std::max(1, workers));
  if (n == 1 || candidates.size() < 2) {
    sweep(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(sweep, w, n);
    for (auto& t : pool) t.join();
  }
  return out;
}

TaskSplits attack_splits(const TaskSpec& task, const AttackConfig& config, std::uint64_t seed) {
  TaskSpec sized = task;
  sized.train_samples = 0;
  sized.grad_samples = config.grad_samples;
  sized.eval_samples = config.eval_samples;
  return generate_splits(sized, seed);
}

AttackReport run_attack(const ModelBundle& input, const TaskSpec& task, const AttackConfig& config,
                        std::uint64_t seed) {
  if (config.max_iterations < 0 || config.grad_samples <= 0 || config.eval_samples <= 0) {
    throw std::invalid_argument("attack budgets must be positive");
  }
  if (input.architecture().input_dim != task.input_dim ||
      input.architecture().num_outputs < task.num_classes) {
    throw std::invalid_argument("task '" + task.name + "' does not fit the bundle architecture");
  }

  AttackReport report;
  report.config = to_json(config);
  report.task = task.name;
  report.seed = seed;
  report.threshold = config.critical_threshold.value_or(task.chance_level());
  if (!(report.threshold > 0.0 && report.threshold < 1.0)) {
    throw std::invalid_argument("critical threshold must lie in (0, 1)");
  }

  auto t0 = Clock::now();
  ModelBundle bundle = input;
  bundle.set_freeze_stats(config.freeze_range);
  const TaskSplits splits = attack_splits(task, config, seed);
  const Batch sweep_eval =
      config.fast_eval > 0 ? splits.eval.head(static_cast<std::size_t>(config.fast_eval))
                           : splits.eval;
  const int classes = task.num_classes;
  // Throws before any flip only if the input bundle is already broken.
  report.pre_acc = evaluate(bundle, splits.eval, classes);
  report.post_acc = report.pre_acc;
  report.timings.setup = seconds_since(t0);

  const bool constrained = is_range_constrained(config.method);
  std::optional<Termination> termination;
  for (int iter = 1; iter <= config.max_iterations && !termination; ++iter) {
    if (report.post_acc < report.threshold) break;

    IterationRecord it;
    it.iteration = iter;
    t0 = Clock::now();
    try {
      it.loss = compute_gradients(bundle, splits.grad, classes);
    } catch (const NumericalRuntimeError& e) {
      report.error_tensor = e.tensor();
      termination = Termination::NumericalError;
      break;
    }
    report.timings.gradient += seconds_since(t0);

    t0 = Clock::now();
    const std::vector<FlipCandidate> ranked = rank(bundle, config, it);
    report.timings.rank += seconds_since(t0);
    if (ranked.empty()) {
      termination = Termination::NoCandidates;
      break;
    }

    // Range in force for this iteration's audit.
    std::map<std::size_t, LayerStats> start_stats;
    for (const auto& c : ranked) start_stats.emplace(c.ref.tensor, bundle.stats(c.ref.tensor));
    const auto audit = [&](const FlipCandidate& c) {
      if (constrained && !in_layer_range(c.new_value, start_stats.at(c.ref.tensor))) {
        ++report.audit_violations;
      }
    };

    t0 = Clock::now();
    if (config.method == AttackMethod::Sbfa) {
      const std::uint32_t before = bundle.content_checksum();
      it.candidates = evaluate_candidates(bundle, ranked, sweep_eval, classes, config.workers);
      if (bundle.content_checksum() != before) {
        throw std::logic_error("candidate sweep left the bundle modified");
      }
      for (const auto& c : it.candidates) audit(c.flip);
      // Lowest accuracy wins, first in queue order on ties.
      for (std::size_t i = 0; i < it.candidates.size(); ++i) {
        const auto& acc = it.candidates[i].accuracy;
        if (!acc) continue;
        if (!it.chosen || *acc < *it.candidates[*it.chosen].accuracy) it.chosen = i;
      }
    } else {
      it.candidates.push_back(describe(bundle, ranked.front()));
      it.chosen = 0;
    }
    report.timings.evaluate += seconds_since(t0);

    if (!it.chosen) {
      report.iterations.push_back(std::move(it));
      termination = Termination::NoCandidates;
      break;
    }

    CandidateRecord& chosen = it.candidates[*it.chosen];
    audit(chosen.flip);
    bundle.apply_flip(chosen.flip.ref, chosen.flip.bit_position);
    bundle.clear_gradients();
    t0 = Clock::now();
    try {
      if (!std::isfinite(bundle.effective_value(chosen.flip.ref))) {
        throw NumericalRuntimeError(chosen.tensor);
      }
      it.accuracy_after = evaluate(bundle, splits.eval, classes);
      if (config.method != AttackMethod::Sbfa) chosen.accuracy = it.accuracy_after;
    } catch (const NumericalRuntimeError& e) {
      chosen.error_tensor = e.tensor();
      report.error_tensor = e.tensor();
      termination = Termination::NumericalError;
    }
    report.timings.evaluate += seconds_since(t0);

    report.applied.push_back(chosen);
    if (!termination) report.post_acc = it.accuracy_after;
    report.iterations.push_back(std::move(it));
  }

  if (!termination) {
    termination = report.post_acc < report.threshold ? Termination::BelowThreshold
                                                     : Termination::MaxIter;
  }
  report.termination = *termination;
  report.crit_1flip_count = census_from_report(report).count;
  return report;
}

MultiRun run_seeds(const ModelBundle& bundle, const TaskSpec& task, const AttackConfig& config) {
  if (config.seeds.empty()) throw std::invalid_argument("at least one seed is required");
  MultiRun m;
  for (std::uint64_t seed : config.seeds) {
    m.runs.push_back(run_attack(bundle, task, config, seed));
    const AttackReport& r = m.runs.back();
    const AttackReport& best = m.runs[m.best];
    if (r.post_acc < best.post_acc ||
        (r.post_acc == best.post_acc && r.flip_count() < best.flip_count())) {
      m.best = m.runs.size() - 1;
    }
  }
  return m;
}

std::string CensusResult::label() const { return failed() ? "F" : std::to_string(count); }

CensusResult census_from_report(const AttackReport& report) {
  CensusResult out;
  if (report.iterations.empty()) return out;
  const auto& first = report.iterations.front();
  for (std::size_t i = 0; i < first.candidates.size(); ++i) {
    const auto& rec = first.candidates[i];
    const bool critical = rec.accuracy && *rec.accuracy < report.threshold;
    out.rows.push_back({i + 1, rec, critical});
    if (critical) ++out.count;
  }
  return out;
}

CensusResult census_crit_1flip(const ModelBundle& bundle, const TaskSpec& task,
                               const AttackConfig& config, std::uint64_t seed) {
  // One sweep without the permanent flip: an SBFA iteration's candidate
  // evaluation is exactly what the census reads.
  AttackConfig one = config;
  one.method = AttackMethod::Sbfa;
  const TaskSplits splits = attack_splits(task, config, seed);
  const Batch sweep_eval =
      config.fast_eval > 0 ? splits.eval.head(static_cast<std::size_t>(config.fast_eval))
                           : splits.eval;

  ModelBundle work = bundle;
  compute_gradients(work, splits.grad, task.num_classes);
  IterationRecord it;
  it.iteration = 1;
  const auto ranked = rank(work, one, it);
  it.candidates = evaluate_candidates(work, ranked, sweep_eval, task.num_classes, config.workers);

  AttackReport r;
  r.threshold = config.critical_threshold.value_or(task.chance_level());
  r.iterations.push_back(std::move(it));
  return census_from_report(r);
}

std::vector<DistributionRow> distribution_report(const CensusResult& census) {
  std::map<std::pair<int, std::string>, std::size_t> counts;
  for (const auto& row : census.rows) {
    if (row.critical) ++counts[{row.record.layer_index, row.record.param_kind}];
  }
  std::vector<DistributionRow> out;
  for (const auto& [key, n] : counts) out.push_back({key.first, key.second, n});
  return out;
}

std::vector<TransferResult> transfer_eval(const ModelBundle& pre_attack,
                                          std::span<const CandidateRecord> flips,
                                          const std::vector<TaskSpec>& tasks,
                                          const AttackConfig& config, std::uint64_t seed) {
  const Architecture& arch = pre_attack.architecture();
  for (const auto& t : tasks) {
    if (t.input_dim != arch.input_dim || t.num_classes > arch.num_outputs) {
      throw std::invalid_argument("task '" + t.name + "' does not match the bundle architecture");
    }
  }
  ModelBundle attacked = pre_attack;
  for (const auto& f : flips) {
    const auto id = attacked.find(f.tensor);
    if (!id) throw std::invalid_argument("flip targets unknown tensor '" + f.tensor + "'");
    attacked.apply_flip({*id, f.flip.ref.index}, f.flip.bit_position);
  }

  std::vector<TransferResult> out;
  for (const auto& t : tasks) {
    const auto splits = attack_splits(t, config, seed);
    TransferResult r{t.name, evaluate(pre_attack, splits.eval, t.num_classes), 0.0};
    try {
      r.post_acc = evaluate(attacked, splits.eval, t.num_classes);
    } catch (const NumericalRuntimeError&) {
      r.post_acc = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace sbfa
