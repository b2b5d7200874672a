#pragma once

// The iterative attack loop and the analyses built on its records.
//
// One iteration:
//   1. gradients of the mean loss on the gradient split
//   2. rank flip candidates (pruned top-K, or a baseline ranker)
//   3. evaluate every candidate on the eval split (flip, evaluate, undo)
//   4. apply the candidate with the lowest post-flip accuracy permanently
// until accuracy falls below the critical threshold, the iteration budget
// runs out, or the model state becomes non-finite.
//
// Candidate evaluation runs on per-worker copies of the bundle; results are
// merged in queue order, so reports do not depend on the worker count.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbfa/bundle.hpp"
#include "sbfa/impact.hpp"
#include "sbfa/search.hpp"
#include "sbfa/tasks.hpp"

namespace sbfa {

enum class AttackMethod { Sbfa, BfaNoRange, BfaInRange, BfaSignOnly };

std::string_view method_name(AttackMethod m);
std::optional<AttackMethod> parse_method(std::string_view name);
/// Methods whose flips must satisfy the layer range constraint.
bool is_range_constrained(AttackMethod m);

enum class Termination { BelowThreshold, MaxIter, NumericalError, NoCandidates };

std::string_view termination_name(Termination t);
std::optional<Termination> parse_termination(std::string_view name);
/// 0 below threshold, 2 budget exhausted (or nothing left to flip),
/// 3 numerical error.
int exit_code(Termination t);

struct AttackConfig {
  AttackMode mode = AttackMode::Float;
  AttackMethod method = AttackMethod::Sbfa;
  std::size_t k = 100;
  int grad_samples = 200;
  int eval_samples = 100;
  // Defaults to the task's chance level.
  std::optional<double> critical_threshold;
  int max_iterations = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> exclusions;
  bool freeze_range = false;
  // Evaluate candidates on the first N eval samples only (0 = all).
  int fast_eval = 0;
  int workers = 1;
};

nlohmann::json to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct CandidateRecord {
  FlipCandidate flip;
  std::string tensor;
  int layer_index = 0;
  std::string param_kind;
  // Empty when evaluation raised a numerical error.
  std::optional<double> accuracy;
  std::string error_tensor;
};

struct IterationRecord {
  int iteration = 0;
  double loss = 0.0;
  std::size_t weights_considered = 0;
  std::size_t weights_scored = 0;
  std::size_t layers_early_broken = 0;
  std::vector<CandidateRecord> candidates;
  std::optional<std::size_t> chosen;
  double accuracy_after = 0.0;
};

struct PhaseTimings {
  double setup = 0.0;
  double gradient = 0.0;
  double rank = 0.0;
  double evaluate = 0.0;
};

struct TransferResult {
  std::string task;
  double pre_acc = 0.0;
  double post_acc = 0.0;
};

struct AttackReport {
  nlohmann::json config;
  std::string task;
  std::uint64_t seed = 0;
  double threshold = 0.0;
  double pre_acc = 0.0;
  double post_acc = 0.0;
  std::vector<IterationRecord> iterations;
  std::vector<CandidateRecord> applied;
  std::size_t crit_1flip_count = 0;
  Termination termination = Termination::MaxIter;
  std::string error_tensor;
  // Flips (evaluated or applied) that broke the range constraint in force
  // when they were evaluated. Always zero for range-constrained methods.
  std::size_t audit_violations = 0;
  std::vector<TransferResult> transfer;
  // Wall-clock measurements; not part of the persisted report.
  PhaseTimings timings;

  std::size_t flip_count() const { return applied.size(); }
};

/// Gradient and eval splits an attack with `seed` draws for `task`.
TaskSplits attack_splits(const TaskSpec& task, const AttackConfig& config, std::uint64_t seed);

/// Runs one attack on a copy of `bundle`.
AttackReport run_attack(const ModelBundle& bundle, const TaskSpec& task,
                        const AttackConfig& config, std::uint64_t seed);

struct MultiRun {
  std::vector<AttackReport> runs;
  std::size_t best = 0;
};

/// One run per configured seed; best = lowest post_acc, then fewest flips,
/// then first seed.
MultiRun run_seeds(const ModelBundle& bundle, const TaskSpec& task, const AttackConfig& config);

/// Flips every candidate in turn on a private copy of `bundle` and records
/// its accuracy on `eval`. The input bundle is not modified.
std::vector<CandidateRecord> evaluate_candidates(const ModelBundle& bundle,
                                                 std::span<const FlipCandidate> candidates,
                                                 const Batch& eval, int num_classes, int workers);

struct CensusRow {
  std::size_t rank = 0;
  CandidateRecord record;
  bool critical = false;
};

struct CensusResult {
  std::size_t count = 0;
  std::vector<CensusRow> rows;

  bool failed() const { return count == 0; }
  /// The count, or "F" when no single flip crosses the threshold.
  std::string label() const;
};

/// Single-flip census over the first iteration's candidate evaluations.
CensusResult census_from_report(const AttackReport& report);

/// Runs a first-iteration candidate sweep (no flip applied) and counts the
/// candidates that push accuracy below the threshold on their own.
CensusResult census_crit_1flip(const ModelBundle& bundle, const TaskSpec& task,
                               const AttackConfig& config, std::uint64_t seed);

struct DistributionRow {
  int layer_index = 0;
  std::string param_kind;
  std::size_t count = 0;
};

/// Critical-flip counts per (layer_index, param_kind), sorted by key.
std::vector<DistributionRow> distribution_report(const CensusResult& census);

/// Applies `flips` to a copy of the pre-attack bundle and evaluates every
/// task before and after. Rejects tasks the architecture cannot serve.
std::vector<TransferResult> transfer_eval(const ModelBundle& pre_attack,
                                          std::span<const CandidateRecord> flips,
                                          const std::vector<TaskSpec>& tasks,
                                          const AttackConfig& config, std::uint64_t seed);

}  // namespace sbfa
