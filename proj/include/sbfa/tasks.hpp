#pragma once

// Synthetic Gaussian-mixture classification tasks standing in for real
// benchmarks. Task data is never stored; it is regenerated from seeds.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sbfa {

struct TaskSpec {
  std::string name;
  int num_classes = 2;
  int input_dim = 0;
  // Seeds the class means; fixed per task.
  std::uint64_t seed = 0;
  double separation = 1.0;
  double noise = 1.0;
  int train_samples = 2000;
  int grad_samples = 200;
  int eval_samples = 100;

  double chance_level() const { return 1.0 / num_classes; }
};

struct Batch {
  int input_dim = 0;
  std::vector<double> inputs;  // row-major, size() x input_dim
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return {inputs.data() + i * static_cast<std::size_t>(input_dim),
            static_cast<std::size_t>(input_dim)};
  }
  /// First n samples.
  Batch head(std::size_t n) const;
};

struct TaskSplits {
  Batch train;
  Batch grad;
  Batch eval;
};

/// Draws train, grad and eval splits as consecutive, non-overlapping
/// segments of one sample stream keyed by (task seed, sample_seed).
TaskSplits generate_splits(const TaskSpec& task, std::uint64_t sample_seed);

/// The bundled suite: a 4-class task, a 2-class task and a second 4-class
/// mixture used for transfer checks.
std::vector<TaskSpec> default_tasks(int input_dim, std::uint64_t seed);

nlohmann::json to_json(const TaskSpec& task);
TaskSpec task_from_json(const nlohmann::json& j);

void save_tasks(const std::filesystem::path& path, const std::vector<TaskSpec>& tasks,
                const nlohmann::json& provenance);
std::vector<TaskSpec> load_tasks(const std::filesystem::path& path);
const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, const std::string& name);

}  // namespace sbfa
