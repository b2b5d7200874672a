#include "sbfa/tasks.hpp"

#include <fstream>
#include <random>
#include <stdexcept>

namespace sbfa {

Batch Batch::head(std::size_t n) const {
  n = std::min(n, size());
  Batch b;
  b.input_dim = input_dim;
  b.inputs.assign(inputs.begin(),
                  inputs.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(input_dim)));
  b.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return b;
}

namespace {

std::vector<double> class_means(const TaskSpec& task) {
  std::seed_seq seq{task.seed, std::uint64_t{0x6d65616e73}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> means(static_cast<std::size_t>(task.num_classes * task.input_dim));
  for (double& m : means) m = task.separation * normal(rng);
  return means;
}

Batch draw(const TaskSpec& task, const std::vector<double>& means, std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> label_dist(0, task.num_classes - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Batch b;
  b.input_dim = task.input_dim;
  b.labels.reserve(static_cast<std::size_t>(n));
  b.inputs.reserve(static_cast<std::size_t>(n * task.input_dim));
  for (int i = 0; i < n; ++i) {
    const int y = label_dist(rng);
    b.labels.push_back(y);
    for (int d = 0; d < task.input_dim; ++d) {
      b.inputs.push_back(means[static_cast<std::size_t>(y * task.input_dim + d)] +
                         task.noise * normal(rng));
    }
  }
  return b;
}

}  // namespace

TaskSplits generate_splits(const TaskSpec& task, std::uint64_t sample_seed) {
  if (task.num_classes < 2 || task.input_dim <= 0) {
    throw std::invalid_argument("task '" + task.name + "' is malformed");
  }
  const auto means = class_means(task);
  std::seed_seq seq{task.seed, sample_seed, std::uint64_t{0x73706c6974}};
  std::mt19937_64 rng(seq);
  TaskSplits s;
  s.train = draw(task, means, rng, task.train_samples);
  s.grad = draw(task, means, rng, task.grad_samples);
  s.eval = draw(task, means, rng, task.eval_samples);
  return s;
}

std::vector<TaskSpec> default_tasks(int input_dim, std::uint64_t seed) {
  TaskSpec four{"toy-mmlu", 4, input_dim, seed * 3 + 1};
  TaskSpec two{"toy-sst2", 2, input_dim, seed * 3 + 2};
  TaskSpec held{"toy-arc", 4, input_dim, seed * 3 + 3};
  four.separation = 1.0;
  two.separation = 1.0;
  held.separation = 1.0;
  return {four, two, held};
}

nlohmann::json to_json(const TaskSpec& t) {
  return {{"name", t.name},
          {"num_classes", t.num_classes},
          {"input_dim", t.input_dim},
          {"seed", t.seed},
          {"separation", t.separation},
          {"noise", t.noise},
          {"train_samples", t.train_samples},
          {"grad_samples", t.grad_samples},
          {"eval_samples", t.eval_samples},
          {"chance_level", t.chance_level()}};
}

TaskSpec task_from_json(const nlohmann::json& j) {
  TaskSpec t;
  t.name = j.at("name").get<std::string>();
  t.num_classes = j.at("num_classes").get<int>();
  t.input_dim = j.at("input_dim").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.separation = j.value("separation", 1.0);
  t.noise = j.value("noise", 1.0);
  t.train_samples = j.value("train_samples", 2000);
  t.grad_samples = j.value("grad_samples", 200);
  t.eval_samples = j.value("eval_samples", 100);
  return t;
}

void save_tasks(const std::filesystem::path& path, const std::vector<TaskSpec>& tasks,
                const nlohmann::json& provenance) {
  nlohmann::json j;
  j["provenance"] = provenance;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) j["tasks"].push_back(to_json(t));
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

std::vector<TaskSpec> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task file " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    std::vector<TaskSpec> out;
    for (const auto& t : j.at("tasks")) out.push_back(task_from_json(t));
    return out;
  } catch (const std::exception& e) {
    throw std::runtime_error("malformed task file " + path.string() + ": " + e.what());
  }
}

const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, const std::string& name) {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

}  // namespace sbfa
