#pragma once

#include <cstdint>
#include <vector>

#include "sbfa/bundle.hpp"
#include "sbfa/nnet.hpp"
#include "sbfa/tasks.hpp"

namespace sbfa {

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 0.05;
  int batch_size = 16;
  std::uint64_t seed = 1;
};

/// Float64 parameters drawn from N(0, 1/fan_in); norm gains start at 1 and
/// biases at 0.
std::vector<std::vector<double>> init_params(const Architecture& arch, std::uint64_t seed);

/// Plain minibatch SGD with a fixed learning rate on the union of the train
/// splits of `tasks` (each sample scored against its own task's classes).
/// Returns the final epoch's mean loss.
double train(const Network& net, std::vector<std::vector<double>>& params,
             const std::vector<TaskSpec>& tasks, const TrainConfig& config);

/// Encodes float64 parameters into a bundle of the given storage format.
ModelBundle make_bundle(const Architecture& arch, const std::vector<std::vector<double>>& params,
                        Format format);

struct ToyModel {
  ModelBundle bundle;
  std::vector<TaskSpec> tasks;
  // Per task, accuracy of the stored bundle on the eval split of sample seed 0.
  std::vector<double> eval_accuracy;
};

/// Trains a competent victim on the default task suite.
ToyModel train_toy(const Architecture& arch, Format format, const TrainConfig& config);

/// Architectures shipped with the CLI.
Architecture toy_mlp(int input_dim = 16, std::vector<int> hidden = {32, 32}, int outputs = 4);
Architecture toy_attention(int tokens = 4, int token_dim = 4, int model_dim = 24,
                           int ffn_dim = 48, int outputs = 4);

}  // namespace sbfa
