#include "sbfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sbfa {

std::vector<std::vector<double>> init_params(const Architecture& arch, std::uint64_t seed) {
  std::seed_seq seq{seed, std::uint64_t{0x696e6974}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> params;
  for (const auto& info : parameter_layout(arch)) {
    std::size_t n = 1;
    for (auto d : info.shape) n *= d;
    std::vector<double> w(n, 0.0);
    if (info.shape.size() >= 2) {
      const double stdev = 1.0 / std::sqrt(static_cast<double>(info.shape[1]));
      for (double& v : w) v = stdev * normal(rng);
    } else if (info.param_kind.ends_with("norm.weight")) {
      std::fill(w.begin(), w.end(), 1.0);
    }
    params.push_back(std::move(w));
  }
  return params;
}

double train(const Network& net, std::vector<std::vector<double>>& params,
             const std::vector<TaskSpec>& tasks, const TrainConfig& config) {
  struct Sample {
    const Batch* batch;
    std::size_t row;
    int classes;
  };
  std::vector<TaskSplits> splits;
  splits.reserve(tasks.size());
  for (const auto& t : tasks) splits.push_back(generate_splits(t, 0));
  std::vector<Sample> samples;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (std::size_t i = 0; i < splits[t].train.size(); ++i) {
      samples.push_back({&splits[t].train, i, tasks[t].num_classes});
    }
  }

  std::mt19937_64 rng(config.seed);
  double epoch_loss = 0.0;
  const auto bs = static_cast<std::size_t>(std::max(1, config.batch_size));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(samples.begin(), samples.end(), rng);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += bs) {
      const std::size_t end = std::min(samples.size(), start + bs);
      GradSet grads = zero_grads(net.architecture());
      const ParamSet view = params_of(params);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = samples[i];
        epoch_loss += net.backward(view, s.batch->row(s.row), s.batch->labels[s.row], s.classes,
                                   scale, grads);
      }
      for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t k = 0; k < params[t].size(); ++k) {
          params[t][k] -= config.learning_rate * grads[t][k];
        }
      }
    }
    epoch_loss /= static_cast<double>(samples.size());
  }
  return epoch_loss;
}

ModelBundle make_bundle(const Architecture& arch, const std::vector<std::vector<double>>& params,
                        Format format) {
  const auto layout = parameter_layout(arch);
  if (params.size() != layout.size()) throw BundleError("parameter count does not match layout");
  ModelBundle bundle(arch);
  for (std::size_t t = 0; t < layout.size(); ++t) {
    TensorMeta meta{layout[t].name, layout[t].layer_index, layout[t].param_kind, layout[t].shape,
                    format, false, {}};
    std::vector<std::uint32_t> raw(params[t].size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = encode(params[t][i], format).raw;
    bundle.add_tensor(std::move(meta), std::move(raw));
  }
  return bundle;
}

ToyModel train_toy(const Architecture& arch, Format format, const TrainConfig& config) {
  if (format == Format::INT8) {
    throw std::invalid_argument("train a float bundle and quantize it instead");
  }
  const Network net(arch);
  auto params = init_params(arch, config.seed);
  auto tasks = default_tasks(arch.input_dim, config.seed);
  train(net, params, tasks, config);

  ToyModel out{make_bundle(arch, params, format), tasks, {}};
  out.bundle.provenance = {{"trainer", "sgd"},
                           {"seed", config.seed},
                           {"epochs", config.epochs},
                           {"learning_rate", config.learning_rate},
                           {"batch_size", config.batch_size},
                           {"format", std::string(format_name(format))}};
  for (const auto& t : tasks) {
    const auto splits = generate_splits(t, 0);
    out.eval_accuracy.push_back(evaluate(out.bundle, splits.eval, t.num_classes));
  }
  return out;
}

Architecture toy_mlp(int input_dim, std::vector<int> hidden, int outputs) {
  Architecture a;
  a.kind = ArchKind::Mlp;
  a.input_dim = input_dim;
  a.hidden = std::move(hidden);
  a.num_outputs = outputs;
  return a;
}

Architecture toy_attention(int tokens, int token_dim, int model_dim, int ffn_dim, int outputs) {
  Architecture a;
  a.kind = ArchKind::Attention;
  a.input_dim = tokens * token_dim;
  a.tokens = tokens;
  a.model_dim = model_dim;
  a.ffn_dim = ffn_dim;
  a.num_outputs = outputs;
  return a;
}

}  // namespace sbfa
