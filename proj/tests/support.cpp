#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <tuple>

#include "sbfa/nnet.hpp"

namespace sbfa::testing {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sbfa-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ModelBundle random_bundle(const Architecture& arch, Format format, std::uint64_t seed) {
  return make_bundle(arch, init_params(arch, seed), format);
}

namespace {

const ToyModel& memo(bool attention, Format format, std::uint64_t seed) {
  static std::mutex mu;
  static std::map<std::tuple<bool, Format, std::uint64_t>, ToyModel> cache;
  std::lock_guard lock(mu);
  const auto key = std::make_tuple(attention, format, seed);
  auto it = cache.find(key);
  if (it == cache.end()) {
    TrainConfig cfg;
    cfg.seed = seed;
    it = cache.emplace(key, train_toy(attention ? toy_attention() : toy_mlp(), format, cfg)).first;
  }
  return it->second;
}

}  // namespace

const ToyModel& trained_mlp(Format format, std::uint64_t seed) { return memo(false, format, seed); }

const ToyModel& trained_attention(Format format, std::uint64_t seed) {
  return memo(true, format, seed);
}

GradCheck finite_difference_check(const Architecture& arch, std::vector<std::vector<double>> params,
                                  const Batch& batch, int num_classes, std::size_t samples,
                                  double h, double tol, double floor, std::uint64_t seed) {
  const Network net(arch);
  const auto grads = loss_and_grads(net, params_of(params), batch, num_classes).grads;
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();

  GradCheck out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = pick(rng);
    std::size_t t = 0;
    while (flat >= params[t].size()) flat -= params[t++].size();
    double& w = params[t][flat];
    const double saved = w;
    w = saved + h;
    const double up = mean_loss(net, params_of(params), batch, num_classes);
    w = saved - h;
    const double down = mean_loss(net, params_of(params), batch, num_classes);
    w = saved;
    const double fd = (up - down) / (2 * h);
    const double g = grads[t][flat];
    const double rel = std::fabs(g - fd) / std::max({std::fabs(g), std::fabs(fd), floor});
    ++out.sampled;
    if (rel > tol) ++out.failures;
    if (rel >= out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_tensor = net.layout()[t].name;
      out.worst_backprop = g;
      out.worst_fd = fd;
    }
  }
  return out;
}

std::filesystem::path data_path(const std::string& file) {
  return std::filesystem::path(SBFA_TEST_DATA) / file;
}

}  // namespace sbfa::testing
