#include <gtest/gtest.h>

#include <cmath>

#include "sbfa/nnet.hpp"
#include "sbfa/train.hpp"
#include "support.hpp"

namespace sbfa {
namespace {

std::vector<std::vector<double>> shadow(const ModelBundle& b) {
  std::vector<std::vector<double>> out;
  for (std::size_t t = 0; t < b.size(); ++t) out.emplace_back(b.effective(t).begin(), b.effective(t).end());
  return out;
}

std::vector<std::vector<double>> zeros(const Architecture& arch) {
  std::vector<std::vector<double>> out;
  for (const auto& info : parameter_layout(arch)) {
    std::size_t n = 1;
    for (auto d : info.shape) n *= d;
    out.emplace_back(n, 0.0);
  }
  return out;
}

Batch task_batch(int input_dim, int classes, int n, std::uint64_t seed) {
  TaskSpec t{"t", classes, input_dim, seed};
  t.train_samples = 0;
  t.grad_samples = 0;
  t.eval_samples = n;
  return generate_splits(t, 1).eval;
}

TEST(Layout, NamesCarryLayerAndKind) {
  const auto mlp = parameter_layout(toy_mlp(16, {8, 8}, 4));
  ASSERT_EQ(mlp.size(), 10u);
  EXPECT_EQ(mlp[0].name, "layer.0.mlp.up_proj");
  EXPECT_EQ(mlp[0].param_kind, "mlp.up_proj");
  EXPECT_EQ(mlp[0].shape, (std::vector<std::size_t>{8, 16}));
  EXPECT_EQ(mlp[8].name, "layer.2.lm_head");
  EXPECT_EQ(mlp[8].layer_index, 2);
  const auto attn = parameter_layout(toy_attention());
  EXPECT_EQ(attn[4].name, "layer.1.attn.q_proj");
  EXPECT_EQ(attn.back().name, "layer.2.lm_head.bias");
  Architecture ragged = toy_attention();
  ragged.input_dim = 15;
  EXPECT_THROW(parameter_layout(ragged), BundleError);
}

TEST(Network, ZeroWeightsGiveUniformSoftmax) {
  for (const auto& arch : {toy_mlp(6, {5}, 4), toy_attention(2, 3, 4, 4, 4)}) {
    const auto p = zeros(arch);
    const Network net(arch);
    const Batch b = task_batch(6, 4, 20, 9);
    EXPECT_NEAR(mean_loss(net, params_of(p), b, 4), std::log(4.0), 1e-12);
    EXPECT_NEAR(mean_loss(net, params_of(p), b, 2), std::log(2.0), 1e-12);
  }
}

TEST(Network, IdentityLinearModel) {
  const Architecture arch = toy_mlp(4, {}, 4);
  auto p = zeros(arch);
  for (int k = 0; k < 4; ++k) p[0][static_cast<std::size_t>(k * 4 + k)] = 1.0;
  const Network net(arch);
  Batch memorized{4, {}, {}};
  for (int k = 0; k < 4; ++k) {
    std::vector<double> x(4, 0.0), logits(4);
    x[static_cast<std::size_t>(k)] = 1.0;
    net.forward(params_of(p), x, logits);
    for (int j = 0; j < 4; ++j) EXPECT_EQ(logits[static_cast<std::size_t>(j)], j == k ? 1.0 : 0.0);
    memorized.inputs.insert(memorized.inputs.end(), x.begin(), x.end());
    memorized.labels.push_back(k);
  }
  EXPECT_EQ(accuracy(net, params_of(p), memorized, 4), 1.0);
}

TEST(Network, GradientsMatchFiniteDifferences) {
  const Batch b = task_batch(16, 4, 24, 4);
  for (const auto& arch : {toy_mlp(), toy_attention()}) {
    const auto check =
        testing::finite_difference_check(arch, init_params(arch, 2), b, 4, 300, 1e-4, 1e-4, 1e-6, 1);
    EXPECT_EQ(check.failures, 0u) << "worst " << check.worst_tensor << " backprop "
                                  << check.worst_backprop << " fd " << check.worst_fd;
  }
}

TEST(Network, TwoClassHeadGradientsMatchFiniteDifferences) {
  const Batch b = task_batch(16, 2, 24, 8);
  const auto check = testing::finite_difference_check(toy_mlp(), init_params(toy_mlp(), 5), b, 2,
                                                      200, 1e-4, 1e-4, 1e-6, 2);
  EXPECT_EQ(check.failures, 0u) << check.worst_tensor;
}

TEST(Network, InputThatIsAlwaysZeroGetsNoGradient) {
  const Architecture arch = toy_mlp(6, {5}, 3);
  Batch b = task_batch(6, 3, 30, 2);
  for (std::size_t i = 0; i < b.size(); ++i) b.inputs[i * 6 + 2] = 0.0;
  const auto g = loss_and_grads(Network(arch), params_of(init_params(arch, 1)), b, 3).grads;
  for (std::size_t row = 0; row < 5; ++row) EXPECT_EQ(g[0][row * 6 + 2], 0.0);
}

TEST(Network, DuplicatedBatchLeavesMeanGradientUnchanged) {
  const Architecture arch = toy_mlp(16, {8}, 4);
  const auto p = init_params(arch, 3);
  const Batch b = task_batch(16, 4, 17, 6);
  Batch twice = b;
  twice.inputs.insert(twice.inputs.end(), b.inputs.begin(), b.inputs.end());
  twice.labels.insert(twice.labels.end(), b.labels.begin(), b.labels.end());
  const Network net(arch);
  const auto g1 = loss_and_grads(net, params_of(p), b, 4);
  const auto g2 = loss_and_grads(net, params_of(p), twice, 4);
  EXPECT_NEAR(g1.loss, g2.loss, 1e-14);
  for (std::size_t t = 0; t < g1.grads.size(); ++t) {
    for (std::size_t i = 0; i < g1.grads[t].size(); ++i) {
      EXPECT_NEAR(g1.grads[t][i], g2.grads[t][i], 1e-13 * (1 + std::fabs(g1.grads[t][i])));
    }
  }
}

TEST(Network, RepeatedEvaluationIsBitIdentical) {
  const ModelBundle b = testing::random_bundle(toy_attention(), Format::BF16, 4);
  const Batch batch = task_batch(16, 4, 40, 3);
  ModelBundle g1 = b, g2 = b;
  EXPECT_EQ(compute_gradients(g1, batch, 4), compute_gradients(g2, batch, 4));
  for (std::size_t t = 0; t < b.size(); ++t) {
    const auto a = g1.gradient(t), c = g2.gradient(t);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), c.begin()));
  }
}

TEST(Network, UntrainedModelsSitNearChance) {
  // Binomial(100, 0.25) 99% band computed from the exact pmf.
  auto pmf = [](int k) {
    return std::exp(std::lgamma(101.0) - std::lgamma(k + 1.0) - std::lgamma(101.0 - k) +
                    k * std::log(0.25) + (100 - k) * std::log(0.75));
  };
  int lo = 0, hi = 100;
  for (double tail = 0; tail + pmf(lo) <= 0.005; ++lo) tail += pmf(lo);
  for (double tail = 0; tail + pmf(hi) <= 0.005; --hi) tail += pmf(hi);
  ASSERT_LT(lo, 25);
  ASSERT_GT(hi, 25);

  // A random function of the inputs can still correlate with the labels, so
  // the band is checked on the mean over several untrained models.
  const auto tasks = default_tasks(16, 1);
  const Batch eval = [&] {
    TaskSpec t = tasks[0];
    t.eval_samples = 100;
    return generate_splits(t, 5).eval;
  }();
  double sum = 0.0;
  const int models = 10;
  for (int s = 0; s < models; ++s) {
    sum += evaluate(testing::random_bundle(toy_mlp(), Format::BF16, 100 + s), eval, 4);
  }
  const double mean = sum / models;
  EXPECT_GE(mean * 100, lo);
  EXPECT_LE(mean * 100, hi);
}

TEST(Network, TrainedVictimIsCompetent) {
  const ToyModel& m = testing::trained_mlp(Format::BF16);
  ASSERT_EQ(m.tasks.size(), 3u);
  for (double acc : m.eval_accuracy) EXPECT_GE(acc, 0.90);
}

TEST(Network, QuantizedBundleEvaluatesItsEffectiveWeights) {
  const ModelBundle q = quantize_int8(testing::trained_mlp(Format::FP32).bundle);
  const Batch b = task_batch(16, 4, 50, 1);
  const auto p = shadow(q);
  EXPECT_EQ(evaluate(q, b, 4), accuracy(Network(q.architecture()), params_of(p), b, 4));
}

TEST(Network, NonFiniteWeightIsReportedByTensor) {
  ModelBundle b = testing::random_bundle(toy_mlp(), Format::FP32, 1);
  const auto up = *b.find("layer.1.mlp.up_proj");
  // Set every exponent bit: the weight becomes Inf or NaN.
  const WeightRef ref{up, 3};
  for (int bit = 23; bit <= 30; ++bit) {
    if (!((b.raw(up)[ref.index] >> bit) & 1u)) b.apply_flip(ref, bit);
  }
  ASSERT_FALSE(std::isfinite(b.effective_value(ref)));
  try {
    evaluate(b, task_batch(16, 4, 10, 1), 4);
    FAIL() << "expected a numerical error";
  } catch (const NumericalRuntimeError& e) {
    EXPECT_EQ(e.tensor(), "layer.1.mlp.up_proj");
  }
}

}  // namespace
}  // namespace sbfa
