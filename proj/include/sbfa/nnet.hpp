#pragma once

// Framework-free toy networks with exact backprop.
//
// All arithmetic is float64. Storage formats only matter for the weight
// words in a ModelBundle; the network reads the bundle's effective values.
//
// Two architectures are shipped:
//   Mlp:        [linear -> layernorm -> tanh] x L -> lm_head
//   Attention:  token embed -> pre-norm self-attention block with a tanh MLP
//               -> mean pool -> final norm -> lm_head
//
// A task with C classes reads the first C logits of the head.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbfa/bundle.hpp"
#include "sbfa/tasks.hpp"

namespace sbfa {

/// A NaN/Inf surfaced in the forward pass or the loss. Carries the name of
/// the tensor whose operation produced the first non-finite value.
class NumericalRuntimeError : public std::runtime_error {
 public:
  explicit NumericalRuntimeError(std::string tensor)
      : std::runtime_error("non-finite value produced at tensor '" + tensor + "'"),
        tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

struct ParamInfo {
  std::string name;
  int layer_index = 0;
  std::string param_kind;
  std::vector<std::size_t> shape;
};

/// Parameter tensors of an architecture in manifest order.
std::vector<ParamInfo> parameter_layout(const Architecture& arch);

using ParamSet = std::vector<std::span<const double>>;
using GradSet = std::vector<std::vector<double>>;

ParamSet params_of(const ModelBundle& bundle);
ParamSet params_of(const std::vector<std::vector<double>>& buffers);
GradSet zero_grads(const Architecture& arch);

class Network {
 public:
  explicit Network(Architecture arch);

  const Architecture& architecture() const { return arch_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }

  /// Logits for one input row; `logits` has num_outputs entries.
  void forward(const ParamSet& p, std::span<const double> x, std::span<double> logits) const;

  /// Cross-entropy over the first `num_classes` logits for one sample.
  /// Adds scale * dLoss/dparam into `grads` and returns the unscaled loss.
  double backward(const ParamSet& p, std::span<const double> x, int label, int num_classes,
                  double scale, GradSet& grads) const;

 private:
  void check_params(const ParamSet& p) const;

  Architecture arch_;
  std::vector<ParamInfo> layout_;
};

struct LossAndGrads {
  double loss = 0.0;
  GradSet grads;
};

/// Mean cross-entropy over the batch and its exact gradient, accumulated one
/// sample at a time.
LossAndGrads loss_and_grads(const Network& net, const ParamSet& p, const Batch& batch,
                            int num_classes);
double mean_loss(const Network& net, const ParamSet& p, const Batch& batch, int num_classes);

/// Exact-match accuracy by argmax over the first `num_classes` logits
/// (lowest index wins ties). Throws NumericalRuntimeError on NaN/Inf logits.
double accuracy(const Network& net, const ParamSet& p, const Batch& batch, int num_classes);

/// Computes gradients on the bundle's effective weights and stores them in
/// the bundle. Returns the mean loss.
double compute_gradients(ModelBundle& bundle, const Batch& batch, int num_classes);
double evaluate(const ModelBundle& bundle, const Batch& batch, int num_classes);

}  // namespace sbfa
