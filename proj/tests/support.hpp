#pragma once

// Shared fixtures for the test binaries.

#include <cstdint>
#include <filesystem>
#include <string>

#include "sbfa/bundle.hpp"
#include "sbfa/tasks.hpp"
#include "sbfa/train.hpp"

namespace sbfa::testing {

/// Fresh empty directory under the system temp dir, unique per name.
std::filesystem::path scratch_dir(const std::string& name);

/// Untrained bundle with N(0, 1/fan_in) weights.
ModelBundle random_bundle(const Architecture& arch, Format format, std::uint64_t seed);

/// Trained victims, memoized per process (training takes a few seconds).
const ToyModel& trained_mlp(Format format, std::uint64_t seed = 1);
const ToyModel& trained_attention(Format format, std::uint64_t seed = 1);

struct GradCheck {
  std::size_t sampled = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  // Worst offender, for diagnostics.
  std::string worst_tensor;
  double worst_backprop = 0.0;
  double worst_fd = 0.0;
};

/// Compares backprop against central differences of the mean loss on
/// float64 weights for `samples` uniformly drawn weights. Relative error is
/// |g - fd| / max(|g|, |fd|, floor).
GradCheck finite_difference_check(const Architecture& arch, std::vector<std::vector<double>> params,
                                  const Batch& batch, int num_classes, std::size_t samples,
                                  double h, double tol, double floor, std::uint64_t seed);

/// Path of a file in tests/data.
std::filesystem::path data_path(const std::string& file);

}  // namespace sbfa::testing
