#pragma once

// Range-constrained ("sneaky") flip selection and its impact score.
//
// A flip of weight w by delta is sneaky when the new value stays within the
// layer's benign range, bounds inclusive:
//
//     w_min <= w + delta <= w_max
//
// The impact score of a weight is |dL/dw| times the largest |delta| among its
// sneaky flips. Since both the old and the new value lie inside
// [w_min, w_max], every score is bounded by |dL/dw| * (w_max - w_min); the
// pruned search relies on that bound.

#include <optional>

#include "sbfa/bundle.hpp"

namespace sbfa {

struct FlipCandidate {
  WeightRef ref;
  int bit_position = 0;
  double old_value = 0.0;
  double new_value = 0.0;
  double delta = 0.0;
  double impact_score = 0.0;
  // False for NaN/Inf outcomes (only produced by the unconstrained baseline).
  bool finite = true;
};

/// Total order used by every ranking: higher score first, then lower
/// (tensor, index, bit).
inline bool ranks_before(const FlipCandidate& a, const FlipCandidate& b) {
  if (a.impact_score != b.impact_score) return a.impact_score > b.impact_score;
  if (a.ref != b.ref) return a.ref < b.ref;
  return a.bit_position < b.bit_position;
}

/// w_min <= old + delta <= w_max; a non-finite sum is never sneaky.
bool is_sneaky(double old_value, double delta, const LayerStats& stats);

/// Range test on an already-computed new value.
bool in_layer_range(double value, const LayerStats& stats);

/// Best sneaky flip of one weight: maximal |delta|, lowest bit on ties.
/// Requires gradients in the bundle. Returns nullopt if no flip is sneaky.
std::optional<FlipCandidate> best_sneaky_flip(WeightRef ref, const ModelBundle& bundle);

/// All flips of one weight in the effective-value domain, one per bit.
std::vector<FlipCandidate> all_flips(WeightRef ref, const ModelBundle& bundle);

}  // namespace sbfa
