#include "sbfa/impact.hpp"

#include <cmath>

namespace sbfa {

bool is_sneaky(double old_value, double delta, const LayerStats& stats) {
  return in_layer_range(old_value + delta, stats);
}

bool in_layer_range(double value, const LayerStats& stats) {
  // NaN compares false on both sides, Inf fails one of them.
  return std::isfinite(value) && stats.w_min <= value && value <= stats.w_max;
}

std::vector<FlipCandidate> all_flips(WeightRef ref, const ModelBundle& bundle) {
  const BitWord word = bundle.word(ref);
  const double old_value = bundle.effective_value(ref);
  const double grad = bundle.has_gradients() ? std::fabs(bundle.gradient(ref)) : 0.0;
  const int width = format_spec(word.format).bit_width;

  std::vector<FlipCandidate> out;
  out.reserve(static_cast<std::size_t>(width));
  for (int bit = 0; bit < width; ++bit) {
    // Quantized words are re-scaled by their row scale here, so delta is
    // scale * (int' - int) up to the rounding of the two products.
    const double v = bundle.effective_of(ref, flip_bit(word, bit).raw);
    FlipCandidate c;
    c.ref = ref;
    c.bit_position = bit;
    c.old_value = old_value;
    c.new_value = v;
    c.finite = std::isfinite(v);
    c.delta = v - old_value;
    c.impact_score = grad * std::fabs(c.delta);
    out.push_back(c);
  }
  return out;
}

std::optional<FlipCandidate> best_sneaky_flip(WeightRef ref, const ModelBundle& bundle) {
  const LayerStats& stats = bundle.stats(ref.tensor);
  std::optional<FlipCandidate> best;
  for (const FlipCandidate& c : all_flips(ref, bundle)) {
    if (!in_layer_range(c.new_value, stats)) continue;
    // Strict comparison keeps the lowest bit among equal magnitudes.
    if (!best || std::fabs(c.delta) > std::fabs(best->delta)) best = c;
  }
  return best;
}

}  // namespace sbfa
