#pragma once

// Global top-K ranking of bit-flip candidates.
//
// skip_search visits each target tensor's weights in descending |grad|
// order and abandons the rest of the tensor as soon as the queue is full and
// |grad| * (w_max - w_min) falls strictly below the K-th best score. Because
// every score in a tensor is bounded by that product, the result equals the
// exhaustive ranking under the total order of ranks_before().

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sbfa/bundle.hpp"
#include "sbfa/impact.hpp"

namespace sbfa {

class TopKQueue {
 public:
  explicit TopKQueue(std::size_t capacity) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool full() const { return entries_.size() >= capacity_; }
  bool empty() const { return entries_.empty(); }

  /// Score of the K-th entry when full, -inf otherwise.
  double kth_score() const {
    return full() && !entries_.empty() ? entries_.back().impact_score
                                       : -std::numeric_limits<double>::infinity();
  }

  /// Inserts if the queue has room or `c` ranks before the current K-th
  /// entry; the queue is pruned back to capacity after every insertion.
  /// Returns whether `c` was kept.
  bool offer(const FlipCandidate& c);

  /// Best first.
  const std::vector<FlipCandidate>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::vector<FlipCandidate> entries_;
};

struct SkipEvent {
  std::size_t tensor = 0;
  // Position in the sorted visiting order where the break happened.
  std::size_t position = 0;
  double grad_abs = 0.0;
  double range = 0.0;
  double kth_score = 0.0;
};

struct SearchStats {
  std::size_t weights_considered = 0;
  std::size_t weights_scored = 0;
  std::size_t layers_early_broken = 0;
  std::vector<SkipEvent> skips;

  double reduction_factor() const {
    return weights_scored == 0 ? 0.0
                               : static_cast<double>(weights_considered) /
                                     static_cast<double>(weights_scored);
  }
};

struct SearchResult {
  TopKQueue queue;
  SearchStats stats;
};

SearchResult skip_search(const ModelBundle& bundle, AttackMode mode, std::size_t k,
                         std::span<const std::string> exclusions = {});

/// Scores every target weight; the oracle for skip_search.
TopKQueue exhaustive_topk(const ModelBundle& bundle, AttackMode mode, std::size_t k,
                          std::span<const std::string> exclusions = {});

enum class BaselineVariant { NoRange, InRange, SignOnly };

std::string_view baseline_name(BaselineVariant v);

/// Gradient-BFA rankers.
///   NoRange:  per weight, the flip maximizing |grad| * |delta| over all bits
///             with no range filter. NaN/Inf outcomes count as |delta| = inf.
///   InRange:  the same with the range filter (scores match best_sneaky_flip).
///   SignOnly: the sign bit only, unfiltered.
TopKQueue baseline_rank(const ModelBundle& bundle, AttackMode mode, BaselineVariant variant,
                        std::size_t k, std::span<const std::string> exclusions = {});

}  // namespace sbfa
