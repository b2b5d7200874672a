#include "sbfa/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sbfa {

bool TopKQueue::offer(const FlipCandidate& c) {
  if (capacity_ == 0) return false;
  if (full() && !ranks_before(c, entries_.back())) return false;
  const auto pos = std::upper_bound(entries_.begin(), entries_.end(), c, ranks_before);
  entries_.insert(pos, c);
  if (entries_.size() > capacity_) entries_.pop_back();
  return true;
}

namespace {

void require_gradients(const ModelBundle& bundle) {
  if (!bundle.has_gradients()) throw BundleError("ranking requires gradients in the bundle");
}

}  // namespace

SearchResult skip_search(const ModelBundle& bundle, AttackMode mode, std::size_t k,
                         std::span<const std::string> exclusions) {
  require_gradients(bundle);
  SearchResult r{TopKQueue(k), {}};
  std::vector<std::size_t> order;
  for (std::size_t t : bundle.targets(mode, exclusions)) {
    const auto grad = bundle.gradient(t);
    const double range = bundle.stats(t).range();
    r.stats.weights_considered += grad.size();

    order.resize(grad.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::fabs(grad[a]) > std::fabs(grad[b]);
    });

    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const double g = std::fabs(grad[order[pos]]);
      const double kth = r.queue.kth_score();
      if (r.queue.full() && g * range < kth) {
        r.stats.layers_early_broken += 1;
        r.stats.skips.push_back({t, pos, g, range, kth});
        break;
      }
      r.stats.weights_scored += 1;
      if (auto c = best_sneaky_flip({t, order[pos]}, bundle)) r.queue.offer(*c);
    }
  }
  return r;
}

TopKQueue exhaustive_topk(const ModelBundle& bundle, AttackMode mode, std::size_t k,
                          std::span<const std::string> exclusions) {
  require_gradients(bundle);
  TopKQueue q(k);
  for (std::size_t t : bundle.targets(mode, exclusions)) {
    const std::size_t n = bundle.effective(t).size();
    for (std::size_t i = 0; i < n; ++i) {
      if (auto c = best_sneaky_flip({t, i}, bundle)) q.offer(*c);
    }
  }
  return q;
}

std::string_view baseline_name(BaselineVariant v) {
  switch (v) {
    case BaselineVariant::NoRange:
      return "bfa-no-range";
    case BaselineVariant::InRange:
      return "bfa-in-range";
    case BaselineVariant::SignOnly:
      return "bfa-sign-only";
  }
  return "?";
}

TopKQueue baseline_rank(const ModelBundle& bundle, AttackMode mode, BaselineVariant variant,
                        std::size_t k, std::span<const std::string> exclusions) {
  require_gradients(bundle);
  TopKQueue q(k);
  for (std::size_t t : bundle.targets(mode, exclusions)) {
    const std::size_t n = bundle.effective(t).size();
    const int sign_bit = format_spec(bundle.meta(t).format).sign_bit();
    for (std::size_t i = 0; i < n; ++i) {
      if (variant == BaselineVariant::InRange) {
        if (auto c = best_sneaky_flip({t, i}, bundle)) q.offer(*c);
        continue;
      }
      auto flips = all_flips({t, i}, bundle);
      if (variant == BaselineVariant::SignOnly) {
        q.offer(flips[static_cast<std::size_t>(sign_bit)]);
        continue;
      }
      const double g = std::fabs(bundle.gradient({t, i}));
      const auto magnitude = [](const FlipCandidate& c) {
        return c.finite ? std::fabs(c.delta) : std::numeric_limits<double>::infinity();
      };
      const FlipCandidate* best = nullptr;
      for (FlipCandidate& c : flips) {
        if (!c.finite) c.impact_score = g == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        if (!best || magnitude(c) > magnitude(*best)) best = &c;
      }
      q.offer(*best);
    }
  }
  return q;
}

}  // namespace sbfa
