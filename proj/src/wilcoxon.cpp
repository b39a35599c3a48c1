#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vitplast/errors.hpp"
#include "vitplast/finetune.hpp"

namespace vitplast {

WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, double alpha) {
  std::vector<double> d;
  for (double v : diffs) {
    if (!std::isfinite(v)) throw DataError("wilcoxon: non-finite difference");
    if (v != 0.0) d.push_back(v);
  }
  if (d.empty()) throw DegenerateInputError("wilcoxon: all differences are zero");
  const std::size_t n = d.size();
  if (n < kWilcoxonMinPairs) {
    throw DataError("wilcoxon: " + std::to_string(n) + " nonzero differences, need at least " +
                    std::to_string(kWilcoxonMinPairs));
  }

  // Average ranks of |d|, stored doubled so ties stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
    const long doubled = static_cast<long>(i + 1 + j + 1);  // 2 * average of ranks i+1..j+1
    for (std::size_t t = i; t <= j; ++t) rank2[order[t]] = doubled;
    const auto t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  long w2_plus = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w2_plus += rank2[i];
  }

  WilcoxonResult r;
  r.n = n;
  r.w_plus = static_cast<double>(w2_plus) / 2.0;
  r.w_minus = static_cast<double>(total2 - w2_plus) / 2.0;
  r.statistic = std::min(r.w_plus, r.w_minus);

  if (n <= kWilcoxonExactMax) {
    // Distribution of 2 W+ over all 2^n sign assignments.
    std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
    counts[0] = 1.0;
    long reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (long s = reach; s >= 0; --s) {
        if (counts[static_cast<std::size_t>(s)] != 0.0) {
          counts[static_cast<std::size_t>(s + rank2[i])] += counts[static_cast<std::size_t>(s)];
        }
      }
      reach += rank2[i];
    }
    const double total = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0.0, upper = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (s <= w2_plus) lower += counts[static_cast<std::size_t>(s)];
      if (s >= w2_plus) upper += counts[static_cast<std::size_t>(s)];
    }
    r.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / total);
    r.exact = true;
  } else {
    const auto nn = static_cast<double>(n);
    const double mean = nn * (nn + 1) / 4.0;
    const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
    const double z = (r.w_plus - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
  }
  r.significant = r.p_value < alpha;
  return r;
}

}  // namespace vitplast
