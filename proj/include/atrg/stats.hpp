// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ATRG_STATS_HPP
#define ATRG_STATS_HPP

// Small rank statistics used by the evaluation checks: Spearman correlation
// for the perturbation-position trend and a one-sided Mann-Whitney U test for
// the feature-separation assertions.

#include <algorithm>
#include <cmath>
#include <vector>

#include "atrg/errors.hpp"

namespace atrg {

// Average ranks (1-based), ties averaged.
inline std::vector<double> ranks(const std::vector<double>& xs) {
  size_t n = xs.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DataError("pearson: need matched series");
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  double denom = std::sqrt(va * vb);
  if (denom == 0.0) return 0.0;
  return cov / denom;
}

inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

// One-sided Mann-Whitney U: p-value for the alternative "xs tend to be larger
// than ys", via the normal approximation with tie correction.
inline double mann_whitney_p_greater(const std::vector<double>& xs,
                                     const std::vector<double>& ys) {
  if (xs.empty() || ys.empty()) throw DataError("mann-whitney: empty sample");
  double n1 = static_cast<double>(xs.size()), n2 = static_cast<double>(ys.size());
  std::vector<double> all;
  all.reserve(xs.size() + ys.size());
  all.insert(all.end(), xs.begin(), xs.end());
  all.insert(all.end(), ys.begin(), ys.end());
  auto r = ranks(all);
  double r1 = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) r1 += r[i];
  double u = r1 - n1 * (n1 + 1.0) / 2.0;  // U statistic for xs

  double n = n1 + n2;
  // tie correction
  std::sort(all.begin(), all.end());
  double tie_sum = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j + 1 < all.size() && all[j + 1] == all[i]) ++j;
    double t = static_cast<double>(j - i + 1);
    tie_sum += t * t * t - t;
    i = j + 1;
  }
  double mu = n1 * n2 / 2.0;
  double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
  if (var <= 0.0) return 0.5;
  double z = (u - mu - 0.5) / std::sqrt(var);  // continuity correction
  // one-sided upper tail
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace atrg

#endif  // ATRG_STATS_HPP
