#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/rng.hpp"

namespace twistsmc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_mean_exp(std::span<const double> xs) {
  if (xs.empty()) throw BadInput("log_mean_exp: empty input");
  return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

inline std::vector<double> log_softmax(std::span<const double> xs) {
  double z = log_sum_exp(xs);
  if (z == kNegInf)
    throw DegenerateWeights("log_softmax: all entries are -inf");
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] - z;
  return out;
}

// Categorical draw from unnormalized log weights; -inf entries carry zero mass.
inline int sample_categorical_logits(std::span<const double> logits,
                                     RngStream& rng) {
  double z = log_sum_exp(logits);
  if (z == kNegInf)
    throw DegenerateWeights("sample_categorical_logits: all weights zero");
  double u = rng.uniform01();
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double p = std::exp(logits[i] - z);
    if (p > 0.0) last_positive = static_cast<int>(i);
    acc += p;
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;  // rounding slack: u landed past the accumulated mass
}

// (sum w)^2 / sum w^2 in log space; in [1, K] for K nonzero weights.
inline double effective_sample_size(std::span<const double> log_w) {
  if (log_w.empty()) throw BadInput("effective_sample_size: empty input");
  double m = kNegInf;
  for (double x : log_w) m = std::max(m, x);
  if (m == kNegInf)
    throw DegenerateWeights("effective_sample_size: all weights zero");
  double s1 = 0.0, s2 = 0.0;
  for (double x : log_w) {
    double e = std::exp(x - m);
    s1 += e;
    s2 += e * e;
  }
  return s1 * s1 / s2;
}

}  // namespace twistsmc
