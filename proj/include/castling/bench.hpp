#pragma once

#include <string>
#include <vector>

#include "castling/tensor.hpp"

namespace castling {

struct SlopeFit {
  double slope = 0.0;
  double r2 = 0.0;
};

// Least-squares line through (log x, log y).
SlopeFit fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys);

struct ScalingPoint {
  std::size_t n = 0;
  double median_seconds = 0.0;
};

struct ScalingRun {
  std::string variant;
  std::size_t d = 0;
  int reps = 0;
  std::vector<ScalingPoint> points;
  double slope = 0.0;
  double r2 = 0.0;
  bool timer_warning = false; // some median fell under 1 ms
  double checksum = 0.0;      // consumes kernel outputs; defeats dead-code elimination
};

// Known variants: quadratic_softmax, quadratic_angular, linear_angular,
// relu_s, relu_e, cosine, constant_stub (harness self-test, N-independent
// workload). Each (variant, N) point runs one discarded warmup plus `reps` timed
// repetitions on seeded inputs; the median is recorded. Single-threaded.
std::vector<ScalingRun> scaling_benchmark(const std::vector<std::string>& variants,
                                          const std::vector<std::size_t>& n_list, std::size_t d,
                                          int reps, std::uint64_t seed);

} // namespace castling
