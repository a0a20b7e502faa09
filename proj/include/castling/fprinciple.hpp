#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

namespace castling::fprinciple {

// The curve the little network has to learn: 1/2 + arcsin(t)/pi on [-1, 1].
// This is the exact angular similarity as a function of the unit inner
// product, the sum of the linear term and every high-order residual.
double target_fn(double t);

// Just the linear part, 1/2 + t/pi. The gap to target_fn is what the
// high-frequency residual branches have to recover; it peaks at |t| = 1
// with value 0.181690.
double linear_term_fn(double t);

struct FitConfig {
  std::size_t width = 64;  // hidden units of the two-layer tanh net
  std::size_t grid = 256;  // uniform sample count over [-1, 1); power of two >= 64
  std::size_t steps = 20000;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t log_every = 250;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const; // carries "schema_version": 1
  static FitConfig from_json(const nlohmann::json& j);
};

// Per logged step, per frequency bin: relative spectral error of
// (prediction - target). Bin 0 is DC; there are grid/2 + 1 bins.
struct FrequencyTrajectory {
  std::vector<std::size_t> steps;
  std::vector<std::vector<double>> rel_errors; // [logged step][bin]
};

struct FitResult {
  std::vector<std::pair<std::size_t, double>> loss_trajectory; // (step, mse)
  FrequencyTrajectory spectrum;
  double final_loss = 0.0;
};

// t_i = -1 + 2 i / m: uniform over [-1, 1), the natural period for the DFT.
std::vector<double> uniform_grid(std::size_t m);

// Spectral error estimator shared by the experiment and its tests: both
// signals are Hann-windowed, DFT'd, and compared per bin as
// |X_diff(b)| / |X_target(b)|; bins where the target magnitude falls below
// 1e-12 report the absolute magnitude instead.
std::vector<double> spectral_rel_errors(std::span<const double> prediction,
                                        std::span<const double> target);

// Full-batch momentum-SGD fit of the two-layer tanh net against target_fn on
// the uniform grid, recording the loss and the spectral errors at every
// log_every steps plus the final step. Non-finite loss aborts the run.
FitResult fit_residual(const FitConfig& cfg);

// First logged step at which each bin's error drops below the threshold;
// bins that never do report -1.
std::vector<std::ptrdiff_t> convergence_steps(const FrequencyTrajectory& traj, double threshold);

} // namespace castling::fprinciple
