#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "castling/autodiff.hpp"
#include "castling/rng.hpp"

namespace castling {

// One finite-difference check: the case builds its inputs from a seeded rng,
// then maps parameter Vars to a scalar loss on a fresh tape. The harness runs
// backward once for analytic gradients and re-evaluates the forward map twice
// per coordinate for central differences.
struct GradCheckCase {
  std::string name;
  double tolerance = 1e-5; // relative, with a 1e-8 absolute floor
  std::function<std::vector<Tensor>(SplitMix64&)> make_inputs;
  std::function<Var(Tape&, std::span<const Var>)> forward;
};

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int seeds = 0;
  bool pass = false;
};

// Central differences with step h; error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8/tolerance scale).
GradCheckResult run_grad_check(const GradCheckCase& c, int seeds, std::uint64_t base_seed,
                               double h = 1e-5);

// Every differentiable op plus the composed attention blocks. The composed
// castling block case carries a 1e-4 tolerance, per-op cases 1e-5.
std::vector<GradCheckCase> default_grad_checks();

std::vector<GradCheckResult> run_all_grad_checks(int seeds, std::uint64_t base_seed);

} // namespace castling
