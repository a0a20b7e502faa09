#pragma once

#include <cstdint>

#include "castling/attention.hpp"

namespace castling {

// Exact analytic MAC model (1 MAC = one multiply-accumulate). Pure arithmetic
// on the config: machine-independent, no measurement involved. Transcendental
// and divide bookkeeping live in their own columns and are never mixed into
// MAC totals.
struct FlopReport {
  // Similarity-times-V chain. Quadratic kernels: kv = N_q*N_k*d (scores),
  // q = N_q*N_k*d_v (aggregation). Linear kernels: kv = N_k*d*d_v (K^T V),
  // q = N_q*d*d_v (Q against the summary).
  std::uint64_t kv_macs = 0;
  std::uint64_t q_macs = 0;
  // Constant half-term of the linear-angular core (scale + add per entry).
  std::uint64_t half_macs = 0;
  // Row normalizers: ReluE denominators, Q/K L2 normalization, row_normalize.
  std::uint64_t norm_macs = 0;
  std::uint64_t dwconv_macs = 0;
  // Training-view cost of the auxiliary masked branch; zero once castled.
  std::uint64_t aux_macs = 0;
  std::uint64_t exp_ops = 0; // exp for softmax paths, arccos for the angular oracle
  std::uint64_t div_ops = 0;

  std::uint64_t core_macs() const { return kv_macs + q_macs; }
  std::uint64_t total_macs() const {
    return kv_macs + q_macs + half_macs + norm_macs + dwconv_macs + aux_macs;
  }
};

// castled = true strips the auxiliary branch (the inference view); everything
// else is unchanged. The DWConv branch survives castling by design.
FlopReport flop_count(const attention::AttentionConfig& cfg, bool castled = false);

// True iff the linear-path core beats the quadratic core for these extents:
// N_k d d_v + N_q d d_v  <  N_q N_k d + N_q N_k d_v.
// For square attention with d_v = d this reduces to N > d.
bool linear_beats_quadratic(std::size_t n_q, std::size_t n_k, std::size_t d, std::size_t d_v);

} // namespace castling
