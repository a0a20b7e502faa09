#pragma once

#include <string>

#include <json.hpp>

#include "castling/autodiff.hpp"
#include "castling/tensor.hpp"

namespace castling::attention {

// Which similarity drives the attention map.
//   ExactSoftmax  softmax(QK^T/sqrt(d)) V, the quadratic reference
//   Angular       quadratic angular oracle, S_ij = 1 - theta_ij/pi
//   LinearAngular the O(N) two-term core (plus optional branches)
//   ReluS         phi(Q)(phi(K)^T V), phi = ReLU, no denominator
//   ReluE         ReluS divided per row by phi(Q) sum_j phi(K_j)^T
//   Cosine        phi rows L2-normalized, then the ReluS product
enum class KernelKind { ExactSoftmax, Angular, LinearAngular, ReluS, ReluE, Cosine };

// How the constant 1/2 term of the linear-angular expansion is applied.
// Literal adds (1/2) V, reading the update equation exactly as printed, and
// needs N_q == N_k. Faithful adds (1/2) 1 (1^T V), the true product of the
// constant similarity term with V; it is the series-exact form the quadratic
// oracle converges to and works for rectangular attention.
enum class Eq9Mode { Literal, Faithful };

enum class Pooling { None, PreQ, PostQ };

std::string to_string(KernelKind k);
std::string to_string(Eq9Mode m);
std::string to_string(Pooling p);
KernelKind kernel_from_string(const std::string& s);
Eq9Mode mode_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);

struct AttentionConfig {
  std::size_t n_q = 16, n_k = 16;
  std::size_t d = 8;   // query/key dim
  std::size_t d_v = 8; // value dim
  KernelKind kernel = KernelKind::LinearAngular;
  Eq9Mode mode = Eq9Mode::Literal;
  bool use_dwconv = false;
  std::size_t dwconv_k = 3;
  bool use_aux = false;
  double epsilon = 0.02;
  // Normalize Q/K rows ahead of the angular core (the series needs |t| <= 1).
  bool normalize_qk = true;
  // Normalize Q/K rows inside the auxiliary masked-softmax branch. On by
  // default; the sparsity training recipes turn it off because bounded
  // cosine logits cap how peaked a softmax row can get, which caps how many
  // entries can ever fall under the threshold.
  bool aux_normalize = true;
  // Optional row normalizer for the linear core: divide row i by
  // sum_j Sim(Q_i, K_j) = N_k/2 + (1/pi) Q_i (sum_j K_j)^T, still O(N).
  bool row_normalize = false;
  // When both are nonzero the value tokens form a grid_h x grid_w image and
  // the DWConv branch runs its 2-D form; otherwise tokens are a 1-D sequence.
  std::size_t grid_h = 0, grid_w = 0;

  void validate() const; // throws ConfigError
  nlohmann::json to_json() const;
  static AttentionConfig from_json(const nlohmann::json& j); // validates
};

// ---- differentiable paths (tape Vars) ---------------------------------------

// softmax(Q K^T / sqrt(d)) V. The only path that applies the 1/sqrt(d) scale;
// angular paths run on unit-normalized rows and need none.
Var softmax_attention(Var q, Var k, Var v);

// Kernel linear attention, phi in {ReluS, ReluE, Cosine}; cost O(N d d_v).
// ReluE throws NumericError if any denominator row falls below denom_eps.
Var kernel_linear_attention(KernelKind phi, Var q, Var k, Var v, double denom_eps = 1e-9);

// O(N^2) oracle: S_ij = 1 - theta(Q_i, K_j)/pi, returns S V. Rows are
// normalized first when normalize is set. Exactly-zero Q/K rows are rejected
// (their direction is undefined); the linear core instead lets them pass
// through normalization as zeros, which lands on similarity 1/2 everywhere.
Var quadratic_angular_attention(Var q, Var k, Var v, bool normalize = true);

// The two linear terms of the angular expansion applied to V in O(N):
// Faithful: (1/2) 1 (1^T V) + (1/pi) Q (K^T V)
// Literal:  (1/2) V         + (1/pi) Q (K^T V)
Var linear_angular_core(Var q, Var k, Var v, Eq9Mode mode, bool normalize_qk = true,
                        bool row_normalize = false);

struct MaskedAttention {
  Var output;  // M V
  Var kept;    // the thresholded map itself (surviving softmax values on tape)
  Tensor mask; // 0/1 survivor indicator, N_q x N_k (forward value, not on tape)
};

// softmax(Q K^T) with the strict threshold keep: entries survive iff they
// exceed epsilon, everything else becomes an exact zero. Gradient is
// straight-through on survivors. No 1/sqrt(d) scale in this path.
MaskedAttention masked_softmax_attention(Var q, Var k, Var v, double epsilon,
                                         bool normalize_qk = true);

struct CastlingOutput {
  Var output;
  bool has_aux = false;
  Var aux_kept;    // surviving aux map (valid when has_aux)
  Tensor aux_mask; // empty when use_aux is off
};

// Full composition: linear-angular core, plus the DWConv branch over V's
// token axis (or grid), plus the masked auxiliary branch. dw_kernel must be
// a Var of shape d_v x k (sequence) or d_v x k x k (grid); it participates
// in the graph even though the branch may be disabled by cfg.
CastlingOutput castling_attention(const AttentionConfig& cfg, Var q, Var k, Var v, Var dw_kernel);

struct BlockVariant {
  Pooling pooling = Pooling::None;
  bool residual_q = false; // only valid with PostQ
  std::size_t stride = 1;

  void validate() const;
};

// Table-style downsampling block: project X with w_q/w_k/w_v, pool queries
// before (PreQ) or after (PostQ) the projection, run the configured kernel,
// and optionally add the pooled queries back as a residual (needs d_v == d).
Var attention_block(const BlockVariant& variant, const AttentionConfig& cfg, Var x, Var w_q,
                    Var w_k, Var w_v, Var dw_kernel);

// Token MLP with a depthwise conv in the middle: x + W2 act(dwconv(x W1 + b1)) + b2
// shape-preserving; dw runs 1-D over tokens, or 2-D when a grid is given.
Var mlp_dwconv_block(Var x, Var w1, Var b1, Var dw_kernel, Var w2, Var b2, bool use_dwconv,
                     std::size_t grid_h = 0, std::size_t grid_w = 0);

// ---- forward-only streaming kernels (benchmarks, inference) -----------------
// These never materialize the N_q x N_k map; peak extra memory is one logits
// row for the softmax paths and the d x d_v summary for the linear paths.

Tensor softmax_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor quadratic_angular_fwd(const Tensor& q, const Tensor& k, const Tensor& v,
                             bool normalize = true);
Tensor linear_angular_fwd(const Tensor& q, const Tensor& k, const Tensor& v, Eq9Mode mode,
                          bool normalize_qk = true);
Tensor kernel_linear_fwd(KernelKind phi, const Tensor& q, const Tensor& k, const Tensor& v,
                         double denom_eps = 1e-9);

} // namespace castling::attention
