#include "castling/gradcheck.hpp"

#include <cmath>

#include "castling/attention.hpp"

namespace castling {

namespace {

using attention::AttentionConfig;
using attention::Eq9Mode;
using attention::KernelKind;

Tensor rand_t(SplitMix64& rng, Shape s, double lo, double hi) {
  return Tensor::uniform(std::move(s), rng, lo, hi);
}

// Magnitudes in [min_abs, max_abs] with random sign: keeps inputs away from
// the relu/threshold kinks so finite differences stay on one branch.
Tensor rand_away_from_zero(SplitMix64& rng, Shape s, double min_abs, double max_abs) {
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(min_abs, max_abs);
    t.at(i) = (rng.next_u64() & 1) ? mag : -mag;
  }
  return t;
}

// Scalarize through tanh so every entry feeds the loss with a distinct,
// nontrivial weight (a plain mean of a softmax row is constant and would
// vacuously pass any gradient check).
Var scalarize(Var x) { return op_mean_all(op_tanh(x)); }

// Q, K resampled until no softmax entry sits within `margin` of the threshold:
// an entry that crosses epsilon inside the finite-difference step would make
// the loss discontinuous and the check meaningless rather than wrong.
std::pair<Tensor, Tensor> qk_clear_of_threshold(SplitMix64& rng, std::size_t n, std::size_t d,
                                                double epsilon, bool normalized, double margin) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor q = rand_t(rng, {n, d}, -1.5, 1.5);
    Tensor k = rand_t(rng, {n, d}, -1.5, 1.5);
    const Tensor qh = normalized ? l2_normalize_rows(q) : q;
    const Tensor kh = normalized ? l2_normalize_rows(k) : k;
    const Tensor s = softmax_rows(matmul(qh, transpose(kh)));
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i)
      ok = std::abs(s.at(i) - epsilon) > margin;
    if (ok) return {std::move(q), std::move(k)};
  }
  throw ContractError("qk_clear_of_threshold: could not find a margin-safe sample");
}

// Unit rows whose pairwise inner products stay well inside (-1, 1), keeping
// the arccos derivative bounded for the quadratic angular cases.
std::pair<Tensor, Tensor> qk_moderate_angles(SplitMix64& rng, std::size_t n, std::size_t d) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor q = rand_t(rng, {n, d}, -1.0, 1.0);
    Tensor k = rand_t(rng, {n, d}, -1.0, 1.0);
    const Tensor qh = l2_normalize_rows(q);
    const Tensor kh = l2_normalize_rows(k);
    const Tensor t = matmul(qh, transpose(kh));
    bool ok = true;
    for (std::size_t i = 0; i < t.size() && ok; ++i) ok = std::abs(t.at(i)) < 0.95;
    if (ok) return {std::move(q), std::move(k)};
  }
  throw ContractError("qk_moderate_angles: could not find a moderate-angle sample");
}

// The relu inside the MLP block sits behind a matmul and the conv branch, so
// input-side margins cannot keep its pre-activation off the kink. Resample
// the whole input set until every hidden entry clears zero by a margin wide
// enough that the finite-difference step stays on one branch; at the kink the
// numeric estimate is meaningless rather than the analytic gradient wrong.
std::vector<Tensor> mlp_inputs_clear_of_kink(SplitMix64& rng, std::size_t grid_h,
                                             std::size_t grid_w) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<Tensor> in{rand_t(rng, {6, 4}, -1, 1),     rand_t(rng, {4, 8}, -0.5, 0.5),
                           rand_t(rng, {1, 8}, -0.2, 0.8), rand_t(rng, {8, 3}, -0.5, 0.5),
                           rand_t(rng, {8, 4}, -0.5, 0.5), rand_t(rng, {1, 4}, -0.2, 0.2)};
    Tape tape;
    Var h = op_add_rowvec(op_matmul(tape.leaf(in[0]), tape.leaf(in[1])), tape.leaf(in[2]));
    if (grid_h != 0) {
      const std::size_t hid = h.value().cols();
      Var img = op_reshape(h, {grid_h, grid_w, hid});
      h = op_reshape(op_dwconv2d(img, tape.leaf(in[3])), {grid_h * grid_w, hid});
    } else {
      h = op_dwconv1d(h, tape.leaf(in[3]));
    }
    const Tensor& pre = h.value();
    bool ok = true;
    for (std::size_t i = 0; i < pre.size() && ok; ++i) ok = std::abs(pre.at(i)) > 1e-3;
    if (ok) return in;
  }
  throw ContractError("mlp_inputs_clear_of_kink: could not find a margin-safe sample");
}

} // namespace

GradCheckResult run_grad_check(const GradCheckCase& c, int seeds, std::uint64_t base_seed,
                               double h) {
  GradCheckResult result{c.name, 0.0, c.tolerance, seeds, false};
  for (int s = 0; s < seeds; ++s) {
    SplitMix64 rng(base_seed + static_cast<std::uint64_t>(s) * 0x9E3779B9ull);
    std::vector<Tensor> inputs = c.make_inputs(rng);
    std::vector<Parameter> params;
    params.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
      params.emplace_back("p" + std::to_string(i), inputs[i]);

    {
      Tape tape;
      std::vector<Var> vars;
      vars.reserve(params.size());
      for (Parameter& p : params) vars.push_back(tape.param(p));
      Var loss = c.forward(tape, vars);
      tape.backward(loss);
    }

    auto eval = [&]() {
      Tape tape;
      std::vector<Var> vars;
      vars.reserve(params.size());
      for (Parameter& p : params) vars.push_back(tape.param(p));
      return c.forward(tape, vars).value().at(0);
    };

    for (Parameter& p : params) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double keep = p.value.at(i);
        p.value.at(i) = keep + h;
        const double f_plus = eval();
        p.value.at(i) = keep - h;
        const double f_minus = eval();
        p.value.at(i) = keep;
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double analytic = p.grad.at(i);
        const double diff = std::abs(analytic - numeric);
        if (diff <= 1e-8) continue; // absolute floor
        const double rel = diff / std::max(std::abs(analytic), std::abs(numeric));
        result.max_rel_err = std::max(result.max_rel_err, rel);
      }
    }
  }
  result.pass = result.max_rel_err < c.tolerance;
  return result;
}

std::vector<GradCheckCase> default_grad_checks() {
  std::vector<GradCheckCase> cases;
  auto push = [&](std::string name, std::function<std::vector<Tensor>(SplitMix64&)> mk,
                  std::function<Var(Tape&, std::span<const Var>)> fw, double tol = 1e-5) {
    cases.push_back(GradCheckCase{std::move(name), tol, std::move(mk), std::move(fw)});
  };

  push("add",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1), rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_add(v[0], v[1])); });

  push("sub",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1), rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_sub(v[0], v[1])); });

  push("mul",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1), rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_mul(v[0], v[1])); });

  push("scale",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_scale(v[0], 1.7)); });

  push("add_scalar",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_add_scalar(v[0], 0.37)); });

  push("matmul",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1), rand_t(r, {4, 2}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_matmul(v[0], v[1])); });

  push("transpose",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 5}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_transpose(v[0])); });

  push("relu",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_away_from_zero(r, {4, 4}, 0.05, 1.0)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_relu(v[0])); });

  push("tanh",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -2, 2)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_tanh(v[0])); });

  push("softmax_rows",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 5}, -2, 2), rand_t(r, {3, 5}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_mul(op_softmax_rows(v[0]), v[1])); });

  push("l2_normalize_rows",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_away_from_zero(r, {3, 5}, 0.2, 1.0), rand_t(r, {3, 5}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_mul(op_l2_normalize_rows(v[0]), v[1])); });

  push("dwconv1d",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {6, 3}, -1, 1), rand_t(r, {3, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_dwconv1d(v[0], v[1])); });

  push("dwconv2d",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {4, 4, 2}, -1, 1), rand_t(r, {2, 3, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_dwconv2d(v[0], v[1])); });

  push("avg_pool_tokens_partial_window",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {7, 3}, -1, 1), rand_t(r, {4, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_mul(op_avg_pool_tokens(v[0], 2), v[1])); });

  push("colsum",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {4, 3}, -1, 1), rand_t(r, {1, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_mul(op_colsum(v[0]), v[1])); });

  push("mean_rows",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {4, 3}, -1, 1), rand_t(r, {1, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_mul(op_mean_rows(v[0]), v[1])); });

  push("sum_all",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_sum_all(op_tanh(v[0])); });

  push("mean_all",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return op_mean_all(op_tanh(v[0])); });

  push("slice_cols",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 5}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_slice_cols(v[0], 1, 4)); });

  push("concat_cols",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 2}, -1, 1), rand_t(r, {3, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) {
         return scalarize(op_concat_cols({v[0], v[1]}));
       });

  push("concat_rows",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {2, 4}, -1, 1), rand_t(r, {3, 4}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) {
         return scalarize(op_concat_rows({v[0], v[1]}));
       });

  push("reshape",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {2, 6}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_reshape(v[0], {3, 4})); });

  push("add_rowvec",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {4, 3}, -1, 1), rand_t(r, {1, 3}, -1, 1)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_add_rowvec(v[0], v[1])); });

  push("div_rowwise",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {3, 4}, -1, 1), rand_t(r, {3, 1}, 0.5, 1.5)}; },
       [](Tape&, std::span<const Var> v) { return scalarize(op_div_rowwise(v[0], v[1])); });

  push("threshold_keep",
       [](SplitMix64& r) {
         Tensor x(Shape{4, 4});
         for (std::size_t i = 0; i < x.size(); ++i) {
           // clear of the 0.3 threshold on both sides
           const double u = r.uniform(0.0, 1.0);
           x.at(i) = u < 0.5 ? r.uniform(-1.0, 0.25) : r.uniform(0.35, 1.0);
         }
         return std::vector<Tensor>{std::move(x), rand_t(r, {4, 4}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return op_mean_all(op_mul(op_threshold_keep(v[0], 0.3), v[1]));
       });

  push("cross_entropy",
       [](SplitMix64& r) { return std::vector<Tensor>{rand_t(r, {4, 3}, -2, 2)}; },
       [](Tape&, std::span<const Var> v) {
         return op_cross_entropy(v[0], {0, 1, 2, 0});
       });

  push("layer_norm_rows",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_t(r, {3, 6}, -1, 1), rand_t(r, {1, 6}, 0.5, 1.5),
                                    rand_t(r, {1, 6}, -0.5, 0.5)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(op_layer_norm_rows(v[0], v[1], v[2]));
       });

  push("softmax_attention",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_t(r, {4, 3}, -1, 1), rand_t(r, {5, 3}, -1, 1),
                                    rand_t(r, {5, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::softmax_attention(v[0], v[1], v[2]));
       });

  push("kernel_linear_relu_s",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_away_from_zero(r, {4, 3}, 0.05, 1.0),
                                    rand_away_from_zero(r, {5, 3}, 0.05, 1.0),
                                    rand_t(r, {5, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::kernel_linear_attention(KernelKind::ReluS, v[0], v[1], v[2]));
       });

  push("kernel_linear_relu_e",
       [](SplitMix64& r) {
         // strictly positive Q, K keep every denominator comfortably alive
         return std::vector<Tensor>{rand_t(r, {4, 3}, 0.2, 1.2), rand_t(r, {5, 3}, 0.2, 1.2),
                                    rand_t(r, {5, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::kernel_linear_attention(KernelKind::ReluE, v[0], v[1], v[2]));
       });

  push("kernel_linear_cosine",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_away_from_zero(r, {4, 3}, 0.2, 1.0),
                                    rand_away_from_zero(r, {5, 3}, 0.2, 1.0),
                                    rand_t(r, {5, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::kernel_linear_attention(KernelKind::Cosine, v[0], v[1], v[2]));
       });

  push("quadratic_angular_attention",
       [](SplitMix64& r) {
         auto [q, k] = qk_moderate_angles(r, 4, 5);
         return std::vector<Tensor>{std::move(q), std::move(k), rand_t(r, {4, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::quadratic_angular_attention(v[0], v[1], v[2], true));
       });

  push("linear_angular_core_literal",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_away_from_zero(r, {5, 4}, 0.2, 1.0),
                                    rand_away_from_zero(r, {5, 4}, 0.2, 1.0),
                                    rand_t(r, {5, 3}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::linear_angular_core(v[0], v[1], v[2], Eq9Mode::Literal));
       });

  push("linear_angular_core_faithful_rect",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_away_from_zero(r, {3, 4}, 0.2, 1.0),
                                    rand_away_from_zero(r, {6, 4}, 0.2, 1.0),
                                    rand_t(r, {6, 3}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::linear_angular_core(v[0], v[1], v[2], Eq9Mode::Faithful));
       });

  push("linear_angular_core_row_normalized",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_away_from_zero(r, {4, 4}, 0.2, 1.0),
                                    rand_away_from_zero(r, {4, 4}, 0.2, 1.0),
                                    rand_t(r, {4, 3}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(
             attention::linear_angular_core(v[0], v[1], v[2], Eq9Mode::Faithful, true, true));
       });

  push("masked_softmax_attention",
       [](SplitMix64& r) {
         auto [q, k] = qk_clear_of_threshold(r, 5, 3, 0.12, false, 1e-3);
         return std::vector<Tensor>{std::move(q), std::move(k), rand_t(r, {5, 2}, -1, 1)};
       },
       [](Tape&, std::span<const Var> v) {
         return scalarize(attention::masked_softmax_attention(v[0], v[1], v[2], 0.12, false).output);
       });

  push("mlp_dwconv_block",
       [](SplitMix64& r) { return mlp_inputs_clear_of_kink(r, 0, 0); },
       [](Tape&, std::span<const Var> v) {
         return scalarize(
             attention::mlp_dwconv_block(v[0], v[1], v[2], v[3], v[4], v[5], true));
       });

  push("attention_block_postq_residual",
       [](SplitMix64& r) {
         return std::vector<Tensor>{rand_t(r, {6, 4}, -1, 1), rand_t(r, {4, 4}, -0.6, 0.6),
                                    rand_t(r, {4, 4}, -0.6, 0.6), rand_t(r, {4, 4}, -0.6, 0.6),
                                    rand_t(r, {4, 3}, -0.3, 0.3)};
       },
       [](Tape&, std::span<const Var> v) {
         attention::BlockVariant variant{attention::Pooling::PostQ, true, 2};
         AttentionConfig cfg;
         cfg.kernel = KernelKind::LinearAngular;
         cfg.mode = Eq9Mode::Faithful; // pooling makes attention rectangular
         return scalarize(attention::attention_block(variant, cfg, v[0], v[1], v[2], v[3], v[4]));
       });

  // The full composition at the relaxed composed tolerance: linear core +
  // dwconv branch + raw-logit masked aux, the exact configuration trained in
  // the sparsity experiments.
  push("castling_attention_composed",
       [](SplitMix64& r) {
         auto [q, k] = qk_clear_of_threshold(r, 8, 4, 0.05, false, 1e-3);
         return std::vector<Tensor>{std::move(q), std::move(k), rand_t(r, {8, 4}, -1, 1),
                                    rand_t(r, {4, 3}, -0.5, 0.5)};
       },
       [](Tape&, std::span<const Var> v) {
         AttentionConfig cfg;
         cfg.n_q = cfg.n_k = 8;
         cfg.d = cfg.d_v = 4;
         cfg.kernel = KernelKind::LinearAngular;
         cfg.mode = Eq9Mode::Literal;
         cfg.use_dwconv = true;
         cfg.dwconv_k = 3;
         cfg.use_aux = true;
         cfg.epsilon = 0.05;
         cfg.aux_normalize = false;
         return scalarize(attention::castling_attention(cfg, v[0], v[1], v[2], v[3]).output);
       },
       1e-4);

  push("castling_attention_grid_faithful",
       [](SplitMix64& r) {
         auto [q, k] = qk_clear_of_threshold(r, 9, 4, 0.05, true, 1e-3);
         return std::vector<Tensor>{std::move(q), std::move(k), rand_t(r, {9, 4}, -1, 1),
                                    rand_t(r, {4, 3, 3}, -0.5, 0.5)};
       },
       [](Tape&, std::span<const Var> v) {
         AttentionConfig cfg;
         cfg.n_q = cfg.n_k = 9;
         cfg.d = cfg.d_v = 4;
         cfg.kernel = KernelKind::LinearAngular;
         cfg.mode = Eq9Mode::Faithful;
         cfg.use_dwconv = true;
         cfg.dwconv_k = 3;
         cfg.grid_h = cfg.grid_w = 3;
         cfg.use_aux = true;
         cfg.epsilon = 0.05;
         cfg.aux_normalize = true;
         return scalarize(attention::castling_attention(cfg, v[0], v[1], v[2], v[3]).output);
       },
       1e-4);

  return cases;
}

std::vector<GradCheckResult> run_all_grad_checks(int seeds, std::uint64_t base_seed) {
  std::vector<GradCheckResult> results;
  for (const GradCheckCase& c : default_grad_checks())
    results.push_back(run_grad_check(c, seeds, base_seed));
  return results;
}

} // namespace castling
