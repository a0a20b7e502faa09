#include "castling/attention.hpp"

#include <algorithm>
#include <cmath>

namespace castling::attention {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError(std::string(op) + ": Q, K, V must be rank-2");
  if (q.cols() != k.cols())
    throw ShapeError(std::string(op) + ": Q cols " + std::to_string(q.cols()) +
                     " != K cols " + std::to_string(k.cols()));
  if (k.rows() != v.rows())
    throw ShapeError(std::string(op) + ": K rows " + std::to_string(k.rows()) +
                     " != V rows " + std::to_string(v.rows()));
}

// Elementwise angular map y = 1 - acos(clamp(t))/pi with derivative
// 1/(pi sqrt(1 - t^2)); at a clamped entry the derivative is taken as 0
// (the clamp is flat there).
Var op_angular_map(Var t) {
  const Tensor& tv = t.value();
  Tensor y = tv;
  for (std::size_t i = 0; i < y.size(); ++i)
    y.at(i) = 1.0 - std::acos(std::clamp(y.at(i), -1.0, 1.0)) / kPi;
  return t.tape->record(std::move(y), {t.id}, [t](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(t.id)) return;
    const Tensor& g = tp.grad_of(self);
    const Tensor& x = tp.value_of(t.id);
    Tensor& dx = tp.grad_of(t.id);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double one_m = 1.0 - x.at(i) * x.at(i);
      if (one_m <= 1e-24) continue; // clamped or singular: frozen
      dx.at(i) += g.at(i) / (kPi * std::sqrt(one_m));
    }
  });
}

Var ones_leaf(Tape& tape, std::size_t rows, std::size_t cols) {
  return tape.leaf(Tensor::ones({rows, cols}));
}

void require_nonzero_rows(const Tensor& t, const char* who) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) s += t(i, j) * t(i, j);
    if (s == 0.0)
      throw DomainError(std::string(who) + ": row " + std::to_string(i) +
                        " is zero; its direction is undefined");
  }
}

} // namespace

std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::ExactSoftmax: return "exact_softmax";
    case KernelKind::Angular: return "angular";
    case KernelKind::LinearAngular: return "linear_angular";
    case KernelKind::ReluS: return "relu_s";
    case KernelKind::ReluE: return "relu_e";
    case KernelKind::Cosine: return "cosine";
  }
  throw ContractError("unknown KernelKind");
}

std::string to_string(Eq9Mode m) {
  return m == Eq9Mode::Literal ? "literal" : "faithful";
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::None: return "none";
    case Pooling::PreQ: return "pre_q";
    case Pooling::PostQ: return "post_q";
  }
  throw ContractError("unknown Pooling");
}

KernelKind kernel_from_string(const std::string& s) {
  if (s == "exact_softmax") return KernelKind::ExactSoftmax;
  if (s == "angular") return KernelKind::Angular;
  if (s == "linear_angular") return KernelKind::LinearAngular;
  if (s == "relu_s") return KernelKind::ReluS;
  if (s == "relu_e") return KernelKind::ReluE;
  if (s == "cosine") return KernelKind::Cosine;
  throw ConfigError("unknown kernel kind: " + s);
}

Eq9Mode mode_from_string(const std::string& s) {
  if (s == "literal") return Eq9Mode::Literal;
  if (s == "faithful") return Eq9Mode::Faithful;
  throw ConfigError("unknown core mode: " + s);
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "none") return Pooling::None;
  if (s == "pre_q") return Pooling::PreQ;
  if (s == "post_q") return Pooling::PostQ;
  throw ConfigError("unknown pooling: " + s);
}

void AttentionConfig::validate() const {
  if (n_q == 0 || n_k == 0 || d == 0 || d_v == 0)
    throw ConfigError("attention extents must be positive");
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw ConfigError("epsilon must lie in [0, 1], got " + std::to_string(epsilon));
  if (mode == Eq9Mode::Literal && n_q != n_k)
    throw ConfigError("literal core mode needs square attention (n_q == n_k)");
  if (use_dwconv) {
    if (dwconv_k % 2 == 0) throw ConfigError("dwconv kernel size must be odd");
    if (n_q != n_k) throw ConfigError("the dwconv branch needs n_q == n_k (it adds conv(V))");
  }
  if ((grid_h == 0) != (grid_w == 0))
    throw ConfigError("grid_h and grid_w must be both zero or both nonzero");
  if (grid_h != 0 && grid_h * grid_w != n_k)
    throw ConfigError("grid extents " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                      " do not cover n_k = " + std::to_string(n_k) + " tokens");
  if (row_normalize && kernel != KernelKind::LinearAngular)
    throw ConfigError("row_normalize only applies to the linear_angular kernel");
}

nlohmann::json AttentionConfig::to_json() const {
  return nlohmann::json{{"schema_version", 1},
                        {"n_q", n_q},
                        {"n_k", n_k},
                        {"d", d},
                        {"d_v", d_v},
                        {"kernel", to_string(kernel)},
                        {"mode", to_string(mode)},
                        {"use_dwconv", use_dwconv},
                        {"dwconv_k", dwconv_k},
                        {"use_aux", use_aux},
                        {"epsilon", epsilon},
                        {"normalize_qk", normalize_qk},
                        {"aux_normalize", aux_normalize},
                        {"row_normalize", row_normalize},
                        {"grid_h", grid_h},
                        {"grid_w", grid_w}};
}

AttentionConfig AttentionConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"schema_version", "n_q", "n_k", "d", "d_v", "kernel", "mode",
                                "use_dwconv", "dwconv_k", "use_aux", "epsilon", "normalize_qk",
                                "aux_normalize", "row_normalize", "grid_h", "grid_w"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return it.key() == k; }) == std::end(known))
      throw ConfigError("unknown attention config key: " + it.key());
  }
  const int version = j.value("schema_version", 1);
  if (version != 1)
    throw ConfigError("unsupported attention config schema_version " + std::to_string(version));
  AttentionConfig c;
  try {
    c.n_q = j.value("n_q", c.n_q);
    c.n_k = j.value("n_k", c.n_k);
    c.d = j.value("d", c.d);
    c.d_v = j.value("d_v", c.d_v);
    if (j.contains("kernel")) c.kernel = kernel_from_string(j["kernel"].get<std::string>());
    if (j.contains("mode")) c.mode = mode_from_string(j["mode"].get<std::string>());
    c.use_dwconv = j.value("use_dwconv", c.use_dwconv);
    c.dwconv_k = j.value("dwconv_k", c.dwconv_k);
    c.use_aux = j.value("use_aux", c.use_aux);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.normalize_qk = j.value("normalize_qk", c.normalize_qk);
    c.aux_normalize = j.value("aux_normalize", c.aux_normalize);
    c.row_normalize = j.value("row_normalize", c.row_normalize);
    c.grid_h = j.value("grid_h", c.grid_h);
    c.grid_w = j.value("grid_w", c.grid_w);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed attention config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- differentiable paths ----------------------------------------------------

Var softmax_attention(Var q, Var k, Var v) {
  check_qkv(q.value(), k.value(), v.value(), "softmax_attention");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  Var z = op_scale(op_matmul(q, op_transpose(k)), scale);
  return op_matmul(op_softmax_rows(z), v);
}

Var kernel_linear_attention(KernelKind phi, Var q, Var k, Var v, double denom_eps) {
  check_qkv(q.value(), k.value(), v.value(), "kernel_linear_attention");
  Var fq = q, fk = k;
  switch (phi) {
    case KernelKind::ReluS:
    case KernelKind::ReluE:
      fq = op_relu(q);
      fk = op_relu(k);
      break;
    case KernelKind::Cosine:
      fq = op_l2_normalize_rows(q);
      fk = op_l2_normalize_rows(k);
      break;
    default:
      throw ConfigError("kernel_linear_attention expects relu_s, relu_e or cosine, got " +
                        to_string(phi));
  }
  Var numer = op_matmul(fq, op_matmul(op_transpose(fk), v));
  if (phi != KernelKind::ReluE) return numer;
  // Eq-3 style denominator: phi(Q) (sum_j phi(K_j))^T, one scalar per query row.
  Var denom = op_matmul(fq, op_transpose(op_colsum(fk)));
  const Tensor& dv = denom.value();
  for (std::size_t i = 0; i < dv.rows(); ++i)
    if (dv(i, 0) < denom_eps)
      throw NumericError("kernel_linear_attention: degenerate normalization, denominator row " +
                         std::to_string(i) + " = " + std::to_string(dv(i, 0)) + " < " +
                         std::to_string(denom_eps));
  return op_div_rowwise(numer, denom);
}

Var quadratic_angular_attention(Var q, Var k, Var v, bool normalize) {
  check_qkv(q.value(), k.value(), v.value(), "quadratic_angular_attention");
  require_nonzero_rows(q.value(), "quadratic_angular_attention Q");
  require_nonzero_rows(k.value(), "quadratic_angular_attention K");
  Var qh = normalize ? op_l2_normalize_rows(q) : q;
  Var kh = normalize ? op_l2_normalize_rows(k) : k;
  Var sim = op_angular_map(op_matmul(qh, op_transpose(kh)));
  return op_matmul(sim, v);
}

Var linear_angular_core(Var q, Var k, Var v, Eq9Mode mode, bool normalize_qk,
                        bool row_normalize) {
  check_qkv(q.value(), k.value(), v.value(), "linear_angular_core");
  const std::size_t n_q = q.value().rows(), n_k = k.value().rows();
  if (mode == Eq9Mode::Literal && n_q != n_k)
    throw ConfigError("linear_angular_core: literal mode needs n_q == n_k, got " +
                      std::to_string(n_q) + " vs " + std::to_string(n_k));
  Var qh = normalize_qk ? op_l2_normalize_rows(q) : q;
  Var kh = normalize_qk ? op_l2_normalize_rows(k) : k;
  // (1/pi) Q (K^T V): right-to-left association is the whole point, O(N d d_v).
  Var core = op_scale(op_matmul(qh, op_matmul(op_transpose(kh), v)), 1.0 / kPi);
  Var half = mode == Eq9Mode::Literal
                 ? op_scale(v, 0.5)
                 : op_scale(op_matmul(ones_leaf(*q.tape, n_q, 1), op_colsum(v)), 0.5);
  Var out = op_add(half, core);
  if (!row_normalize) return out;
  // Row sums of the implied similarity: N_k/2 + (1/pi) Q_i (sum_j K_j)^T.
  Var ksum = op_colsum(kh); // 1 x d
  Var denom = op_add_scalar(op_scale(op_matmul(qh, op_transpose(ksum)), 1.0 / kPi),
                            static_cast<double>(n_k) / 2.0);
  const Tensor& dv = denom.value();
  for (std::size_t i = 0; i < dv.rows(); ++i)
    if (dv(i, 0) < 1e-12)
      throw NumericError("linear_angular_core: similarity row sum " + std::to_string(i) +
                         " is degenerate (" + std::to_string(dv(i, 0)) + ")");
  return op_div_rowwise(out, denom);
}

MaskedAttention masked_softmax_attention(Var q, Var k, Var v, double epsilon, bool normalize_qk) {
  check_qkv(q.value(), k.value(), v.value(), "masked_softmax_attention");
  if (epsilon < 0.0) throw ConfigError("masked_softmax_attention: epsilon must be >= 0");
  Var qh = normalize_qk ? op_l2_normalize_rows(q) : q;
  Var kh = normalize_qk ? op_l2_normalize_rows(k) : k;
  Var scores = op_softmax_rows(op_matmul(qh, op_transpose(kh))); // no 1/sqrt(d) here
  Var kept = op_threshold_keep(scores, epsilon);
  const Tensor& kv = kept.value();
  Tensor mask(kv.shape());
  for (std::size_t i = 0; i < kv.size(); ++i) mask.at(i) = kv.at(i) > 0.0 ? 1.0 : 0.0;
  return MaskedAttention{op_matmul(kept, v), kept, std::move(mask)};
}

CastlingOutput castling_attention(const AttentionConfig& cfg, Var q, Var k, Var v,
                                  Var dw_kernel) {
  cfg.validate();
  if (cfg.kernel != KernelKind::LinearAngular)
    throw ConfigError("castling_attention composes the linear_angular kernel, got " +
                      to_string(cfg.kernel));
  const Tensor& qv = q.value();
  const Tensor& kvv = k.value();
  const Tensor& vv = v.value();
  check_qkv(qv, kvv, vv, "castling_attention");
  if (qv.rows() != cfg.n_q || kvv.rows() != cfg.n_k || qv.cols() != cfg.d || vv.cols() != cfg.d_v)
    throw ShapeError("castling_attention: tensors disagree with config (" +
                     shape_str(qv.shape()) + ", " + shape_str(kvv.shape()) + ", " +
                     shape_str(vv.shape()) + ")");

  Var out = linear_angular_core(q, k, v, cfg.mode, cfg.normalize_qk, cfg.row_normalize);

  if (cfg.use_dwconv) {
    Var conv = [&] {
      if (cfg.grid_h != 0) {
        Var img = op_reshape(v, {cfg.grid_h, cfg.grid_w, cfg.d_v});
        return op_reshape(op_dwconv2d(img, dw_kernel), {cfg.n_k, cfg.d_v});
      }
      return op_dwconv1d(v, dw_kernel);
    }();
    out = op_add(out, conv);
  }

  CastlingOutput result;
  result.output = out;
  if (cfg.use_aux) {
    MaskedAttention aux = masked_softmax_attention(q, k, v, cfg.epsilon, cfg.aux_normalize);
    // When every mask entry is dead the aux product is an exact zero matrix
    // and this add cannot change any output bit.
    result.output = op_add(out, aux.output);
    result.has_aux = true;
    result.aux_kept = aux.kept;
    result.aux_mask = std::move(aux.mask);
  }
  return result;
}

void BlockVariant::validate() const {
  if (stride == 0) throw ConfigError("block stride must be >= 1");
  if (residual_q && pooling != Pooling::PostQ)
    throw ConfigError("residual_q is only defined for post_q pooling");
}

Var attention_block(const BlockVariant& variant, const AttentionConfig& cfg, Var x, Var w_q,
                    Var w_k, Var w_v, Var dw_kernel) {
  variant.validate();
  Var q = [&] {
    switch (variant.pooling) {
      case Pooling::PreQ: return op_matmul(op_avg_pool_tokens(x, variant.stride), w_q);
      case Pooling::PostQ: return op_avg_pool_tokens(op_matmul(x, w_q), variant.stride);
      case Pooling::None: return op_matmul(x, w_q);
    }
    throw ContractError("unknown pooling");
  }();
  Var k = op_matmul(x, w_k);
  Var v = op_matmul(x, w_v);

  AttentionConfig local = cfg;
  local.n_q = q.value().rows();
  local.n_k = k.value().rows();
  local.d = q.value().cols();
  local.d_v = v.value().cols();

  Var out = [&] {
    switch (local.kernel) {
      case KernelKind::ExactSoftmax: return softmax_attention(q, k, v);
      case KernelKind::Angular: return quadratic_angular_attention(q, k, v, local.normalize_qk);
      case KernelKind::LinearAngular: return castling_attention(local, q, k, v, dw_kernel).output;
      default: return kernel_linear_attention(local.kernel, q, k, v);
    }
  }();

  if (variant.residual_q) {
    if (out.value().cols() != q.value().cols())
      throw ShapeError("residual_q needs d_v == d");
    out = op_add(out, q);
  }
  return out;
}

Var mlp_dwconv_block(Var x, Var w1, Var b1, Var dw_kernel, Var w2, Var b2, bool use_dwconv,
                     std::size_t grid_h, std::size_t grid_w) {
  Var h = op_add_rowvec(op_matmul(x, w1), b1);
  if (use_dwconv) {
    if (grid_h != 0) {
      const std::size_t hid = h.value().cols();
      Var img = op_reshape(h, {grid_h, grid_w, hid});
      h = op_reshape(op_dwconv2d(img, dw_kernel), {grid_h * grid_w, hid});
    } else {
      h = op_dwconv1d(h, dw_kernel);
    }
  }
  Var y = op_add_rowvec(op_matmul(op_relu(h), w2), b2);
  return op_add(x, y);
}

// ---- streaming forward kernels -----------------------------------------------

Tensor softmax_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "softmax_attention_fwd");
  const std::size_t n_q = q.rows(), n_k = k.rows(), d = q.cols(), d_v = v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({n_q, d_v});
  std::vector<double> z(n_k);
  for (std::size_t i = 0; i < n_q; ++i) {
    const double* qi = q.data() + i * d;
    double mx = -1e300;
    for (std::size_t j = 0; j < n_k; ++j) {
      const double* kj = k.data() + j * d;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
      z[j] = dot * scale;
      mx = std::max(mx, z[j]);
    }
    double denom = 0.0;
    double* oi = out.data() + i * d_v;
    for (std::size_t j = 0; j < n_k; ++j) {
      const double w = std::exp(z[j] - mx);
      denom += w;
      const double* vj = v.data() + j * d_v;
      for (std::size_t c = 0; c < d_v; ++c) oi[c] += w * vj[c];
    }
    const double inv = 1.0 / denom;
    for (std::size_t c = 0; c < d_v; ++c) oi[c] *= inv;
  }
  return out;
}

Tensor quadratic_angular_fwd(const Tensor& q, const Tensor& k, const Tensor& v, bool normalize) {
  check_qkv(q, k, v, "quadratic_angular_fwd");
  require_nonzero_rows(q, "quadratic_angular_fwd Q");
  require_nonzero_rows(k, "quadratic_angular_fwd K");
  const Tensor qh = normalize ? l2_normalize_rows(q) : q;
  const Tensor kh = normalize ? l2_normalize_rows(k) : k;
  const std::size_t n_q = qh.rows(), n_k = kh.rows(), d = qh.cols(), d_v = v.cols();
  Tensor out({n_q, d_v});
  for (std::size_t i = 0; i < n_q; ++i) {
    const double* qi = qh.data() + i * d;
    double* oi = out.data() + i * d_v;
    for (std::size_t j = 0; j < n_k; ++j) {
      const double* kj = kh.data() + j * d;
      double t = 0.0;
      for (std::size_t c = 0; c < d; ++c) t += qi[c] * kj[c];
      const double sim = 1.0 - std::acos(std::clamp(t, -1.0, 1.0)) / kPi;
      const double* vj = v.data() + j * d_v;
      for (std::size_t c = 0; c < d_v; ++c) oi[c] += sim * vj[c];
    }
  }
  return out;
}

Tensor linear_angular_fwd(const Tensor& q, const Tensor& k, const Tensor& v, Eq9Mode mode,
                          bool normalize_qk) {
  check_qkv(q, k, v, "linear_angular_fwd");
  const std::size_t n_q = q.rows(), n_k = k.rows(), d = q.cols(), d_v = v.cols();
  if (mode == Eq9Mode::Literal && n_q != n_k)
    throw ConfigError("linear_angular_fwd: literal mode needs n_q == n_k");
  const Tensor qh = normalize_qk ? l2_normalize_rows(q) : q;
  const Tensor kh = normalize_qk ? l2_normalize_rows(k) : k;
  // d x d_v summary, then one pass over queries: never forms the N x N map.
  Tensor ktv({d, d_v});
  std::vector<double> vsum(d_v, 0.0);
  for (std::size_t j = 0; j < n_k; ++j) {
    const double* kj = kh.data() + j * d;
    const double* vj = v.data() + j * d_v;
    for (std::size_t c = 0; c < d; ++c) {
      const double kc = kj[c];
      if (kc == 0.0) continue;
      double* row = ktv.data() + c * d_v;
      for (std::size_t e = 0; e < d_v; ++e) row[e] += kc * vj[e];
    }
    for (std::size_t e = 0; e < d_v; ++e) vsum[e] += vj[e];
  }
  Tensor out({n_q, d_v});
  for (std::size_t i = 0; i < n_q; ++i) {
    const double* qi = qh.data() + i * d;
    double* oi = out.data() + i * d_v;
    for (std::size_t c = 0; c < d; ++c) {
      const double qc = qi[c] / kPi;
      if (qc == 0.0) continue;
      const double* row = ktv.data() + c * d_v;
      for (std::size_t e = 0; e < d_v; ++e) oi[e] += qc * row[e];
    }
    const double* half = mode == Eq9Mode::Literal ? v.data() + i * d_v : vsum.data();
    for (std::size_t e = 0; e < d_v; ++e) oi[e] += 0.5 * half[e];
  }
  return out;
}

Tensor kernel_linear_fwd(KernelKind phi, const Tensor& q, const Tensor& k, const Tensor& v,
                         double denom_eps) {
  check_qkv(q, k, v, "kernel_linear_fwd");
  Tensor fq, fk;
  switch (phi) {
    case KernelKind::ReluS:
    case KernelKind::ReluE:
      fq = relu(q);
      fk = relu(k);
      break;
    case KernelKind::Cosine:
      fq = l2_normalize_rows(q);
      fk = l2_normalize_rows(k);
      break;
    default:
      throw ConfigError("kernel_linear_fwd expects relu_s, relu_e or cosine");
  }
  const std::size_t n_q = fq.rows(), n_k = fk.rows(), d = fq.cols(), d_v = v.cols();
  Tensor ktv({d, d_v});
  std::vector<double> ksum(d, 0.0);
  for (std::size_t j = 0; j < n_k; ++j) {
    const double* kj = fk.data() + j * d;
    const double* vj = v.data() + j * d_v;
    for (std::size_t c = 0; c < d; ++c) {
      ksum[c] += kj[c];
      const double kc = kj[c];
      if (kc == 0.0) continue;
      double* row = ktv.data() + c * d_v;
      for (std::size_t e = 0; e < d_v; ++e) row[e] += kc * vj[e];
    }
  }
  Tensor out({n_q, d_v});
  for (std::size_t i = 0; i < n_q; ++i) {
    const double* qi = fq.data() + i * d;
    double* oi = out.data() + i * d_v;
    double denom = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      denom += qi[c] * ksum[c];
      const double qc = qi[c];
      if (qc == 0.0) continue;
      const double* row = ktv.data() + c * d_v;
      for (std::size_t e = 0; e < d_v; ++e) oi[e] += qc * row[e];
    }
    if (phi == KernelKind::ReluE) {
      if (denom < denom_eps)
        throw NumericError("kernel_linear_fwd: degenerate normalization at query row " +
                           std::to_string(i));
      for (std::size_t e = 0; e < d_v; ++e) oi[e] /= denom;
    }
  }
  return out;
}

} // namespace castling::attention
