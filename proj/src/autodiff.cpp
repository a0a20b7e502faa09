#include "castling/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace castling {

const Tensor& Var::value() const { return tape->value_of(id); }
const Tensor& Var::grad() const { return const_cast<Tape*>(tape)->grad_of(id); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, nullptr, &p, p.requires_grad});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
  bool needs = false;
  for (std::size_t pid : parents) needs = needs || nodes_[pid].needs_grad;
  nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(fn), nullptr, needs});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss Var belongs to another tape");
  if (loss.id >= nodes_.size()) throw ContractError("backward: dangling Var");
  if (nodes_[loss.id].value.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(nodes_[loss.id].value.shape()));
  grad_of(loss.id).fill(1.0);
  // Execution order is a topological order, so one reverse sweep suffices.
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (Node& n : nodes_) {
    if (n.bound && n.bound->requires_grad && !n.grad.empty())
      n.bound->grad.add_scaled(n.grad, 1.0);
  }
}

namespace {

// Accumulate into a parent only if some parameter depends on it.
void accum(Tape& t, std::size_t pid, const Tensor& delta) {
  if (!t.needs_grad(pid)) return;
  t.grad_of(pid).add_scaled(delta, 1.0);
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                                      shape_str(t.shape()));
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands from different tapes");
}

} // namespace

Var op_add(Var a, Var b) {
  require_same_tape(a, b, "op_add");
  Tensor y = add(a.value(), b.value());
  return a.tape->record(std::move(y), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    accum(t, a.id, g);
    accum(t, b.id, g);
  });
}

Var op_sub(Var a, Var b) {
  require_same_tape(a, b, "op_sub");
  Tensor y = sub(a.value(), b.value());
  return a.tape->record(std::move(y), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    accum(t, a.id, g);
    if (t.needs_grad(b.id)) t.grad_of(b.id).add_scaled(g, -1.0);
  });
}

Var op_mul(Var a, Var b) {
  require_same_tape(a, b, "op_mul");
  Tensor y = mul(a.value(), b.value());
  return a.tape->record(std::move(y), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(a.id)) t.grad_of(a.id).add_scaled(mul(g, t.value_of(b.id)), 1.0);
    if (t.needs_grad(b.id)) t.grad_of(b.id).add_scaled(mul(g, t.value_of(a.id)), 1.0);
  });
}

Var op_scale(Var a, double s) {
  Tensor y = scale(a.value(), s);
  return a.tape->record(std::move(y), {a.id}, [a, s](Tape& t, std::size_t self) {
    if (t.needs_grad(a.id)) t.grad_of(a.id).add_scaled(t.grad_of(self), s);
  });
}

Var op_add_scalar(Var a, double c) {
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) += c;
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    accum(t, a.id, t.grad_of(self));
  });
}

Var op_matmul(Var a, Var b) {
  require_same_tape(a, b, "op_matmul");
  require_rank2(a.value(), "op_matmul lhs");
  require_rank2(b.value(), "op_matmul rhs");
  Tensor y = matmul(a.value(), b.value());
  return a.tape->record(std::move(y), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(a.id))
      t.grad_of(a.id).add_scaled(matmul(g, transpose(t.value_of(b.id))), 1.0);
    if (t.needs_grad(b.id))
      t.grad_of(b.id).add_scaled(matmul(transpose(t.value_of(a.id)), g), 1.0);
  });
}

Var op_transpose(Var a) {
  require_rank2(a.value(), "op_transpose");
  Tensor y = transpose(a.value());
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    if (t.needs_grad(a.id)) t.grad_of(a.id).add_scaled(transpose(t.grad_of(self)), 1.0);
  });
}

Var op_relu(Var a) {
  Tensor y = relu(a.value());
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a.id)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& x = t.value_of(a.id);
    Tensor& da = t.grad_of(a.id);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x.at(i) > 0.0) da.at(i) += g.at(i);
  });
}

Var op_tanh(Var a) {
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) = std::tanh(y.at(i));
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a.id)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y2 = t.value_of(self);
    Tensor& da = t.grad_of(a.id);
    for (std::size_t i = 0; i < y2.size(); ++i)
      da.at(i) += g.at(i) * (1.0 - y2.at(i) * y2.at(i));
  });
}

Var op_softmax_rows(Var a) {
  require_rank2(a.value(), "op_softmax_rows");
  Tensor y = softmax_rows(a.value());
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a.id)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y2 = t.value_of(self);
    Tensor& da = t.grad_of(a.id);
    const std::size_t m = y2.rows(), n = y2.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y2(i, j);
      for (std::size_t j = 0; j < n; ++j) da(i, j) += y2(i, j) * (g(i, j) - dot);
    }
  });
}

Var op_l2_normalize_rows(Var a, double eps) {
  require_rank2(a.value(), "op_l2_normalize_rows");
  Tensor y = l2_normalize_rows(a.value(), eps);
  return a.tape->record(std::move(y), {a.id}, [a, eps](Tape& t, std::size_t self) {
    if (!t.needs_grad(a.id)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& x = t.value_of(a.id);
    const Tensor& y2 = t.value_of(self);
    Tensor& da = t.grad_of(a.id);
    const std::size_t m = x.rows(), n = x.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x(i, j) * x(i, j);
      const double norm = std::sqrt(s);
      if (norm < eps) { // passthrough row: identity jacobian
        for (std::size_t j = 0; j < n; ++j) da(i, j) += g(i, j);
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y2(i, j);
      for (std::size_t j = 0; j < n; ++j) da(i, j) += (g(i, j) - y2(i, j) * dot) / norm;
    }
  });
}

Var op_dwconv1d(Var x, Var kernel) {
  require_same_tape(x, kernel, "op_dwconv1d");
  Tensor y = dwconv1d(x.value(), kernel.value());
  return x.tape->record(std::move(y), {x.id, kernel.id}, [x, kernel](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& kv = t.value_of(kernel.id);
    const bool need_x = t.needs_grad(x.id), need_k = t.needs_grad(kernel.id);
    if (!need_x && !need_k) return;
    const std::size_t n = xv.rows(), c = xv.cols(), k = kv.cols();
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
    Tensor* dx = need_x ? &t.grad_of(x.id) : nullptr;
    Tensor* dk = need_k ? &t.grad_of(kernel.id) : nullptr;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g(i, ch);
        if (gi == 0.0) continue;
        for (std::size_t tap = 0; tap < k; ++tap) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(tap) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
          const auto s = static_cast<std::size_t>(src);
          if (dx) (*dx)(s, ch) += kv(ch, tap) * gi;
          if (dk) (*dk)(ch, tap) += xv(s, ch) * gi;
        }
      }
  });
}

Var op_dwconv2d(Var x, Var kernel) {
  require_same_tape(x, kernel, "op_dwconv2d");
  Tensor y = dwconv2d(x.value(), kernel.value());
  return x.tape->record(std::move(y), {x.id, kernel.id}, [x, kernel](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& kv = t.value_of(kernel.id);
    const bool need_x = t.needs_grad(x.id), need_k = t.needs_grad(kernel.id);
    if (!need_x && !need_k) return;
    const std::size_t h = xv.shape()[0], w = xv.shape()[1], c = xv.shape()[2];
    const std::size_t k = kv.shape()[1];
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
    Tensor* dx = need_x ? &t.grad_of(x.id) : nullptr;
    Tensor* dk = need_k ? &t.grad_of(kernel.id) : nullptr;
    auto idx3 = [&](std::size_t r, std::size_t cc, std::size_t ch) { return (r * w + cc) * c + ch; };
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t cc = 0; cc < w; ++cc)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double gi = g.at(idx3(r, cc, ch));
          if (gi == 0.0) continue;
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const std::ptrdiff_t rr =
                  static_cast<std::ptrdiff_t>(r) + static_cast<std::ptrdiff_t>(u) - half;
              const std::ptrdiff_t cs =
                  static_cast<std::ptrdiff_t>(cc) + static_cast<std::ptrdiff_t>(v) - half;
              if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cs < 0 ||
                  cs >= static_cast<std::ptrdiff_t>(w))
                continue;
              const auto r2 = static_cast<std::size_t>(rr), c2 = static_cast<std::size_t>(cs);
              if (dx) dx->at(idx3(r2, c2, ch)) += kv.at((ch * k + u) * k + v) * gi;
              if (dk) dk->at((ch * k + u) * k + v) += xv.at(idx3(r2, c2, ch)) * gi;
            }
        }
  });
}

Var op_avg_pool_tokens(Var x, std::size_t stride) {
  Tensor y = avg_pool_tokens(x.value(), stride);
  return x.tape->record(std::move(y), {x.id}, [x, stride](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_of(x.id);
    const std::size_t n = dx.rows(), d = dx.cols(), out = g.rows();
    for (std::size_t o = 0; o < out; ++o) {
      const std::size_t lo = o * stride, hi = std::min(n, lo + stride);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t j = 0; j < d; ++j) {
        const double gv = g(o, j) * inv;
        for (std::size_t i = lo; i < hi; ++i) dx(i, j) += gv;
      }
    }
  });
}

Var op_colsum(Var x) {
  require_rank2(x.value(), "op_colsum");
  const Tensor& v = x.value();
  Tensor y({1, v.cols()});
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) y(0, j) += v(i, j);
  return x.tape->record(std::move(y), {x.id}, [x](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) += g(0, j);
  });
}

Var op_mean_rows(Var x) {
  require_rank2(x.value(), "op_mean_rows");
  const Tensor& v = x.value();
  const double inv = 1.0 / static_cast<double>(v.rows());
  Tensor y({1, v.cols()});
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) y(0, j) += v(i, j) * inv;
  return x.tape->record(std::move(y), {x.id}, [x, inv](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) += g(0, j) * inv;
  });
}

Var op_sum_all(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->record(Tensor({1, 1}, {s}), {x.id}, [x](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const double g = t.grad_of(self).at(0);
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.at(i) += g;
  });
}

Var op_mean_all(Var x) {
  const double inv = 1.0 / static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->record(Tensor({1, 1}, {s * inv}), {x.id}, [x, inv](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const double g = t.grad_of(self).at(0) * inv;
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.at(i) += g;
  });
}

Var op_slice_cols(Var x, std::size_t c0, std::size_t c1) {
  require_rank2(x.value(), "op_slice_cols");
  const Tensor& v = x.value();
  if (!(c0 < c1 && c1 <= v.cols()))
    throw ShapeError("op_slice_cols: bad column range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + shape_str(v.shape()));
  Tensor y({v.rows(), c1 - c0});
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) y(i, j - c0) = v(i, j);
  return x.tape->record(std::move(y), {x.id}, [x, c0, c1](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = c0; j < c1; ++j) dx(i, j) += g(i, j - c0);
  });
}

Var op_concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("op_concat_cols: no operands");
  Tape* tape = xs[0].tape;
  std::size_t total = 0;
  const std::size_t m = xs[0].value().rows();
  std::vector<std::size_t> parents;
  for (const Var& x : xs) {
    require_rank2(x.value(), "op_concat_cols");
    if (x.tape != tape) throw ContractError("op_concat_cols: operands from different tapes");
    if (x.value().rows() != m) throw ShapeError("op_concat_cols: row counts disagree");
    total += x.value().cols();
    parents.push_back(x.id);
  }
  Tensor y({m, total});
  std::size_t off = 0;
  for (const Var& x : xs) {
    const Tensor& v = x.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) y(i, off + j) = v(i, j);
    off += v.cols();
  }
  std::vector<Var> saved = xs;
  return tape->record(std::move(y), std::move(parents), [saved](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (const Var& x : saved) {
      const std::size_t c = t.value_of(x.id).cols();
      if (t.needs_grad(x.id)) {
        Tensor& dx = t.grad_of(x.id);
        for (std::size_t i = 0; i < dx.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) dx(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

Var op_concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("op_concat_rows: no operands");
  Tape* tape = xs[0].tape;
  const std::size_t n = xs[0].value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> parents;
  for (const Var& x : xs) {
    require_rank2(x.value(), "op_concat_rows");
    if (x.tape != tape) throw ContractError("op_concat_rows: operands from different tapes");
    if (x.value().cols() != n) throw ShapeError("op_concat_rows: column counts disagree");
    total += x.value().rows();
    parents.push_back(x.id);
  }
  Tensor y({total, n});
  std::size_t off = 0;
  for (const Var& x : xs) {
    const Tensor& v = x.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) y(off + i, j) = v(i, j);
    off += v.rows();
  }
  std::vector<Var> saved = xs;
  return tape->record(std::move(y), std::move(parents), [saved, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (const Var& x : saved) {
      const std::size_t m = t.value_of(x.id).rows();
      if (t.needs_grad(x.id)) {
        Tensor& dx = t.grad_of(x.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dx(i, j) += g(off + i, j);
      }
      off += m;
    }
  });
}

Var op_reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(shape);
  return x.tape->record(std::move(y), {x.id}, [x](Tape& t, std::size_t self) {
    if (!t.needs_grad(x.id)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_of(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.at(i) += g.at(i);
  });
}

Var op_add_rowvec(Var x, Var row) {
  require_same_tape(x, row, "op_add_rowvec");
  require_rank2(x.value(), "op_add_rowvec x");
  const Tensor& v = x.value();
  const Tensor& r = row.value();
  if (r.rows() != 1 || r.cols() != v.cols())
    throw ShapeError("op_add_rowvec: row must be 1 x " + std::to_string(v.cols()) + ", got " +
                     shape_str(r.shape()));
  Tensor y = v;
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) y(i, j) += r(0, j);
  return x.tape->record(std::move(y), {x.id, row.id}, [x, row](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    accum(t, x.id, g);
    if (t.needs_grad(row.id)) {
      Tensor& dr = t.grad_of(row.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) dr(0, j) += g(i, j);
    }
  });
}

Var op_div_rowwise(Var x, Var denom) {
  require_same_tape(x, denom, "op_div_rowwise");
  require_rank2(x.value(), "op_div_rowwise x");
  const Tensor& v = x.value();
  const Tensor& d = denom.value();
  if (d.rows() != v.rows() || d.cols() != 1)
    throw ShapeError("op_div_rowwise: denom must be " + std::to_string(v.rows()) + " x 1, got " +
                     shape_str(d.shape()));
  Tensor y = v;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const double inv = 1.0 / d(i, 0);
    for (std::size_t j = 0; j < v.cols(); ++j) y(i, j) *= inv;
  }
  return x.tape->record(std::move(y), {x.id, denom.id}, [x, denom](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& dv = t.value_of(denom.id);
    const std::size_t m = xv.rows(), n = xv.cols();
    const bool need_x = t.needs_grad(x.id), need_d = t.needs_grad(denom.id);
    Tensor* dx = need_x ? &t.grad_of(x.id) : nullptr;
    Tensor* dd = need_d ? &t.grad_of(denom.id) : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
      const double inv = 1.0 / dv(i, 0);
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (dx) (*dx)(i, j) += g(i, j) * inv;
        acc += g(i, j) * xv(i, j);
      }
      if (dd) (*dd)(i, 0) += -acc * inv * inv;
    }
  });
}

Var op_threshold_keep(Var x, double eps) {
  const Tensor& v = x.value();
  Tensor y = v;
  Tensor mask(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.at(i) > eps) {
      mask.at(i) = 1.0;
    } else {
      y.at(i) = 0.0;
    }
  }
  return x.tape->record(std::move(y), {x.id},
                        [x, mask = std::move(mask)](Tape& t, std::size_t self) {
                          if (!t.needs_grad(x.id)) return;
                          const Tensor& g = t.grad_of(self);
                          Tensor& dx = t.grad_of(x.id);
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            dx.at(i) += g.at(i) * mask.at(i);
                        });
}

Var op_cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  require_rank2(logits.value(), "op_cross_entropy");
  const Tensor& z = logits.value();
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b)
    throw ShapeError("op_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  for (std::size_t l : labels)
    if (l >= c) throw DomainError("op_cross_entropy: label " + std::to_string(l) +
                                  " out of range for " + std::to_string(c) + " classes");
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = z(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z(i, j));
    double lse = 0.0;
    for (std::size_t j = 0; j < c; ++j) lse += std::exp(z(i, j) - mx);
    loss += std::log(lse) + mx - z(i, labels[i]);
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab = labels;
  return logits.tape->record(
      Tensor({1, 1}, {loss}), {logits.id}, [logits, lab = std::move(lab)](Tape& t, std::size_t self) {
        if (!t.needs_grad(logits.id)) return;
        const double g = t.grad_of(self).at(0);
        const Tensor& z2 = t.value_of(logits.id);
        const Tensor sm = softmax_rows(z2);
        Tensor& dz = t.grad_of(logits.id);
        const std::size_t b2 = z2.rows(), c2 = z2.cols();
        const double inv = g / static_cast<double>(b2);
        for (std::size_t i = 0; i < b2; ++i)
          for (std::size_t j = 0; j < c2; ++j)
            dz(i, j) += inv * (sm(i, j) - (j == lab[i] ? 1.0 : 0.0));
      });
}

Var op_layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain, "op_layer_norm_rows");
  require_same_tape(x, bias, "op_layer_norm_rows");
  require_rank2(x.value(), "op_layer_norm_rows");
  const Tensor& v = x.value();
  const Tensor& gm = gain.value();
  const Tensor& bt = bias.value();
  const std::size_t m = v.rows(), n = v.cols();
  if (gm.rows() != 1 || gm.cols() != n || bt.rows() != 1 || bt.cols() != n)
    throw ShapeError("op_layer_norm_rows: gain/bias must be 1 x " + std::to_string(n));
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += v(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (v(i, j) - mu) * (v(i, j) - mu);
    var /= static_cast<double>(n);
    const double inv_s = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = (v(i, j) - mu) * inv_s * gm(0, j) + bt(0, j);
  }
  return x.tape->record(
      std::move(y), {x.id, gain.id, bias.id}, [x, gain, bias, eps](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& xv = t.value_of(x.id);
        const Tensor& gm = t.value_of(gain.id);
        const std::size_t m = xv.rows(), n = xv.cols();
        const bool need_x = t.needs_grad(x.id);
        const bool need_g = t.needs_grad(gain.id);
        const bool need_b = t.needs_grad(bias.id);
        Tensor* dx = need_x ? &t.grad_of(x.id) : nullptr;
        Tensor* dg = need_g ? &t.grad_of(gain.id) : nullptr;
        Tensor* db = need_b ? &t.grad_of(bias.id) : nullptr;
        std::vector<double> xhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mu = 0.0;
          for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
          mu /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
          var /= static_cast<double>(n);
          const double inv_s = 1.0 / std::sqrt(var + eps);
          for (std::size_t j = 0; j < n; ++j) xhat[j] = (xv(i, j) - mu) * inv_s;
          if (dg)
            for (std::size_t j = 0; j < n; ++j) (*dg)(0, j) += g(i, j) * xhat[j];
          if (db)
            for (std::size_t j = 0; j < n; ++j) (*db)(0, j) += g(i, j);
          if (dx) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g(i, j) * gm(0, j);
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xhat[j];
            }
            mean_dxh /= static_cast<double>(n);
            mean_dxh_xh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g(i, j) * gm(0, j);
              (*dx)(i, j) += (dxh - mean_dxh - xhat[j] * mean_dxh_xh) * inv_s;
            }
          }
        }
      });
}

} // namespace castling
