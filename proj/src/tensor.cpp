#include "castling/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "castling/rng.hpp"

namespace castling {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    n *= e;
  }
  return s.empty() ? 0 : n;
}

void require(bool ok, const char* msg) {
  if (!ok) throw ShapeError(msg);
}

// Builds the message only on failure; several callers sit on hot paths where
// an eagerly formatted string would dominate the actual arithmetic.
template <class MsgFn>
void require_lazy(bool ok, MsgFn&& msg) {
  if (!ok) throw ShapeError(msg());
}

} // namespace

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      cols_(shape_.empty() ? 0 : shape_.back()),
      data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), cols_(shape_.empty() ? 0 : shape_.back()), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size())
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from_rows(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> vals) {
  if (vals.size() != rows * cols)
    throw ShapeError("from_rows: got " + std::to_string(vals.size()) + " values for " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  return Tensor({rows, cols}, std::vector<double>(vals));
}

Tensor Tensor::uniform(Shape shape, SplitMix64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(Shape shape, SplitMix64& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = stddev * rng.normal();
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  require_lazy(rank() == 2,
               [&] { return "rows() needs a rank-1/2 tensor, got " + shape_str(shape_); });
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_lazy(rank() == 1 || rank() == 2,
               [&] { return "cols() needs a rank-1/2 tensor, got " + shape_str(shape_); });
  return shape_.back();
}

Tensor Tensor::reshaped(Shape new_shape) const {
  std::size_t n = 1;
  for (std::size_t e : new_shape) n *= e;
  if (new_shape.empty() || n != size())
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                     " changes element count");
  return Tensor(std::move(new_shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::add_scaled(const Tensor& o, double s) {
  require_lazy(same_shape(o), [&] {
    return "add_scaled shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_);
  });
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
}

void Tensor::scale_in_place(double s) {
  for (double& v : data_) v *= s;
}

// ---- raw kernels ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() <= 2 && b.rank() <= 2, "matmul needs rank-2 operands");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  require_lazy(k == k2, [&] {
    return "matmul inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape());
  });
  Tensor c({m, n});
  // i-k-j loop order keeps the innermost pass contiguous in both b and c.
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    double* crow = c.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() <= 2, "transpose needs a rank-2 tensor");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

namespace {
// Templated on the functor so the per-element call inlines.
template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* name) {
  require_lazy(a.same_shape(b), [&] {
    return std::string(name) + " shape mismatch " + shape_str(a.shape()) + " vs " +
           shape_str(b.shape());
  });
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c.at(i) = f(a.at(i), b.at(i));
  return c;
}
} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x + y; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x - y; }, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x * y; }, "mul");
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  c.scale_in_place(s);
  return c;
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  require(n > 0, "softmax_rows on empty rows");
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(a(i, j) - mx);
      y(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= z;
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor y = a;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j) * a(i, j);
    const double norm = std::sqrt(s);
    if (norm < eps) continue; // near-zero row passes through
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= norm;
  }
  return y;
}

Tensor relu(const Tensor& a) {
  Tensor y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) = std::max(0.0, y.at(i));
  return y;
}

Tensor dwconv1d(const Tensor& x, const Tensor& kernel) {
  require(x.rank() == 2 && kernel.rank() == 2, "dwconv1d: x tokens x c, kernel c x k");
  const std::size_t n = x.rows(), c = x.cols(), kc = kernel.rows(), k = kernel.cols();
  require_lazy(kc == c, [&] {
    return "dwconv1d kernel channel count " + std::to_string(kc) + " != input channels " +
           std::to_string(c);
  });
  require(k % 2 == 1, "dwconv1d kernel width must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor y({n, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue; // zero padding
        acc += kernel(ch, t) * x(static_cast<std::size_t>(src), ch);
      }
      y(i, ch) = acc;
    }
  }
  return y;
}

Tensor dwconv2d(const Tensor& x, const Tensor& kernel) {
  require(x.rank() == 3, "dwconv2d: x must be H x W x c");
  require(kernel.rank() == 3, "dwconv2d: kernel must be c x k x k");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const std::size_t kc = kernel.shape()[0], k = kernel.shape()[1];
  require(kernel.shape()[2] == k, "dwconv2d kernel must be square");
  require(kc == c, "dwconv2d kernel channels != input channels");
  require(k % 2 == 1, "dwconv2d kernel width must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor y({h, w, c});
  auto xat = [&](std::size_t r, std::size_t cc, std::size_t ch) {
    return x.at((r * w + cc) * c + ch);
  };
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t cc = 0; cc < w; ++cc)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r) + static_cast<std::ptrdiff_t>(u) - half;
            const std::ptrdiff_t cs = static_cast<std::ptrdiff_t>(cc) + static_cast<std::ptrdiff_t>(v) - half;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cs < 0 ||
                cs >= static_cast<std::ptrdiff_t>(w))
              continue;
            acc += kernel.at((ch * k + u) * k + v) *
                   xat(static_cast<std::size_t>(rr), static_cast<std::size_t>(cs), ch);
          }
        y.at((r * w + cc) * c + ch) = acc;
      }
  return y;
}

Tensor avg_pool_tokens(const Tensor& x, std::size_t stride) {
  require(x.rank() == 2, "avg_pool_tokens: x must be tokens x d");
  if (stride == 0) throw ConfigError("avg_pool_tokens stride must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t out = (n + stride - 1) / stride;
  Tensor y({out, d});
  for (std::size_t o = 0; o < out; ++o) {
    const std::size_t lo = o * stride;
    const std::size_t hi = std::min(n, lo + stride);
    const double inv = 1.0 / static_cast<double>(hi - lo); // partial window: actual count
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t i = lo; i < hi; ++i) acc += x(i, j);
      y(o, j) = acc * inv;
    }
  }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

} // namespace castling
