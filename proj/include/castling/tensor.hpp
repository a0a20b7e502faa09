#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "castling/errors.hpp"

namespace castling {

class SplitMix64;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense tensor of 64-bit reals. Storage is always row-major and contiguous;
// there are no views or strides, so aliasing bugs are impossible by
// construction and every kernel can assume flat iteration order. All numerics
// in this project run in double; float positive checks live in the tests.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape);            // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor from_rows(std::size_t rows, std::size_t cols,
                          std::initializer_list<double> vals);
  static Tensor uniform(Shape shape, SplitMix64& rng, double lo, double hi);
  static Tensor normal(Shape shape, SplitMix64& rng, double stddev);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // rows()/cols() are the 2-D accessors most kernels use; rank-1 tensors are
  // treated as a single row so vector-valued helpers compose with them.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }

  double& at(std::size_t i) { return data_[i]; }
  double at(std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape new_shape) const;

  void fill(double v);
  bool all_finite() const;

  // Elementwise in-place helpers used by the optimizer and backward passes.
  void add_scaled(const Tensor& o, double s); // *this += s * o
  void scale_in_place(double s);

private:
  Shape shape_;
  std::size_t cols_ = 0; // cached innermost extent for operator()
  std::vector<double> data_;
};

// ---- raw (non-differentiable) kernels ---------------------------------------
// These are the single source of truth for forward math; the autodiff ops call
// them and the streaming benchmark paths reuse them where shapes allow.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// Row-wise softmax with max subtraction; rows must be non-empty.
Tensor softmax_rows(const Tensor& a);

// Rows with L2 norm below eps pass through unchanged (a zero row stays zero
// rather than producing NaN); all other rows are scaled to unit norm.
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

Tensor relu(const Tensor& a);

// Depthwise 1-D convolution over the token axis. x is tokens x channels,
// kernel is channels x k (k odd), zero padding keeps the token count.
Tensor dwconv1d(const Tensor& x, const Tensor& kernel);

// Depthwise 2-D convolution on an H x W x c rank-3 tensor, kernel c x k x k,
// zero padded, same spatial extents out.
Tensor dwconv2d(const Tensor& x, const Tensor& kernel);

// Average pooling over the token axis with the given stride (window == stride).
// A partial trailing window is averaged over the tokens actually present.
Tensor avg_pool_tokens(const Tensor& x, std::size_t stride);

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace castling
