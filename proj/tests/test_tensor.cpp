#include <doctest.h>

#include <cmath>
#include <vector>

#include "castling/errors.hpp"
#include "castling/rng.hpp"
#include "castling/tensor.hpp"

using namespace castling;

namespace {

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

} // namespace

TEST_CASE("tensor construction and accessors") {
  Tensor z({2, 3});
  CHECK(z.rank() == 2);
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);
  CHECK(z.size() == 6);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.at(i) == 0.0);

  Tensor f = Tensor::full({2, 2}, 3.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.at(i) == 3.5);

  Tensor r = Tensor::from_rows(2, 2, {1, 2, 3, 4});
  CHECK(r(0, 0) == 1.0);
  CHECK(r(0, 1) == 2.0);
  CHECK(r(1, 0) == 3.0);
  CHECK(r(1, 1) == 4.0);

  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("rank-1 tensors act as a single row") {
  Tensor v({4}, {1, 2, 3, 4});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 4);
}

TEST_CASE("seeded random constructors are deterministic") {
  SplitMix64 a(42), b(42), c(43);
  Tensor ta = Tensor::normal({3, 3}, a, 0.5);
  Tensor tb = Tensor::normal({3, 3}, b, 0.5);
  Tensor tc = Tensor::normal({3, 3}, c, 0.5);
  CHECK(max_abs_diff(ta, tb) == 0.0);
  CHECK(max_abs_diff(ta, tc) > 0.0);

  SplitMix64 u1(7), u2(7);
  Tensor ua = Tensor::uniform({4}, u1, -1.0, 1.0);
  Tensor ub = Tensor::uniform({4}, u2, -1.0, 1.0);
  CHECK(max_abs_diff(ua, ub) == 0.0);
  for (double x : ua.values()) {
    CHECK(x >= -1.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("matmul against hand results") {
  Tensor a = Tensor::from_rows(2, 2, {1, 2, 3, 4});
  Tensor out = matmul(identity(2), a);
  CHECK(max_abs_diff(out, a) == 0.0);

  Tensor row = Tensor::from_rows(1, 2, {1, 2});
  Tensor col = Tensor::from_rows(2, 1, {3, 4});
  Tensor prod = matmul(row, col);
  CHECK(prod.rows() == 1);
  CHECK(prod.cols() == 1);
  CHECK(prod.at(0) == 11.0);

  Tensor zero({2, 2});
  Tensor az = matmul(a, zero);
  for (double x : az.values()) CHECK(x == 0.0);
}

TEST_CASE("matmul rejects inner-extent mismatch") {
  Tensor a({2, 3});
  Tensor b({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul is associative to 1e-9 on random inputs up to 64") {
  SplitMix64 rng(2024);
  for (int rep = 0; rep < 4; ++rep) {
    std::size_t m = 3 + 61 * (rep % 2);   // 3 or 64
    std::size_t k1 = 5 + 27 * (rep / 2);  // 5 or 32
    std::size_t k2 = 7;
    std::size_t n = 11;
    Tensor a = Tensor::normal({m, k1}, rng, 1.0);
    Tensor b = Tensor::normal({k1, k2}, rng, 1.0);
    Tensor c = Tensor::normal({k2, n}, rng, 1.0);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left, right) < 1e-9);
  }
}

TEST_CASE("transpose swaps extents and is an involution") {
  Tensor a = Tensor::from_rows(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor t = transpose(a);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 2);
  CHECK(t(0, 1) == 4.0);
  CHECK(t(2, 0) == 3.0);
  CHECK(max_abs_diff(transpose(t), a) == 0.0);
}

TEST_CASE("elementwise add, sub, mul, scale") {
  Tensor a = Tensor::from_rows(1, 3, {1, 2, 3});
  Tensor b = Tensor::from_rows(1, 3, {10, 20, 30});
  CHECK(max_abs_diff(add(a, b), Tensor::from_rows(1, 3, {11, 22, 33})) == 0.0);
  CHECK(max_abs_diff(sub(b, a), Tensor::from_rows(1, 3, {9, 18, 27})) == 0.0);
  CHECK(max_abs_diff(mul(a, b), Tensor::from_rows(1, 3, {10, 40, 90})) == 0.0);
  CHECK(max_abs_diff(scale(a, -2.0), Tensor::from_rows(1, 3, {-2, -4, -6})) == 0.0);
  Tensor wrong({3, 1});
  CHECK_THROWS_AS(add(a, wrong), ShapeError);
  CHECK_THROWS_AS(mul(a, wrong), ShapeError);
}

TEST_CASE("softmax rows match the two-entry fixture") {
  Tensor x = Tensor::from_rows(1, 2, {1, 0});
  Tensor s = softmax_rows(x);
  CHECK(s.at(0) == doctest::Approx(0.731059).epsilon(1e-5));
  CHECK(s.at(1) == doctest::Approx(0.268941).epsilon(1e-5));
}

TEST_CASE("softmax rows sum to one and ignore row-constant shifts") {
  SplitMix64 rng(11);
  Tensor x = Tensor::normal({5, 7}, rng, 3.0);
  Tensor s = softmax_rows(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(s(r, c) > 0.0);
      sum += s(r, c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  Tensor shifted = x;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 7; ++c) shifted(r, c) += 100.0 + 3.0 * double(r);
  CHECK(max_abs_diff(softmax_rows(shifted), s) < 1e-12);
}

TEST_CASE("softmax survives large magnitudes via max subtraction") {
  Tensor x = Tensor::from_rows(1, 2, {1000.0, 999.0});
  Tensor s = softmax_rows(x);
  CHECK(s.all_finite());
  CHECK(s.at(0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-12));
}

TEST_CASE("l2 row normalization fixture and edge rows") {
  Tensor x = Tensor::from_rows(1, 2, {3, 4});
  Tensor n = l2_normalize_rows(x);
  CHECK(n.at(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n.at(1) == doctest::Approx(0.8).epsilon(1e-12));

  Tensor unit = Tensor::from_rows(1, 2, {0, 1});
  CHECK(max_abs_diff(l2_normalize_rows(unit), unit) < 1e-15);

  Tensor zero({2, 3});
  Tensor nz = l2_normalize_rows(zero);
  CHECK(nz.all_finite());
  CHECK(max_abs_diff(nz, zero) == 0.0);
}

TEST_CASE("l2 normalization makes every nonzero row unit length") {
  SplitMix64 rng(5);
  Tensor x = Tensor::normal({6, 4}, rng, 2.0);
  Tensor n = l2_normalize_rows(x);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += n(r, c) * n(r, c);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("relu clamps negatives only") {
  Tensor x = Tensor::from_rows(1, 4, {-2, 0, 0.5, 3});
  CHECK(max_abs_diff(relu(x), Tensor::from_rows(1, 4, {0, 0, 0.5, 3})) == 0.0);
}

TEST_CASE("depthwise 1-D convolution fixtures") {
  Tensor x({3, 1}, {1, 2, 3});      // tokens x channels
  Tensor box({1, 3}, {1, 1, 1});    // channels x k
  Tensor y = dwconv1d(x, box);
  CHECK(max_abs_diff(y, Tensor({3, 1}, {3, 6, 5})) == 0.0);

  Tensor delta({1, 3}, {0, 1, 0});
  CHECK(max_abs_diff(dwconv1d(x, delta), x) == 0.0);

  Tensor zero_k({1, 3});
  Tensor yz = dwconv1d(x, zero_k);
  for (double v : yz.values()) CHECK(v == 0.0);
}

TEST_CASE("depthwise 1-D convolution is per channel") {
  // Two channels with different kernels must not mix.
  Tensor x({3, 2}, {1, 10, 2, 20, 3, 30});
  Tensor k({2, 3}, {0, 1, 0, /*ch1*/ 0, 2, 0});
  Tensor y = dwconv1d(x, k);
  CHECK(max_abs_diff(y, Tensor({3, 2}, {1, 20, 2, 40, 3, 60})) == 0.0);
  Tensor even({2, 2});
  CHECK_THROWS_AS(dwconv1d(x, even), ShapeError); // kernel width must be odd
}

TEST_CASE("depthwise 2-D convolution fixtures") {
  Tensor one({1, 1, 1}, {5});
  Tensor k1({1, 1, 1}, {1});
  CHECK(dwconv2d(one, k1).at(0) == 5.0);

  Tensor img = Tensor::ones({2, 2, 1});
  Tensor box = Tensor::ones({1, 3, 3});
  Tensor y = dwconv2d(img, box);
  CHECK(y.shape() == Shape{2, 2, 1});
  for (double v : y.values()) CHECK(v == 4.0);
}

TEST_CASE("depthwise 2-D delta kernel is the identity") {
  SplitMix64 rng(9);
  Tensor img = Tensor::normal({4, 5, 3}, rng, 1.0);
  Tensor delta({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) delta.at(c * 9 + 4) = 1.0; // center tap
  CHECK(max_abs_diff(dwconv2d(img, delta), img) < 1e-15);
  Tensor bad({2, 3, 3});
  CHECK_THROWS_AS(dwconv2d(img, bad), ShapeError); // channel mismatch
}

TEST_CASE("token average pooling fixtures") {
  Tensor x({4, 1}, {1, 3, 5, 7});
  CHECK(max_abs_diff(avg_pool_tokens(x, 2), Tensor({2, 1}, {2, 6})) == 0.0);

  Tensor odd({3, 1}, {1, 2, 3});
  Tensor pooled = avg_pool_tokens(odd, 2);
  CHECK(max_abs_diff(pooled, Tensor({2, 1}, {1.5, 3})) == 0.0);

  CHECK(max_abs_diff(avg_pool_tokens(x, 1), x) == 0.0);
  CHECK_THROWS_AS(avg_pool_tokens(x, 0), ConfigError);
}

TEST_CASE("reshape preserves data and rejects bad sizes") {
  Tensor x = Tensor::from_rows(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor r = x.reshaped({3, 2});
  CHECK(r(2, 1) == 6.0);
  CHECK_THROWS_AS(x.reshaped({4, 2}), ShapeError);
}

TEST_CASE("max_abs_diff demands matching shapes") {
  Tensor a({2, 2});
  Tensor b({4});
  CHECK_THROWS_AS(max_abs_diff(a, b), ShapeError);
}
