#pragma once

#include <span>
#include <vector>

namespace castling::angular {

// Angle between two nonzero vectors in [0, pi]. The cosine ratio is clamped
// into [-1, 1] before arccos so that 1 + 1e-16 style rounding artifacts can
// never produce NaN; the clamp is exact for valid inputs.
double spectral_angle(std::span<const double> x, std::span<const double> y);

// Angular similarity 1 - theta/pi, in [0, 1]. 1 for identical directions,
// 0.5 for orthogonal ones, 0 for opposite ones.
double angular_similarity(std::span<const double> q, std::span<const double> k);

// Squared distance of the implicit angular feature map, (2/pi) * theta,
// in [0, 2]. Identity: feature_distance == 2 * (1 - angular_similarity).
double feature_distance(std::span<const double> x, std::span<const double> y);

// Closed form of the similarity as a function of the unit-vector inner
// product t: 1/2 + arcsin(t)/pi. This is also the target curve of the
// frequency-learning experiment.
double exact_similarity(double t);

// k-th arcsin series coefficient, (2k)! / (2^{2k} (k!)^2 (2k+1)), k >= 1.
// Evaluated by the product recurrence a_k = a_{k-1} * (2k-1)^2 / (2k(2k+1))
// from a_0 = 1; raw factorials would overflow past k = 10, the recurrence is
// exact-in-doubles far beyond the orders used here.
double arcsin_coefficient(int k);

// A truncation of the arcsin series: the linear term plus the first `order`
// odd residual terms, with the coefficients precomputed.
struct SeriesTruncation {
  int order = 0;
  std::vector<double> coefficients; // alpha_1 .. alpha_order

  static SeriesTruncation of_order(int k);
};

// 1/2 + t/pi + (1/pi) sum_{k=1..K} alpha_k t^{2k+1} for |t| <= 1.
double truncated_similarity(double t, const SeriesTruncation& trunc);

// Certified upper bound on |exact_similarity(t) - truncated_similarity(t, K)|:
// 64 explicit tail terms plus a geometric majorant with ratio t^2 (valid since
// alpha_k decreases). Requires |t| <= 1 - 1e-6; at t -> 1 the series converges
// too slowly for the majorant to stay tight.
double residual_tail_bound(double t, int order);

} // namespace castling::angular
