#include "castling/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "castling/attention.hpp"
#include "castling/rng.hpp"

namespace castling {

SlopeFit fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw ContractError("fit_loglog needs >= 2 paired samples");
  const std::size_t n = xs.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (xs[i] <= 0.0 || ys[i] <= 0.0) throw DomainError("fit_loglog needs positive samples");
    const double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    syy += ly * ly;
  }
  const double dn = static_cast<double>(n);
  const double cov = sxy - sx * sy / dn;
  const double var_x = sxx - sx * sx / dn;
  const double var_y = syy - sy * sy / dn;
  SlopeFit f;
  f.slope = cov / var_x;
  f.r2 = var_y == 0.0 ? 1.0 : (cov * cov) / (var_x * var_y);
  return f;
}

namespace {

using attention::Eq9Mode;
using attention::KernelKind;

double consume(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); i += std::max<std::size_t>(1, t.size() / 16)) s += t.at(i);
  return s;
}

struct VariantFn {
  // returns a checksum so the optimizer cannot drop the work
  std::function<double(const Tensor& q, const Tensor& k, const Tensor& v)> run;
};

VariantFn lookup_variant(const std::string& name) {
  if (name == "quadratic_softmax")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      return consume(attention::softmax_attention_fwd(q, k, v));
    }};
  if (name == "quadratic_angular")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      return consume(attention::quadratic_angular_fwd(q, k, v, true));
    }};
  if (name == "linear_angular")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      return consume(attention::linear_angular_fwd(q, k, v, Eq9Mode::Faithful, true));
    }};
  if (name == "relu_s")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      return consume(attention::kernel_linear_fwd(KernelKind::ReluS, q, k, v));
    }};
  if (name == "relu_e")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      // shift into the positive orthant so denominators stay alive at any N
      Tensor qs = q, ks = k;
      for (std::size_t i = 0; i < qs.size(); ++i) qs.at(i) = std::abs(qs.at(i)) + 0.01;
      for (std::size_t i = 0; i < ks.size(); ++i) ks.at(i) = std::abs(ks.at(i)) + 0.01;
      return consume(attention::kernel_linear_fwd(KernelKind::ReluE, qs, ks, v));
    }};
  if (name == "cosine")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      return consume(attention::kernel_linear_fwd(KernelKind::Cosine, q, k, v));
    }};
  if (name == "constant_stub")
    return {[](const Tensor& q, const Tensor& k, const Tensor& v) {
      // fixed-size workload regardless of N: slope fit should recover ~0
      const std::size_t m = 384, d = q.cols();
      Tensor qs({m, d}), ks({m, d}), vs({m, d});
      for (std::size_t i = 0; i < qs.size(); ++i) {
        qs.at(i) = q.at(i % q.size());
        ks.at(i) = k.at(i % k.size());
        vs.at(i) = v.at(i % v.size());
      }
      return consume(attention::softmax_attention_fwd(qs, ks, vs));
    }};
  throw ConfigError("unknown benchmark variant: " + name);
}

} // namespace

std::vector<ScalingRun> scaling_benchmark(const std::vector<std::string>& variants,
                                          const std::vector<std::size_t>& n_list, std::size_t d,
                                          int reps, std::uint64_t seed) {
  if (n_list.size() < 4) throw ConfigError("scaling benchmark needs at least 4 token counts");
  const auto [mn, mx] = std::minmax_element(n_list.begin(), n_list.end());
  if (*mn == 0 || *mx / *mn < 16)
    throw ConfigError("scaling benchmark token counts must span at least a 16x range");
  if (reps < 1) throw ConfigError("scaling benchmark needs reps >= 1");
  if (d == 0) throw ConfigError("scaling benchmark needs d >= 1");

  std::vector<ScalingRun> runs;
  for (const std::string& name : variants) {
    VariantFn fn = lookup_variant(name);
    ScalingRun run;
    run.variant = name;
    run.d = d;
    run.reps = reps;
    for (std::size_t n : n_list) {
      SplitMix64 rng(seed ^ (0x5851F42D4C957F2Dull * n));
      const Tensor q = Tensor::uniform({n, d}, rng, -1.0, 1.0);
      const Tensor k = Tensor::uniform({n, d}, rng, -1.0, 1.0);
      const Tensor v = Tensor::uniform({n, d}, rng, -1.0, 1.0);
      run.checksum += fn.run(q, k, v); // warmup, discarded from timing
      std::vector<double> times;
      times.reserve(static_cast<std::size_t>(reps));
      for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        run.checksum += fn.run(q, k, v);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
      std::sort(times.begin(), times.end());
      const double median = times[times.size() / 2];
      if (median < 1e-3) run.timer_warning = true;
      run.points.push_back(ScalingPoint{n, median});
    }
    std::vector<double> xs, ys;
    for (const ScalingPoint& p : run.points) {
      xs.push_back(static_cast<double>(p.n));
      ys.push_back(std::max(p.median_seconds, 1e-9));
    }
    const SlopeFit fit = fit_loglog(xs, ys);
    run.slope = fit.slope;
    run.r2 = fit.r2;
    runs.push_back(std::move(run));
  }
  return runs;
}

} // namespace castling
