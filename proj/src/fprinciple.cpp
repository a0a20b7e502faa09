#include "castling/fprinciple.hpp"

#include <cmath>
#include <numbers>

#include "castling/angular.hpp"
#include "castling/autodiff.hpp"
#include "castling/rng.hpp"
#include "castling/train.hpp"

namespace castling::fprinciple {

double target_fn(double t) { return angular::exact_similarity(t); }

double linear_term_fn(double t) {
  if (!(t >= -1.0 && t <= 1.0))
    throw DomainError("linear_term_fn needs |t| <= 1, got " + std::to_string(t));
  return 0.5 + t / std::numbers::pi;
}

void FitConfig::validate() const {
  if (width == 0) throw ConfigError("width must be >= 1");
  if (grid < 64 || (grid & (grid - 1)) != 0)
    throw ConfigError("grid must be a power of two >= 64");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (log_every == 0) throw ConfigError("log_every must be >= 1");
}

nlohmann::json FitConfig::to_json() const {
  return nlohmann::json{{"schema_version", 1}, {"width", width},   {"grid", grid},
                        {"steps", steps},      {"lr", lr},         {"momentum", momentum},
                        {"log_every", log_every}, {"seed", seed}};
}

FitConfig FitConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("fit config must be a JSON object");
  if (j.value("schema_version", 1) != 1)
    throw ConfigError("unsupported fit config schema_version");
  static const char* known[] = {"schema_version", "width", "grid",     "steps",
                                "lr",             "momentum", "log_every", "seed"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown fit config key: " + key);
  }
  FitConfig c;
  try {
    c.width = j.value("width", c.width);
    c.grid = j.value("grid", c.grid);
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.log_every = j.value("log_every", c.log_every);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed fit config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> uniform_grid(std::size_t m) {
  std::vector<double> t(m);
  for (std::size_t i = 0; i < m; ++i)
    t[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(m);
  return t;
}

namespace {

// Hann-windowed DFT magnitude for bins 0 .. m/2 (real input).
std::vector<double> windowed_spectrum(std::span<const double> x) {
  const std::size_t m = x.size();
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> windowed(m);
  for (std::size_t i = 0; i < m; ++i)
    windowed[i] = x[i] * 0.5 * (1.0 - std::cos(two_pi * static_cast<double>(i) / m));

  std::vector<double> mag(m / 2 + 1);
  for (std::size_t b = 0; b < mag.size(); ++b) {
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double phase = two_pi * static_cast<double>(b) * static_cast<double>(i) / m;
      re += windowed[i] * std::cos(phase);
      im -= windowed[i] * std::sin(phase);
    }
    mag[b] = std::hypot(re, im);
  }
  return mag;
}

} // namespace

std::vector<double> spectral_rel_errors(std::span<const double> prediction,
                                        std::span<const double> target) {
  if (prediction.size() != target.size())
    throw ContractError("spectral_rel_errors needs equal-length signals");
  if (prediction.size() < 2) throw ContractError("spectral_rel_errors needs >= 2 samples");

  std::vector<double> diff(prediction.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = prediction[i] - target[i];

  const std::vector<double> diff_mag = windowed_spectrum(diff);
  const std::vector<double> target_mag = windowed_spectrum(target);

  std::vector<double> err(diff_mag.size());
  for (std::size_t b = 0; b < err.size(); ++b)
    err[b] = target_mag[b] < 1e-12 ? diff_mag[b] : diff_mag[b] / target_mag[b];
  return err;
}

FitResult fit_residual(const FitConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.grid;

  const std::vector<double> ts = uniform_grid(m);
  std::vector<double> ys(m);
  for (std::size_t i = 0; i < m; ++i) ys[i] = target_fn(ts[i]);

  Tensor t_col({m, 1}, ts);
  Tensor y_col({m, 1}, ys);

  // The first layer starts sharp (std 4, kinks tiling the domain) so the
  // steep near-boundary shape of the target is expressible from the first
  // step. A std-1 start leaves the early prediction ramp-like; on a periodic
  // grid a ramp shares its wrap-around jump spectrum with the target, so
  // high-bin relative errors then dip under any threshold spuriously early
  // while the momentum-driven global slope oscillates through a match.
  SplitMix64 rng(cfg.seed);
  Parameter w1("fit.w1", Tensor::normal({1, cfg.width}, rng, 4.0));
  Parameter b1("fit.b1", Tensor::uniform({1, cfg.width}, rng, -4.0, 4.0));
  Parameter w2("fit.w2",
               Tensor::normal({cfg.width, 1}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.width))));
  Parameter b2("fit.b2", Tensor({1, 1}));
  std::vector<Parameter*> params{&w1, &b1, &w2, &b2};
  train::SgdOptimizer sgd(cfg.lr, cfg.momentum, 0.0);

  FitResult result;
  for (std::size_t step = 0;; ++step) {
    Tape tape;
    Var t_in = tape.leaf(t_col);
    Var y_ref = tape.leaf(y_col);
    Var hidden = op_tanh(op_add_rowvec(op_matmul(t_in, tape.param(w1)), tape.param(b1)));
    Var pred = op_add_rowvec(op_matmul(hidden, tape.param(w2)), tape.param(b2));
    Var diff = op_sub(pred, y_ref);
    Var loss = op_mean_all(op_mul(diff, diff));

    const double loss_value = loss.value().at(0);
    if (!std::isfinite(loss_value))
      throw NumericError("frequency fit diverged at step " + std::to_string(step));

    if (step % cfg.log_every == 0 || step == cfg.steps) {
      result.loss_trajectory.emplace_back(step, loss_value);
      result.spectrum.steps.push_back(step);
      result.spectrum.rel_errors.push_back(spectral_rel_errors(pred.value().values(), ys));
    }
    result.final_loss = loss_value;
    if (step == cfg.steps) break;

    tape.backward(loss);
    sgd.step(params);
  }
  return result;
}

std::vector<std::ptrdiff_t> convergence_steps(const FrequencyTrajectory& traj, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw DomainError("convergence threshold must lie in (0, 1)");
  const std::size_t bins = traj.rel_errors.empty() ? 0 : traj.rel_errors.front().size();
  std::vector<std::ptrdiff_t> first(bins, -1);
  for (std::size_t b = 0; b < bins; ++b)
    for (std::size_t s = 0; s < traj.steps.size(); ++s)
      if (traj.rel_errors[s][b] < threshold) {
        first[b] = static_cast<std::ptrdiff_t>(traj.steps[s]);
        break;
      }
  return first;
}

} // namespace castling::fprinciple
