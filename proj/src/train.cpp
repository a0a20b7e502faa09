#include "castling/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "castling/rng.hpp"
#include "castling/tensor_io.hpp"

namespace castling::train {

using attention::KernelKind;

// ---- configs -----------------------------------------------------------------

double EpsilonSchedule::at(std::size_t step) const {
  if (kind == Kind::Fixed) return epsilon_max;
  if (step >= warmup_steps) return epsilon_max;
  return epsilon_max * (static_cast<double>(step) / static_cast<double>(warmup_steps));
}

void EpsilonSchedule::validate() const {
  if (!(epsilon_max >= 0.0 && epsilon_max <= 1.0))
    throw ConfigError("epsilon_max must lie in [0, 1]");
  if (kind == Kind::LinearRamp && warmup_steps == 0)
    throw ConfigError("linear_ramp schedule needs warmup_steps > 0");
}

nlohmann::json EpsilonSchedule::to_json() const {
  return nlohmann::json{{"kind", kind == Kind::Fixed ? "fixed" : "linear_ramp"},
                        {"epsilon_max", epsilon_max},
                        {"warmup_steps", warmup_steps}};
}

EpsilonSchedule EpsilonSchedule::from_json(const nlohmann::json& j) {
  EpsilonSchedule s;
  try {
    if (j.contains("kind")) {
      const std::string k = j["kind"].get<std::string>();
      if (k == "fixed")
        s.kind = Kind::Fixed;
      else if (k == "linear_ramp")
        s.kind = Kind::LinearRamp;
      else
        throw ConfigError("unknown epsilon schedule kind: " + k);
    }
    s.epsilon_max = j.value("epsilon_max", s.epsilon_max);
    s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed epsilon schedule: ") + e.what());
  }
  s.validate();
  return s;
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
}

nlohmann::json OptimizerConfig::to_json() const {
  return nlohmann::json{{"lr", lr}, {"momentum", momentum}, {"weight_decay", weight_decay}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed optimizer config: ") + e.what());
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (log_every == 0) throw ConfigError("log_every must be >= 1");
}

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs},
                        {"batch", batch},
                        {"log_every", log_every},
                        {"eval_every", eval_every},
                        {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.log_every = j.value("log_every", c.log_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  data.validate();
  opt.validate();
  schedule.validate();
  run.validate();
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
  if (model.image != data.image)
    throw ConfigError("model image size " + std::to_string(model.image) +
                      " does not match dataset image size " + std::to_string(data.image));
  if (model.classes != data.classes)
    throw ConfigError("model classes " + std::to_string(model.classes) +
                      " does not match dataset classes " + std::to_string(data.classes));
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"schema_version", 1},     {"model", model.to_json()},
                        {"data", data.to_json()},  {"opt", opt.to_json()},
                        {"lambda", lambda},        {"schedule", schedule.to_json()},
                        {"run", run.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  if (j.value("schema_version", 1) != 1)
    throw ConfigError("unsupported train config schema_version");
  static const char* known[] = {"schema_version", "model", "data", "opt",
                                "lambda",         "schedule", "run"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown train config key: " + key);
  }
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
    if (j.contains("data")) c.data = DatasetConfig::from_json(j["data"]);
    if (j.contains("opt")) c.opt = OptimizerConfig::from_json(j["opt"]);
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("schedule")) c.schedule = EpsilonSchedule::from_json(j["schedule"]);
    if (j.contains("run")) c.run = RunConfig::from_json(j["run"]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- telemetry serialization ---------------------------------------------------

std::string rows_to_csv(const std::vector<MaskTraceRow>& rows) {
  CsvWriter w({"step", "layer", "nonzeros", "mask_size", "loss", "acc"});
  for (const MaskTraceRow& r : rows)
    w.add_row({static_cast<double>(r.step), static_cast<double>(r.layer),
               static_cast<double>(r.nonzeros), static_cast<double>(r.mask_size), r.loss, r.acc});
  return w.text();
}

// ---- optimizer -----------------------------------------------------------------

SgdOptimizer::SgdOptimizer(double lr, double momentum, double weight_decay)
    : lr_(lr), mu_(momentum), wd_(weight_decay) {}

void SgdOptimizer::step(const std::vector<Parameter*>& params) {
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const Parameter* p : params) velocity_.emplace_back(p->value.shape());
  }
  if (velocity_.size() != params.size())
    throw ContractError("optimizer was built for a different parameter list");

  // Validate every gradient before touching any parameter: an abort must
  // leave the model exactly as it was.
  for (const Parameter* p : params)
    if (p->requires_grad && !p->grad.all_finite())
      throw NumericError("non-finite gradient in parameter " + p->name);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.requires_grad) continue;
    Tensor& v = velocity_[i];
    const double* g = p.grad.data();
    double* vd = v.data();
    double* pd = p.value.data();
    const std::size_t n = p.value.size();
    for (std::size_t k = 0; k < n; ++k) {
      vd[k] = mu_ * vd[k] + g[k] + wd_ * pd[k];
      pd[k] -= lr_ * vd[k];
    }
    p.zero_grad();
  }
}

// ---- evaluation ------------------------------------------------------------------

namespace {

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t(row, c) > t(row, best)) best = c;
  return best;
}

double row_cross_entropy(const Tensor& logits, std::size_t row, std::size_t label) {
  double mx = logits(row, 0);
  for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(row, c));
  double sum = 0.0;
  for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits(row, c) - mx);
  return mx + std::log(sum) - logits(row, label);
}

double batch_accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) correct += argmax_row(logits, r) == labels[r];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

} // namespace

EvalMetrics evaluate(model::TinyViT& m, const SyntheticShapesDataset& ds,
                     std::span<const std::size_t> indices, double epsilon, std::size_t chunk) {
  if (indices.empty()) throw ContractError("evaluate needs at least one sample");
  if (chunk == 0) chunk = indices.size();
  double ce = 0.0;
  std::size_t correct = 0;
  for (std::size_t i0 = 0; i0 < indices.size(); i0 += chunk) {
    const std::size_t i1 = std::min(indices.size(), i0 + chunk);
    std::vector<Tensor> images;
    images.reserve(i1 - i0);
    for (std::size_t i = i0; i < i1; ++i) images.push_back(ds.images[indices[i]]);
    Tensor logits = m.logits(images, epsilon);
    for (std::size_t i = i0; i < i1; ++i) {
      const std::size_t label = ds.labels[indices[i]];
      ce += row_cross_entropy(logits, i - i0, label);
      correct += argmax_row(logits, i - i0) == label;
    }
  }
  const double n = static_cast<double>(indices.size());
  return {ce / n, static_cast<double>(correct) / n};
}

// ---- training loop -----------------------------------------------------------------

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  SyntheticShapesDataset ds = generate_dataset(cfg.data);

  TrainResult res{model::TinyViT(cfg.model, cfg.run.seed)};
  res.dataset_hash = ds.hash();
  model::TinyViT& m = res.model;
  std::vector<Parameter*> params = m.parameters();
  SgdOptimizer sgd(cfg.opt.lr, cfg.opt.momentum, cfg.opt.weight_decay);

  const std::size_t train_n = ds.train_indices.size();
  const std::size_t bsz = std::min(cfg.run.batch, train_n);
  const std::size_t steps_per_epoch = (train_n + bsz - 1) / bsz;

  // Last parameter values whose loss came back finite; divergence restores them.
  std::vector<Tensor> snapshot;
  auto take_snapshot = [&] {
    snapshot.clear();
    snapshot.reserve(params.size());
    for (const Parameter* p : params) snapshot.push_back(p->value);
  };
  auto restore_snapshot = [&] {
    if (snapshot.empty()) return;
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i]->value = snapshot[i];
      params[i]->zero_grad();
    }
  };

  double last_epoch_fraction_sum = 0.0;
  std::size_t last_epoch_fraction_count = 0;
  std::size_t step = 0;
  bool first_step = true;
  bool evaluated_at_end = false;

  std::vector<std::size_t> order(ds.train_indices);
  for (std::size_t epoch = 0; epoch < cfg.run.epochs && !res.aborted; ++epoch) {
    // Fresh deterministic batch order per epoch.
    SplitMix64 shuffle_rng(cfg.run.seed + 0x9E3779B97F4A7C15ull * (epoch + 1));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    for (std::size_t b0 = 0; b0 < train_n && !res.aborted; b0 += bsz) {
      const std::size_t b1 = std::min(train_n, b0 + bsz);
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      images.reserve(b1 - b0);
      labels.reserve(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        images.push_back(ds.images[order[i]]);
        labels.push_back(ds.labels[order[i]]);
      }

      const double eps = cfg.schedule.at(step);
      Tape tape;
      model::ForwardResult fr = m.forward_batch(tape, images, eps);
      Var loss = op_cross_entropy(fr.logits, labels);

      std::size_t total_nz = 0;
      for (std::size_t nz : fr.mask_nonzeros) total_nz += nz;
      const std::size_t total_entries = fr.mask_entries_per_layer * cfg.model.depth;
      if (cfg.lambda > 0.0 && total_nz > 0 && !fr.kept_values.empty()) {
        // Mean of the surviving mask values; the survivor count is a constant
        // of the step (straight-through), only the values carry gradient.
        Var pen = op_sum_all(fr.kept_values[0]);
        for (std::size_t i = 1; i < fr.kept_values.size(); ++i)
          pen = op_add(pen, op_sum_all(fr.kept_values[i]));
        loss = op_add(loss, op_scale(pen, cfg.lambda / static_cast<double>(total_nz)));
      }

      const double loss_value = loss.value().at(0);
      const double acc = batch_accuracy(fr.logits.value(), labels);

      if (!std::isfinite(loss_value)) {
        restore_snapshot();
        res.aborted = true;
        res.abort_reason = "non-finite loss at step " + std::to_string(step) +
                           "; parameters restored to the last finite-loss step";
        break;
      }
      take_snapshot();

      const double fraction =
          total_entries != 0 ? static_cast<double>(total_nz) / static_cast<double>(total_entries)
                             : 0.0;
      if (first_step) {
        res.step0_mask_fraction = fraction;
        first_step = false;
      }
      if (epoch + 1 == cfg.run.epochs) {
        last_epoch_fraction_sum += fraction;
        ++last_epoch_fraction_count;
      }

      if (step % cfg.run.log_every == 0) {
        if (total_entries != 0)
          for (std::size_t layer = 0; layer < fr.mask_nonzeros.size(); ++layer)
            res.trace.push_back({step, static_cast<int>(layer), fr.mask_nonzeros[layer],
                                 fr.mask_entries_per_layer, loss_value, acc});
        res.metrics.push_back({step, kTrainRow, total_nz, total_entries, loss_value, acc});
      }
      res.final_train_loss = loss_value;

      tape.backward(loss);
      try {
        sgd.step(params);
      } catch (const NumericError& e) {
        res.aborted = true;
        res.abort_reason = std::string(e.what()) + " at step " + std::to_string(step) +
                           "; parameters unchanged from the last finite-loss step";
        break;
      }

      ++step;
      res.steps_run = step;

      const bool epoch_end = step % steps_per_epoch == 0;
      const bool eval_due =
          cfg.run.eval_every != 0 ? step % cfg.run.eval_every == 0 : epoch_end;
      if (eval_due && !ds.val_indices.empty()) {
        EvalMetrics em = evaluate(m, ds, ds.val_indices, cfg.schedule.at(step), cfg.run.batch);
        res.metrics.push_back({step, kValRow, 0, 0, em.loss, em.acc});
        res.final_val_loss = em.loss;
        res.final_val_acc = em.acc;
        evaluated_at_end = true;
      } else {
        evaluated_at_end = false;
      }
    }
  }

  if (!res.aborted && !evaluated_at_end && !ds.val_indices.empty()) {
    EvalMetrics em = evaluate(m, ds, ds.val_indices, cfg.schedule.at(step), cfg.run.batch);
    res.metrics.push_back({step, kValRow, 0, 0, em.loss, em.acc});
    res.final_val_loss = em.loss;
    res.final_val_acc = em.acc;
  }
  res.final_epoch_mask_fraction =
      last_epoch_fraction_count != 0 ? last_epoch_fraction_sum / last_epoch_fraction_count : 0.0;
  return res;
}

// ---- castling ------------------------------------------------------------------------

model::TinyViT castle(const model::TinyViT& m) {
  model::TinyViT castled = m;
  castled.mutable_config().use_aux = false;
  return castled;
}

CastleReport castle_check(model::TinyViT& trained, std::span<const Tensor> batch, double epsilon) {
  CastleReport rep;
  Tensor before = trained.logits(batch, epsilon);
  model::TinyViT castled = castle(trained);
  Tensor after = castled.logits(batch, epsilon);

  rep.max_logit_delta = max_abs_diff(before, after);
  rep.bitwise_identical =
      before.size() == after.size() &&
      std::memcmp(before.data(), after.data(), before.size() * sizeof(double)) == 0;

  Tape tape;
  model::ForwardResult fr = trained.forward_batch(tape, batch, epsilon);
  for (std::size_t nz : fr.mask_nonzeros) rep.residual_nonzeros += nz;
  rep.mask_entries = fr.mask_entries_per_layer * trained.config().depth;
  for (const Var& kept : fr.kept_values)
    for (double v : kept.value().values()) rep.residual_mass += v;

  if (rep.residual_nonzeros == 0 && rep.bitwise_identical) {
    rep.message = "castling check: surviving mask empty; castled logits bitwise identical";
  } else {
    rep.message = "castling warning: " + std::to_string(rep.residual_nonzeros) + " of " +
                  std::to_string(rep.mask_entries) + " mask entries still alive (mass " +
                  format_double(rep.residual_mass) + "); max logit delta " +
                  format_double(rep.max_logit_delta);
  }
  return rep;
}

// ---- experiment grids ----------------------------------------------------------------

std::vector<AblationRow> run_ablation_grid(const TrainConfig& base) {
  struct VariantSpec {
    const char* name;
    bool linear, dwconv, aux;
  };
  static constexpr VariantSpec kGrid[] = {
      {"exact_softmax", false, false, false}, {"lin", true, false, false},
      {"lin_dw", true, true, false},          {"lin_aux", true, false, true},
      {"lin_dw_aux", true, true, true},
  };

  std::vector<AblationRow> rows;
  rows.reserve(std::size(kGrid));
  for (const VariantSpec& v : kGrid) {
    TrainConfig cfg = base;
    cfg.model.kernel = v.linear ? KernelKind::LinearAngular : KernelKind::ExactSoftmax;
    cfg.model.use_dwconv = v.dwconv;
    cfg.model.use_aux = v.aux;
    TrainResult r = train(cfg);
    rows.push_back({v.name, r.final_val_acc, r.model.inference_macs(false),
                    r.model.inference_macs(true), r.dataset_hash, cfg.run.seed});
  }
  return rows;
}

std::vector<KernelCompareRow> kernel_compare(const std::vector<KernelKind>& kernels,
                                             const TrainConfig& base) {
  std::vector<KernelCompareRow> rows;
  rows.reserve(kernels.size());
  for (KernelKind k : kernels) {
    TrainConfig cfg = base;
    cfg.model.kernel = k;
    if (k != KernelKind::LinearAngular) {
      cfg.model.use_dwconv = false;
      cfg.model.use_aux = false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train(cfg);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - t0;
    rows.push_back({attention::to_string(k), r.final_val_acc, r.model.inference_macs(true),
                    elapsed.count(), cfg.run.seed});
  }
  return rows;
}

} // namespace castling::train
