#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "castling/dataset.hpp"
#include "castling/model.hpp"

namespace castling::train {

// Threshold schedule for the auxiliary mask. Fixed holds epsilon_max forever;
// LinearRamp grows from 0 to epsilon_max over warmup_steps and holds after.
struct EpsilonSchedule {
  enum class Kind { Fixed, LinearRamp };
  Kind kind = Kind::Fixed;
  double epsilon_max = 0.02;
  std::size_t warmup_steps = 0; // ramp only; must be > 0 for LinearRamp

  double at(std::size_t step) const;
  void validate() const;
  nlohmann::json to_json() const;
  static EpsilonSchedule from_json(const nlohmann::json& j);
};

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;

  void validate() const; // momentum in [0,1), lr > 0, weight_decay >= 0
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::size_t epochs = 60;
  std::size_t batch = 16;
  std::size_t log_every = 1;  // trace/metrics cadence in steps
  std::size_t eval_every = 0; // validation cadence in steps; 0 = once per epoch
  std::uint64_t seed = 1;     // model init and batch order

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  model::ModelConfig model;
  DatasetConfig data;
  OptimizerConfig opt;
  double lambda = 0.01; // sparsity pressure on surviving mask values
  EpsilonSchedule schedule;
  RunConfig run;

  void validate() const;
  nlohmann::json to_json() const; // carries "schema_version": 1
  static TrainConfig from_json(const nlohmann::json& j);
};

// One telemetry row. The mask trace uses layer >= 0 (per-layer survivor
// counts, summed over heads and the batch). The metrics log reuses the same
// columns with sentinel layers: kTrainRow aggregates the whole step,
// kValRow carries validation loss/accuracy (counts zero there).
struct MaskTraceRow {
  std::size_t step = 0;
  int layer = 0;
  std::size_t nonzeros = 0;
  std::size_t mask_size = 0;
  double loss = 0.0;
  double acc = 0.0;
};

inline constexpr int kTrainRow = -1;
inline constexpr int kValRow = -2;

// CSV with header step,layer,nonzeros,mask_size,loss,acc.
std::string rows_to_csv(const std::vector<MaskTraceRow>& rows);

// SGD with classical momentum and decoupled-from-nothing weight decay folded
// into the gradient: v <- mu v + g + wd p; p <- p - lr v. All gradients are
// validated finite before any parameter moves, so a NumericError (which names
// the offending parameter) leaves every parameter untouched. Gradients are
// zeroed after a successful step.
class SgdOptimizer {
public:
  SgdOptimizer(double lr, double momentum, double weight_decay);

  void step(const std::vector<Parameter*>& params);

private:
  double lr_, mu_, wd_;
  std::vector<Tensor> velocity_; // index-aligned with the first step's params
};

struct EvalMetrics {
  double loss = 0.0;
  double acc = 0.0;
};

// Forward-only metrics over the given dataset rows (mean cross entropy and
// top-1 accuracy), chunked to keep tapes small.
EvalMetrics evaluate(model::TinyViT& m, const SyntheticShapesDataset& ds,
                     std::span<const std::size_t> indices, double epsilon,
                     std::size_t chunk = 32);

struct TrainResult {
  model::TinyViT model;
  std::vector<MaskTraceRow> trace;   // per layer per logged step; empty without aux
  std::vector<MaskTraceRow> metrics; // train rows (kTrainRow) + val rows (kValRow)
  bool aborted = false;
  std::string abort_reason;
  std::size_t steps_run = 0;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  double final_val_acc = 0.0;
  // Surviving-mask fraction (all layers pooled): at step 0, and averaged over
  // the final epoch's steps. Both 0 when the aux branch is off.
  double step0_mask_fraction = 0.0;
  double final_epoch_mask_fraction = 0.0;
  std::uint64_t dataset_hash = 0;
};

// Deterministic end-to-end run: dataset, init, batch order, and therefore
// every logged row are functions of the config alone. Divergence (non-finite
// loss or gradients) aborts with the last parameters whose loss was finite.
TrainResult train(const TrainConfig& cfg);

// The castling switch: same weights, auxiliary branch stripped from the
// config. The returned model is independent of the input.
model::TinyViT castle(const model::TinyViT& m);

struct CastleReport {
  bool bitwise_identical = false;
  std::size_t residual_nonzeros = 0; // surviving aux entries on the batch
  std::size_t mask_entries = 0;
  double residual_mass = 0.0; // sum of surviving aux values
  double max_logit_delta = 0.0;
  std::string message;
};

// Compares castled vs uncastled logits on a calibration batch, byte for byte,
// and reports any surviving aux mass. A nonzero residual downgrades the
// result to a warning message instead of an error.
CastleReport castle_check(model::TinyViT& trained, std::span<const Tensor> batch, double epsilon);

struct AblationRow {
  std::string variant;
  double val_acc = 0.0;
  std::uint64_t train_macs = 0;   // per-image inference MACs, aux branch included
  std::uint64_t castled_macs = 0; // per-image inference MACs after castling
  std::uint64_t dataset_hash = 0;
  std::uint64_t seed = 0;
};

// Trains the five-variant composition grid {exact_softmax, lin, lin_dw,
// lin_aux, lin_dw_aux} with shared data and seed; row order is fixed.
std::vector<AblationRow> run_ablation_grid(const TrainConfig& base);

struct KernelCompareRow {
  std::string kernel;
  double val_acc = 0.0;
  std::uint64_t macs = 0; // per-image inference MACs after castling
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

// Trains one model per kernel under the shared recipe. Kernels other than
// the linear-angular one drop the castling-only branches (DWConv, aux).
std::vector<KernelCompareRow> kernel_compare(const std::vector<attention::KernelKind>& kernels,
                                             const TrainConfig& base);

} // namespace castling::train
