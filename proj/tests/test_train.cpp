// Training harness: the momentum-SGD update rule, epsilon schedules, config
// (de)serialization gates, end-to-end determinism, mask telemetry contracts,
// the castling switch, and the ablation/kernel comparison grids on a
// seconds-scale model.

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "castling/model.hpp"
#include "castling/train.hpp"

using namespace castling;
using train::EpsilonSchedule;
using train::MaskTraceRow;
using train::SgdOptimizer;
using train::TrainConfig;
using train::TrainResult;

namespace {

// Four-token, single-digit-width model over a 20-image corpus: one full
// training run lands in tens of milliseconds.
TrainConfig tiny_recipe() {
  TrainConfig cfg;
  cfg.model.depth = 2;
  cfg.model.width = 8;
  cfg.model.heads = 2;
  cfg.model.patch = 4;
  cfg.model.image = 8;
  cfg.model.classes = 2;
  cfg.model.mlp_ratio = 1;
  cfg.model.use_aux = true;
  cfg.data.image = 8;
  cfg.data.classes = 2;
  cfg.data.samples = 20;
  cfg.data.seed = 11;
  cfg.run.epochs = 2;
  cfg.run.batch = 9;
  cfg.run.log_every = 1;
  cfg.run.seed = 7;
  return cfg;
}

Parameter scalar_param(const char* name, double v) {
  return Parameter(name, Tensor({1, 1}, {v}));
}

} // namespace

// ---- optimizer ---------------------------------------------------------------

TEST_CASE("momentum recursion: two unit-gradient steps move 1.0 to 0.71") {
  Parameter p = scalar_param("p", 1.0);
  SgdOptimizer sgd(0.1, 0.9, 0.0);

  p.grad.fill(1.0);
  sgd.step({&p});
  CHECK(p.value.at(0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(p.grad.at(0) == 0.0); // gradients zeroed by a successful step

  p.grad.fill(1.0);
  sgd.step({&p}); // v = 0.9*1 + 1 = 1.9; p = 0.9 - 0.19
  CHECK(p.value.at(0) == doctest::Approx(0.71).epsilon(1e-12));
}

TEST_CASE("zero momentum and decay reduce to vanilla gradient descent") {
  Parameter p = scalar_param("p", 2.0);
  SgdOptimizer sgd(0.5, 0.0, 0.0);
  p.grad.fill(3.0);
  sgd.step({&p});
  CHECK(p.value.at(0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("zero gradient with zero velocity leaves the parameter alone") {
  Parameter p = scalar_param("p", 1.25);
  SgdOptimizer sgd(0.1, 0.9, 0.0);
  sgd.step({&p});
  CHECK(p.value.at(0) == 1.25);
}

TEST_CASE("weight decay folds into the gradient") {
  Parameter p = scalar_param("p", 2.0);
  SgdOptimizer sgd(0.1, 0.0, 0.5);
  sgd.step({&p}); // v = 0 + 0 + 0.5*2 = 1; p = 2 - 0.1
  CHECK(p.value.at(0) == doctest::Approx(1.9).epsilon(1e-15));
}

TEST_CASE("frozen parameters are skipped") {
  Parameter p = scalar_param("p", 1.0);
  p.requires_grad = false;
  p.grad.fill(100.0);
  SgdOptimizer sgd(0.1, 0.0, 0.0);
  sgd.step({&p});
  CHECK(p.value.at(0) == 1.0);
}

TEST_CASE("optimizer rejects a parameter list of a different size") {
  Parameter a = scalar_param("a", 1.0);
  Parameter b = scalar_param("b", 1.0);
  SgdOptimizer sgd(0.1, 0.9, 0.0);
  sgd.step({&a, &b});
  CHECK_THROWS_AS(sgd.step({&a}), ContractError);
}

TEST_CASE("a non-finite gradient aborts before any parameter moves") {
  Parameter a = scalar_param("a", 1.0);
  Parameter b = scalar_param("bad_one", 2.0);
  a.grad.fill(1.0);
  b.grad.fill(std::nan(""));
  SgdOptimizer sgd(0.1, 0.9, 0.0);
  CHECK_THROWS_WITH_AS(sgd.step({&a, &b}),
                       doctest::Contains("bad_one"), NumericError);
  // The healthy parameter was not touched either.
  CHECK(a.value.at(0) == 1.0);
  CHECK(a.grad.at(0) == 1.0);
}

// ---- epsilon schedule ----------------------------------------------------------

TEST_CASE("fixed schedule holds its threshold forever") {
  EpsilonSchedule s;
  s.epsilon_max = 0.02;
  CHECK(s.at(0) == 0.02);
  CHECK(s.at(123456) == 0.02);
}

TEST_CASE("linear ramp grows from zero and saturates") {
  EpsilonSchedule s;
  s.kind = EpsilonSchedule::Kind::LinearRamp;
  s.epsilon_max = 0.1;
  s.warmup_steps = 100;
  CHECK(s.at(0) == 0.0);
  CHECK(s.at(50) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(s.at(100) == 0.1);
  CHECK(s.at(10000) == 0.1);
}

TEST_CASE("schedule validation and JSON round trip") {
  EpsilonSchedule s;
  s.kind = EpsilonSchedule::Kind::LinearRamp;
  s.epsilon_max = 0.3;
  s.warmup_steps = 17;
  const auto back = EpsilonSchedule::from_json(s.to_json());
  CHECK(back.kind == s.kind);
  CHECK(back.epsilon_max == s.epsilon_max);
  CHECK(back.warmup_steps == s.warmup_steps);

  s.warmup_steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.kind = EpsilonSchedule::Kind::Fixed;
  s.epsilon_max = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);

  auto j = back.to_json();
  j["kind"] = "quadratic_ramp";
  CHECK_THROWS_AS((void)EpsilonSchedule::from_json(j), ConfigError);
}

// ---- config serialization --------------------------------------------------------

TEST_CASE("train config JSON round trip preserves every field") {
  TrainConfig cfg = tiny_recipe();
  cfg.lambda = 0.25;
  cfg.opt.lr = 0.125;
  cfg.opt.momentum = 0.5;
  cfg.schedule.epsilon_max = 0.07;
  cfg.model.use_dwconv = true;
  cfg.model.qk_init = 0.5;

  const auto j = cfg.to_json();
  CHECK(j.at("schema_version").get<int>() == 1);
  const TrainConfig back = TrainConfig::from_json(j);
  CHECK(back.to_json() == j);
}

TEST_CASE("train config rejects unknown keys and foreign schema versions") {
  const auto j = tiny_recipe().to_json();

  auto unknown = j;
  unknown["learning_rate"] = 0.1; // belongs under "opt", not at top level
  CHECK_THROWS_AS((void)TrainConfig::from_json(unknown), ConfigError);

  auto versioned = j;
  versioned["schema_version"] = 2;
  CHECK_THROWS_AS((void)TrainConfig::from_json(versioned), ConfigError);

  CHECK_THROWS_AS((void)TrainConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("train config validation cross-checks model against dataset") {
  TrainConfig cfg = tiny_recipe();
  cfg.data.image = 16; // model still expects 8
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_recipe();
  cfg.data.classes = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_recipe();
  cfg.lambda = -0.01;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

// ---- telemetry CSV ---------------------------------------------------------------

TEST_CASE("trace rows serialize with the documented header and sentinels") {
  std::vector<MaskTraceRow> rows;
  rows.push_back({0, 0, 5, 16, 0.5, 0.25});
  rows.push_back({0, train::kTrainRow, 5, 16, 0.5, 0.25});
  rows.push_back({2, train::kValRow, 0, 0, 1.5, 0.75});
  const std::string csv = train::rows_to_csv(rows);
  CHECK(csv == "step,layer,nonzeros,mask_size,loss,acc\n"
               "0,0,5,16,0.5,0.25\n"
               "0,-1,5,16,0.5,0.25\n"
               "2,-2,0,0,1.5,0.75\n");
}

// ---- end-to-end training ----------------------------------------------------------

TEST_CASE("identical configs reproduce identical telemetry") {
  const TrainConfig cfg = tiny_recipe();
  const TrainResult a = train::train(cfg);
  const TrainResult b = train::train(cfg);
  CHECK_FALSE(a.aborted);
  CHECK(train::rows_to_csv(a.trace) == train::rows_to_csv(b.trace));
  CHECK(train::rows_to_csv(a.metrics) == train::rows_to_csv(b.metrics));
  CHECK(a.final_val_acc == b.final_val_acc);
  CHECK(a.dataset_hash == b.dataset_hash);
}

TEST_CASE("training without the auxiliary branch leaves the trace empty") {
  TrainConfig cfg = tiny_recipe();
  cfg.model.use_aux = false;
  const TrainResult r = train::train(cfg);
  CHECK_FALSE(r.aborted);
  CHECK(r.trace.empty());
  CHECK(r.steps_run == 4); // 18 train images, batch 9, 2 epochs
  CHECK(r.step0_mask_fraction == 0.0);
  CHECK(r.final_epoch_mask_fraction == 0.0);
  CHECK_FALSE(r.metrics.empty());
}

TEST_CASE("threshold 1 kills every mask entry from step 0") {
  TrainConfig cfg = tiny_recipe();
  cfg.schedule.epsilon_max = 1.0;
  const TrainResult r = train::train(cfg);
  CHECK_FALSE(r.aborted);
  CHECK(r.step0_mask_fraction == 0.0);
  CHECK(r.final_epoch_mask_fraction == 0.0);
  REQUIRE_FALSE(r.trace.empty()); // rows still logged, with zero survivors
  for (const MaskTraceRow& row : r.trace) CHECK(row.nonzeros == 0);
}

TEST_CASE("mask telemetry respects its own bounds and clocks") {
  TrainConfig cfg = tiny_recipe();
  cfg.schedule.epsilon_max = 0.02;
  const TrainResult r = train::train(cfg);
  CHECK_FALSE(r.aborted);
  REQUIRE_FALSE(r.trace.empty());

  std::vector<long> last_step_per_layer(cfg.model.depth, -1);
  for (const MaskTraceRow& row : r.trace) {
    REQUIRE(row.layer >= 0);
    REQUIRE(static_cast<std::size_t>(row.layer) < cfg.model.depth);
    CHECK(row.nonzeros <= row.mask_size);
    CHECK(row.mask_size ==
          cfg.model.heads * cfg.model.tokens() * cfg.model.tokens() * cfg.run.batch);
    // Strictly increasing timestamps within each layer's trace.
    CHECK(static_cast<long>(row.step) > last_step_per_layer[row.layer]);
    last_step_per_layer[row.layer] = static_cast<long>(row.step);
  }

  for (const MaskTraceRow& row : r.metrics) {
    CHECK((row.layer == train::kTrainRow || row.layer == train::kValRow));
    if (row.layer == train::kTrainRow) CHECK(row.nonzeros <= row.mask_size);
  }
}

TEST_CASE("step-0 loss decomposes into the aux-free loss plus the penalty") {
  // With the threshold at 1 the aux branch emits exactly zero, so the first
  // logged loss must match the aux-disabled run bit for bit.
  TrainConfig on = tiny_recipe();
  on.schedule.epsilon_max = 1.0;
  TrainConfig off = tiny_recipe();
  off.model.use_aux = false;
  const TrainResult r_on = train::train(on);
  const TrainResult r_off = train::train(off);
  REQUIRE_FALSE(r_on.metrics.empty());
  REQUIRE_FALSE(r_off.metrics.empty());
  CHECK(r_on.metrics[0].loss == r_off.metrics[0].loss);
  CHECK(r_on.metrics[0].acc == r_off.metrics[0].acc);

  // With the threshold at 0 every entry survives, each softmax row sums to 1,
  // and the mean surviving value collapses to 1/N: the lambda term adds
  // exactly lambda/N to the step-0 loss.
  TrainConfig zero_eps = tiny_recipe();
  zero_eps.schedule.epsilon_max = 0.0;
  zero_eps.lambda = 0.0;
  TrainConfig zero_eps_pen = zero_eps;
  zero_eps_pen.lambda = 0.32;
  const TrainResult base = train::train(zero_eps);
  const TrainResult pen = train::train(zero_eps_pen);
  CHECK(base.step0_mask_fraction == 1.0);
  const double expected_gap = 0.32 / static_cast<double>(tiny_recipe().model.tokens());
  CHECK(pen.metrics[0].loss - base.metrics[0].loss ==
        doctest::Approx(expected_gap).epsilon(1e-10));
}

TEST_CASE("evaluation refuses an empty index set") {
  TrainConfig cfg = tiny_recipe();
  cfg.run.epochs = 1;
  TrainResult r = train::train(cfg);
  const auto ds = generate_dataset(cfg.data);
  CHECK_THROWS_AS((void)train::evaluate(r.model, ds, {}, 0.02), ContractError);
}

// ---- castling ---------------------------------------------------------------------

TEST_CASE("castling an aux-free model is the identity on logits") {
  TrainConfig cfg = tiny_recipe();
  cfg.model.use_aux = false;
  cfg.run.epochs = 1;
  TrainResult r = train::train(cfg);
  const auto ds = generate_dataset(cfg.data);
  const std::vector<Tensor> batch(ds.images.begin(), ds.images.begin() + 4);

  model::TinyViT castled = train::castle(r.model);
  CHECK_FALSE(castled.config().use_aux);
  const Tensor before = r.model.logits(batch, 0.02);
  const Tensor after = castled.logits(batch, 0.02);
  CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("castle_check reports bitwise identity once the mask is empty") {
  TrainConfig cfg = tiny_recipe();
  cfg.run.epochs = 1;
  cfg.schedule.epsilon_max = 1.0; // guarantees an all-dead mask
  TrainResult r = train::train(cfg);
  const auto ds = generate_dataset(cfg.data);
  const std::vector<Tensor> batch(ds.images.begin(), ds.images.begin() + 4);

  const auto rep = train::castle_check(r.model, batch, 1.0);
  CHECK(rep.bitwise_identical);
  CHECK(rep.residual_nonzeros == 0);
  CHECK(rep.max_logit_delta == 0.0);
  CHECK(rep.message.find("bitwise identical") != std::string::npos);
}

TEST_CASE("castle_check downgrades to a warning while mask entries survive") {
  TrainConfig cfg = tiny_recipe();
  cfg.run.epochs = 1;
  cfg.schedule.epsilon_max = 0.0; // everything survives: maximal residual
  TrainResult r = train::train(cfg);
  const auto ds = generate_dataset(cfg.data);
  const std::vector<Tensor> batch(ds.images.begin(), ds.images.begin() + 4);

  const auto rep = train::castle_check(r.model, batch, 0.0);
  CHECK_FALSE(rep.bitwise_identical);
  CHECK(rep.residual_nonzeros > 0);
  CHECK(rep.residual_nonzeros <= rep.mask_entries);
  CHECK(rep.max_logit_delta > 0.0);
  CHECK(rep.message.find("warning") != std::string::npos);
  // The warning quantifies the surviving mass and the output movement.
  CHECK(rep.residual_mass > 0.0);
}

// ---- checkpoints --------------------------------------------------------------------

TEST_CASE("checkpoint save/load round-trips the model bit for bit") {
  TrainConfig cfg = tiny_recipe();
  cfg.run.epochs = 1;
  TrainResult r = train::train(cfg);
  const auto ds = generate_dataset(cfg.data);
  const std::vector<Tensor> batch(ds.images.begin(), ds.images.begin() + 3);

  const auto dir = std::filesystem::temp_directory_path() / "castling_ckpt_roundtrip";
  std::filesystem::remove_all(dir);
  model::save_checkpoint(r.model, dir);
  model::TinyViT loaded = model::load_checkpoint(dir);

  CHECK(loaded.config().to_json() == r.model.config().to_json());
  CHECK(max_abs_diff(loaded.logits(batch, 0.02), r.model.logits(batch, 0.02)) == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects a missing manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "castling_ckpt_missing";
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS((void)model::load_checkpoint(dir), ConfigError);
}

// ---- experiment grids ----------------------------------------------------------------

TEST_CASE("ablation grid: five fixed rows sharing one dataset") {
  TrainConfig base = tiny_recipe();
  base.model.image = 16;
  base.model.width = 8;
  base.model.heads = 2; // head_dim 4 < 16 tokens: linear side wins
  base.data.image = 16;
  base.run.epochs = 1;
  const auto rows = train::run_ablation_grid(base);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].variant == "exact_softmax");
  CHECK(rows[1].variant == "lin");
  CHECK(rows[2].variant == "lin_dw");
  CHECK(rows[3].variant == "lin_aux");
  CHECK(rows[4].variant == "lin_dw_aux");
  for (const auto& row : rows) {
    CHECK(row.dataset_hash == rows[0].dataset_hash);
    CHECK(row.seed == base.run.seed);
  }
  // Quadratic baseline costs more than every castled linear variant here.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CAPTURE(rows[i].variant);
    CHECK(rows[0].castled_macs > rows[i].castled_macs);
  }
  // Castling strips cost only where the aux branch exists.
  CHECK(rows[1].train_macs == rows[1].castled_macs);
  CHECK(rows[3].train_macs > rows[3].castled_macs);
  CHECK(rows[4].train_macs > rows[4].castled_macs);
}

TEST_CASE("kernel comparison emits one row per kernel under a shared seed") {
  TrainConfig base = tiny_recipe();
  base.run.epochs = 1;
  const std::vector<attention::KernelKind> kernels{
      attention::KernelKind::ExactSoftmax, attention::KernelKind::LinearAngular};
  const auto rows = train::kernel_compare(kernels, base);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].kernel == attention::to_string(attention::KernelKind::ExactSoftmax));
  CHECK(rows[1].kernel == attention::to_string(attention::KernelKind::LinearAngular));
  CHECK(rows[0].seed == rows[1].seed);
  CHECK(rows[0].wall_seconds >= 0.0);
  CHECK(rows[1].wall_seconds >= 0.0);

  // The MACs column must agree with the analytic model, kernel by kernel.
  auto expected = [&](attention::KernelKind k) {
    auto mc = base.model;
    mc.kernel = k;
    if (k != attention::KernelKind::LinearAngular) {
      mc.use_dwconv = false;
      mc.use_aux = false;
    }
    return model::TinyViT(mc, base.run.seed).inference_macs(true);
  };
  CHECK(rows[0].macs == expected(kernels[0]));
  CHECK(rows[1].macs == expected(kernels[1]));
}
