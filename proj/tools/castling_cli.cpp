// Command-line front end: analytic MAC model, scaling benchmarks, gradient
// checks, training/ablation/castling runs, and the frequency-learning
// experiment. Every subcommand is a pure function of (config, seed): same
// inputs, same CSV/JSON bytes out.
//
// Exit codes: 0 success, 2 configuration/validation problem (including CLI
// usage errors), 3 numerical failure (divergence, failed gradient check).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "castling/attention.hpp"
#include "castling/bench.hpp"
#include "castling/dataset.hpp"
#include "castling/errors.hpp"
#include "castling/flops.hpp"
#include "castling/fprinciple.hpp"
#include "castling/gradcheck.hpp"
#include "castling/model.hpp"
#include "castling/tensor_io.hpp"
#include "castling/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
  auto* opt = sub->add_option("--config", c.config_path, "JSON config file");
  if (config_required) opt->required();
  sub->add_option("--out", c.out_dir,
                  "output directory (default: $CASTLING_OUT, then the working directory)");
  sub->add_option("--seed", c.seed, "override the config's seed");
}

fs::path resolve_out_dir(const Common& c) {
  fs::path dir;
  if (!c.out_dir.empty()) {
    dir = c.out_dir;
  } else if (const char* env = std::getenv("CASTLING_OUT"); env != nullptr && *env != '\0') {
    dir = env;
  } else {
    dir = ".";
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::is_directory(dir))
    throw castling::ConfigError("cannot create output directory " + dir.string());
  return dir;
}

json load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw castling::ConfigError("cannot open config file " + path);
  try {
    json j;
    f >> j;
    return j;
  } catch (const json::exception& e) {
    throw castling::ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream f(file, std::ios::trunc);
  if (!f) throw castling::ConfigError("cannot write " + file.string());
  f << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

// ---- flops -------------------------------------------------------------------

int run_flops(const Common& c) {
  auto cfg = castling::attention::AttentionConfig::from_json(load_config(c.config_path));
  const fs::path out = resolve_out_dir(c);

  auto quad_cfg = cfg;
  quad_cfg.kernel = castling::attention::KernelKind::ExactSoftmax;
  auto lin_cfg = cfg;
  lin_cfg.kernel = castling::attention::KernelKind::LinearAngular;
  const auto quad_core = castling::flop_count(quad_cfg).core_macs();
  const auto lin_core = castling::flop_count(lin_cfg).core_macs();

  const auto train_view = castling::flop_count(cfg, false);
  const auto castled_view = castling::flop_count(cfg, true);

  castling::CsvWriter csv({"n_q", "n_k", "d", "d_v", "quadratic_core_macs", "linear_core_macs",
                           "kv_macs", "q_macs", "half_macs", "norm_macs", "dwconv_macs",
                           "aux_macs_train", "aux_macs_castled", "exp_ops", "div_ops",
                           "total_macs_train", "total_macs_castled", "linear_wins"});
  csv.add_row({static_cast<double>(cfg.n_q), static_cast<double>(cfg.n_k),
               static_cast<double>(cfg.d), static_cast<double>(cfg.d_v),
               static_cast<double>(quad_core), static_cast<double>(lin_core),
               static_cast<double>(train_view.kv_macs), static_cast<double>(train_view.q_macs),
               static_cast<double>(train_view.half_macs), static_cast<double>(train_view.norm_macs),
               static_cast<double>(train_view.dwconv_macs), static_cast<double>(train_view.aux_macs),
               static_cast<double>(castled_view.aux_macs), static_cast<double>(train_view.exp_ops),
               static_cast<double>(train_view.div_ops), static_cast<double>(train_view.total_macs()),
               static_cast<double>(castled_view.total_macs()),
               castling::linear_beats_quadratic(cfg.n_q, cfg.n_k, cfg.d, cfg.d_v) ? 1.0 : 0.0});
  csv.write(out / "flops.csv");

  std::cout << "flops: N_q=" << cfg.n_q << " N_k=" << cfg.n_k << " d=" << cfg.d
            << " d_v=" << cfg.d_v << "\n"
            << "  quadratic core MACs: " << quad_core << "\n"
            << "  linear core MACs:    " << lin_core << "\n"
            << "  configured kernel total (train view):   " << train_view.total_macs() << "\n"
            << "  configured kernel total (castled view): " << castled_view.total_macs() << "\n"
            << "  wrote " << (out / "flops.csv").string() << "\n";
  return 0;
}

// ---- grad-check ---------------------------------------------------------------

int run_grad_check(const Common& c, int seeds, std::uint64_t base_seed) {
  if (!c.config_path.empty()) {
    const json j = load_config(c.config_path);
    if (j.value("schema_version", 1) != 1)
      throw castling::ConfigError("unsupported grad-check config schema_version");
    seeds = j.value("seeds", seeds);
    base_seed = j.value("base_seed", base_seed);
  }
  if (c.seed) base_seed = *c.seed;
  if (seeds < 1) throw castling::ConfigError("grad-check needs seeds >= 1");

  const fs::path out = resolve_out_dir(c);
  const auto results = castling::run_all_grad_checks(seeds, base_seed);

  castling::CsvWriter csv({"op", "max_rel_err", "tolerance", "seeds", "pass"});
  bool all_pass = true;
  for (const auto& r : results) {
    csv.add_row(r.name, {r.max_rel_err, r.tolerance, static_cast<double>(r.seeds),
                         r.pass ? 1.0 : 0.0});
    all_pass = all_pass && r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name
              << "  max_rel_err=" << castling::format_double(r.max_rel_err)
              << " tol=" << castling::format_double(r.tolerance) << "\n";
  }
  csv.write(out / "grad_check.csv");
  std::cout << (all_pass ? "gradient checks: all passed (" : "gradient checks: FAILURES (")
            << results.size() << " cases, " << seeds << " seeds each)\n";
  return all_pass ? 0 : 3;
}

// ---- bench-scaling ---------------------------------------------------------------

int run_bench_scaling(const Common& c) {
  std::vector<std::string> variants{"quadratic_softmax", "linear_angular"};
  std::vector<std::size_t> n_list{256, 512, 1024, 2048, 4096, 8192};
  std::size_t d = 32;
  int reps = 5;
  std::uint64_t seed = 1;

  if (!c.config_path.empty()) {
    const json j = load_config(c.config_path);
    if (j.value("schema_version", 1) != 1)
      throw castling::ConfigError("unsupported bench config schema_version");
    try {
      if (j.contains("variants")) variants = j["variants"].get<std::vector<std::string>>();
      if (j.contains("n_list")) n_list = j["n_list"].get<std::vector<std::size_t>>();
      d = j.value("d", d);
      reps = j.value("reps", reps);
      seed = j.value("seed", seed);
    } catch (const json::exception& e) {
      throw castling::ConfigError(std::string("malformed bench config: ") + e.what());
    }
  }
  if (c.seed) seed = *c.seed;

  const fs::path out = resolve_out_dir(c);
  const auto runs = castling::scaling_benchmark(variants, n_list, d, reps, seed);

  castling::CsvWriter points({"variant", "n", "median_seconds"});
  castling::CsvWriter summary({"variant", "d", "reps", "slope", "r2", "timer_warning", "checksum"});
  for (const auto& run : runs) {
    for (const auto& p : run.points)
      points.add_row(run.variant, {static_cast<double>(p.n), p.median_seconds});
    summary.add_row(run.variant, {static_cast<double>(run.d), static_cast<double>(run.reps),
                                  run.slope, run.r2, run.timer_warning ? 1.0 : 0.0, run.checksum});
    std::cout << run.variant << ": slope=" << castling::format_double(run.slope)
              << " r2=" << castling::format_double(run.r2)
              << (run.timer_warning ? "  [warning: a median fell under 1 ms]" : "") << "\n";
  }
  points.write(out / "scaling.csv");
  summary.write(out / "scaling_summary.csv");
  std::cout << "wrote " << (out / "scaling.csv").string() << " and "
            << (out / "scaling_summary.csv").string() << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------------

int run_train(const Common& c) {
  auto cfg = castling::train::TrainConfig::from_json(load_config(c.config_path));
  if (c.seed) cfg.run.seed = *c.seed;
  const fs::path out = resolve_out_dir(c);

  castling::train::TrainResult result = castling::train::train(cfg);

  write_text(out / "metrics.csv", castling::train::rows_to_csv(result.metrics));
  write_text(out / "mask_trace.csv", castling::train::rows_to_csv(result.trace));
  castling::model::save_checkpoint(result.model, out / "checkpoint");

  const double final_eps = cfg.schedule.at(result.steps_run);
  write_json(out / "train_result.json",
             json{{"aborted", result.aborted},
                  {"abort_reason", result.abort_reason},
                  {"steps_run", result.steps_run},
                  {"final_train_loss", result.final_train_loss},
                  {"final_val_loss", result.final_val_loss},
                  {"final_val_acc", result.final_val_acc},
                  {"step0_mask_fraction", result.step0_mask_fraction},
                  {"final_epoch_mask_fraction", result.final_epoch_mask_fraction},
                  {"dataset_hash", result.dataset_hash},
                  {"final_epsilon", final_eps}});
  // Ready-made config for the castle subcommand against this checkpoint.
  write_json(out / "castle.json", json{{"schema_version", 1},
                                       {"checkpoint", (out / "checkpoint").string()},
                                       {"data", cfg.data.to_json()},
                                       {"batch", std::min<std::size_t>(cfg.run.batch, 8)},
                                       {"epsilon", final_eps}});

  std::cout << "train: " << result.steps_run << " steps, final val acc "
            << castling::format_double(result.final_val_acc) << ", final train loss "
            << castling::format_double(result.final_train_loss) << "\n";
  if (cfg.model.use_aux)
    std::cout << "  mask fraction: step0 " << castling::format_double(result.step0_mask_fraction)
              << " -> final epoch " << castling::format_double(result.final_epoch_mask_fraction)
              << "\n";
  if (result.aborted) {
    std::cout << "  run aborted: " << result.abort_reason << "\n";
    return 3;
  }
  return 0;
}

// ---- ablate -------------------------------------------------------------------------

int run_ablate(const Common& c) {
  auto cfg = castling::train::TrainConfig::from_json(load_config(c.config_path));
  if (c.seed) cfg.run.seed = *c.seed;
  const fs::path out = resolve_out_dir(c);

  const auto rows = castling::train::run_ablation_grid(cfg);

  std::ostringstream csv;
  csv << "variant,val_acc,train_macs,castled_macs,dataset_hash,seed\n";
  for (const auto& r : rows) {
    csv << r.variant << ',' << castling::format_double(r.val_acc) << ',' << r.train_macs << ','
        << r.castled_macs << ',' << r.dataset_hash << ',' << r.seed << '\n';
    std::cout << r.variant << ": val_acc=" << castling::format_double(r.val_acc)
              << " train_macs=" << r.train_macs << " castled_macs=" << r.castled_macs << "\n";
  }
  write_text(out / "ablation.csv", csv.str());
  std::cout << "wrote " << (out / "ablation.csv").string() << "\n";
  return 0;
}

// ---- fprinciple ------------------------------------------------------------------------

int run_fprinciple(const Common& c) {
  auto cfg = castling::fprinciple::FitConfig::from_json(load_config(c.config_path));
  if (c.seed) cfg.seed = *c.seed;
  const fs::path out = resolve_out_dir(c);

  const auto result = castling::fprinciple::fit_residual(cfg);

  castling::CsvWriter loss_csv({"step", "loss"});
  for (const auto& [step, loss] : result.loss_trajectory)
    loss_csv.add_row({static_cast<double>(step), loss});
  loss_csv.write(out / "fprinciple_loss.csv");

  castling::CsvWriter spec_csv({"step", "bin", "rel_error"});
  for (std::size_t s = 0; s < result.spectrum.steps.size(); ++s)
    for (std::size_t b = 0; b < result.spectrum.rel_errors[s].size(); ++b)
      spec_csv.add_row({static_cast<double>(result.spectrum.steps[s]), static_cast<double>(b),
                        result.spectrum.rel_errors[s][b]});
  spec_csv.write(out / "fprinciple_spectrum.csv");

  std::cout << "fprinciple: final loss " << castling::format_double(result.final_loss) << " after "
            << cfg.steps << " steps; wrote " << (out / "fprinciple_loss.csv").string() << " and "
            << (out / "fprinciple_spectrum.csv").string() << "\n";
  return 0;
}

// ---- castle ---------------------------------------------------------------------------

int run_castle(const Common& c) {
  const json j = load_config(c.config_path);
  if (j.value("schema_version", 1) != 1)
    throw castling::ConfigError("unsupported castle config schema_version");
  if (!j.contains("checkpoint"))
    throw castling::ConfigError("castle config needs a \"checkpoint\" path");
  const fs::path checkpoint = j["checkpoint"].get<std::string>();
  auto data_cfg = j.contains("data") ? castling::DatasetConfig::from_json(j["data"])
                                     : castling::DatasetConfig{};
  const std::size_t batch = j.value("batch", std::size_t{8});
  const fs::path out = resolve_out_dir(c);

  castling::model::TinyViT model = castling::model::load_checkpoint(checkpoint);
  const double epsilon = j.value("epsilon", 0.02);

  const auto ds = castling::generate_dataset(data_cfg);
  if (ds.val_indices.empty()) throw castling::ConfigError("dataset has no validation samples");
  std::vector<castling::Tensor> calibration;
  for (std::size_t i = 0; i < std::min(batch, ds.val_indices.size()); ++i)
    calibration.push_back(ds.images[ds.val_indices[i]]);

  const auto report = castling::train::castle_check(model, calibration, epsilon);
  std::cout << report.message << "\n";

  castling::model::TinyViT castled = castling::train::castle(model);
  castling::model::save_checkpoint(castled, out / "castled_checkpoint");
  write_json(out / "castle_report.json",
             json{{"bitwise_identical", report.bitwise_identical},
                  {"residual_nonzeros", report.residual_nonzeros},
                  {"mask_entries", report.mask_entries},
                  {"residual_mass", report.residual_mass},
                  {"max_logit_delta", report.max_logit_delta},
                  {"message", report.message},
                  {"epsilon", epsilon}});
  std::cout << "wrote " << (out / "castle_report.json").string() << " and castled checkpoint\n";
  return 0;
}

// ---- kernel-compare ----------------------------------------------------------------------

int run_kernel_compare(const Common& c) {
  const json j = load_config(c.config_path);
  if (j.value("schema_version", 1) != 1)
    throw castling::ConfigError("unsupported kernel-compare config schema_version");
  if (!j.contains("kernels") || !j["kernels"].is_array() || j["kernels"].empty())
    throw castling::ConfigError("kernel-compare config needs a non-empty \"kernels\" array");
  if (!j.contains("train"))
    throw castling::ConfigError("kernel-compare config needs a \"train\" object");

  std::vector<castling::attention::KernelKind> kernels;
  for (const auto& name : j["kernels"])
    kernels.push_back(castling::attention::kernel_from_string(name.get<std::string>()));
  auto base = castling::train::TrainConfig::from_json(j["train"]);
  if (c.seed) base.run.seed = *c.seed;
  const fs::path out = resolve_out_dir(c);

  const auto rows = castling::train::kernel_compare(kernels, base);

  std::ostringstream csv;
  csv << "kernel,val_acc,castled_macs,wall_seconds,seed\n";
  for (const auto& r : rows) {
    csv << r.kernel << ',' << castling::format_double(r.val_acc) << ',' << r.macs << ','
        << castling::format_double(r.wall_seconds) << ',' << r.seed << '\n';
    std::cout << r.kernel << ": val_acc=" << castling::format_double(r.val_acc)
              << " castled_macs=" << r.macs << " wall_s=" << castling::format_double(r.wall_seconds)
              << "\n";
  }
  write_text(out / "kernel_compare.csv", csv.str());
  std::cout << "wrote " << (out / "kernel_compare.csv").string() << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"castling: linear-angular attention laboratory"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads,
                 "accepted for interface stability; every code path here is single-threaded");

  Common flops_c, grad_c, bench_c, train_c, ablate_c, fp_c, castle_c, kc_c;
  int grad_seeds = 50;
  std::uint64_t grad_base_seed = 20240 /* arbitrary fixed default */;

  auto* flops = app.add_subcommand("flops", "analytic MAC model for one attention config");
  add_common(flops, flops_c);

  auto* grad = app.add_subcommand("grad-check", "finite-difference checks for every op");
  add_common(grad, grad_c, /*config_required=*/false);
  grad->add_option("--seeds", grad_seeds, "random instances per op (default 50)");

  auto* bench = app.add_subcommand("bench-scaling", "wall-clock scaling across token counts");
  add_common(bench, bench_c, /*config_required=*/false);

  auto* train_cmd = app.add_subcommand("train", "train one classifier per the config");
  add_common(train_cmd, train_c);

  auto* ablate = app.add_subcommand("ablate", "train the five-variant composition grid");
  add_common(ablate, ablate_c);

  auto* fp = app.add_subcommand("fprinciple", "frequency-learning experiment");
  add_common(fp, fp_c);

  auto* castle_cmd = app.add_subcommand("castle", "strip the aux branch and verify the switch");
  add_common(castle_cmd, castle_c);

  auto* kc = app.add_subcommand("kernel-compare", "train one model per kernel kind");
  add_common(kc, kc_c);

  int rc = 0;
  flops->callback([&] { rc = run_flops(flops_c); });
  grad->callback([&] { rc = run_grad_check(grad_c, grad_seeds, grad_base_seed); });
  bench->callback([&] { rc = run_bench_scaling(bench_c); });
  train_cmd->callback([&] { rc = run_train(train_c); });
  ablate->callback([&] { rc = run_ablate(ablate_c); });
  fp->callback([&] { rc = run_fprinciple(fp_c); });
  castle_cmd->callback([&] { rc = run_castle(castle_c); });
  kc->callback([&] { rc = run_kernel_compare(kc_c); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e); // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e); // prints the usage error
    return 2;
  } catch (const castling::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const castling::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
