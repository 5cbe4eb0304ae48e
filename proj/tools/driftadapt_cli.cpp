#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "driftadapt/harness.hpp"
#include "driftadapt/sweeps.hpp"

namespace fs = std::filesystem;
using namespace driftadapt;

namespace {

struct Common {
  std::string spec_path;
  std::string out = "runs/out";
  std::string cache;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* app, Common& c, bool spec_required = true) {
  auto* o = app->add_option("--spec", c.spec_path, "experiment spec (JSON)")->check(CLI::ExistingFile);
  if (spec_required) o->required();
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "test-noise seed (overrides the spec)")->each([&c](const std::string&) {
    c.seed_set = true;
  });
  app->add_option("--cache", c.cache, "trained-network cache directory (default <out>/cache)");
  app->add_option("--checkpoint", c.checkpoint, "use this f0 instead of training one")->check(CLI::ExistingFile);
}

ExperimentSpec spec_of(const Common& c) {
  ExperimentSpec s = load_spec(c.spec_path);
  if (c.seed_set) s.seed = c.seed;
  if (!c.checkpoint.empty()) s.checkpoint = c.checkpoint;
  s.validate();
  return s;
}

RunOptions options_of(const Common& c) {
  RunOptions o;
  o.out_dir = c.out;
  o.cache_dir = c.cache;
  return o;
}

void print_record(const RunRecord& r) {
  std::printf("%s [%s]: PSNR %.4f +- %.4f dB, SSIM %.4f +- %.4f, residual %.6f (N=%zu, %.1f s)\n", r.name.c_str(),
              r.method.c_str(), r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std, r.residual.mean, r.images.size(),
              r.wall_time);
  if (!r.chosen.is_null())
    std::printf("  grid: %s = %g (val PSNR %.4f)\n", r.chosen["param"].get<std::string>().c_str(),
                r.chosen["value"].get<double>(), r.chosen["val_psnr"].get<double>());
}

void emit(const Table& t, const std::string& out, const std::string& stem) {
  std::cout << t.text();
  t.write(out, stem);
  std::printf("wrote %s\n", (fs::path(out) / "tables" / (stem + ".csv")).string().c_str());
}

int cmd_train(const Common& c) {
  const ExperimentSpec s = spec_of(c);
  const Datasets d = load_datasets(s);
  TrainReport rep;
  const ReconNet net = train_f0(s, d, &rep);
  fs::create_directories(c.out);
  const std::string ck = (fs::path(c.out) / "f0.dann").string();
  save_checkpoint(ck, net.params());
  write_training_curve((fs::path(c.out) / "training_curve.csv").string(), rep);
  std::ofstream(fs::path(c.out) / "f0.json") << training_key(s).dump(2) << '\n';
  std::printf("trained %zu parameters for %d epochs; best epoch %d, val loss %.6g\nwrote %s\n", net.num_params(),
              s.train.cfg.epochs, rep.best_epoch, rep.best_val_loss, ck.c_str());
  return 0;
}

int cmd_run(const Common& c, const std::string& method_override, bool adapt_only) {
  ExperimentSpec s = spec_of(c);
  if (!method_override.empty()) s.method = method_override;
  s.validate();
  if (adapt_only && (s.method == "none" || s.method == "adjoint" || s.method == "pinv" || s.method == "tv"))
    throw std::invalid_argument("'" + s.method + "' is not an adaptation method; use eval");
  const RunRecord r = run_experiment(s, options_of(c));
  print_record(r);
  std::printf("wrote %s\n", (fs::path(c.out) / "runrecord.json").string().c_str());
  return 0;
}

int cmd_gen_data(const Common& c, int count, int size, bool complex_images) {
  std::vector<Tensor> imgs;
  if (!c.spec_path.empty()) {
    ExperimentSpec s = spec_of(c);
    if (s.images.kind != "synthetic") throw std::invalid_argument("gen-data needs a synthetic image source");
    const Datasets d = load_datasets(s);
    for (const auto* v : {&d.train, &d.val, &d.test, &d.calib}) imgs.insert(imgs.end(), v->begin(), v->end());
  } else {
    imgs = gen_synthetic(c.seed, count, size, complex_images);
  }
  const fs::path dir = fs::path(c.out) / "images";
  fs::create_directories(dir);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.dat", i);
    save_tensor((dir / name).string(), imgs[i]);
  }
  std::printf("wrote %zu images to %s\n", imgs.size(), dir.string().c_str());
  return 0;
}

int cmd_gen_mask(const Common& c, int width, double accel, double cf, int swaps, double offsets) {
  KspaceMask m;
  if (!c.spec_path.empty()) {
    const ExperimentSpec s = spec_of(c);
    if (s.A0.value("kind", std::string()) != "fourier") throw std::invalid_argument("spec A0 is not a fourier operator");
    m = mask_from_spec(s.A0, s.images.size);
  } else {
    m = make_kspace_mask(width, accel, cf, c.seed);
    if (swaps > 0) m = swap_lines(m, swaps, mix_seed(c.seed, 1));
    if (offsets > 0) m = perturb_line_offsets(m, offsets, mix_seed(c.seed, 2));
  }
  const fs::path dir = fs::path(c.out) / "masks";
  fs::create_directories(dir);
  const std::string path = (dir / "mask.json").string();
  save_mask(path, m);
  std::printf("%zu of %d lines sampled; wrote %s\n", m.sampled_lines.size(), m.width, path.c_str());
  return 0;
}

int cmd_report(const Common& c, const std::vector<std::string>& records) {
  std::vector<std::string> paths = records;
  if (paths.empty()) {
    // every runrecord.json below --out
    if (!fs::is_directory(c.out)) throw IoError("no run records given and " + c.out + " is not a directory");
    for (const auto& e : fs::recursive_directory_iterator(c.out))
      if (e.path().filename() == "runrecord.json") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
  }
  if (paths.empty()) throw IoError("no run records found");
  std::vector<RunRecord> recs;
  for (const auto& p : paths) recs.push_back(load_record(p));
  if (!c.spec_path.empty()) {
    const std::string h = data_hash(spec_of(c));
    for (const auto& r : recs)
      if (r.data_hash != h) throw std::invalid_argument("run " + r.name + " does not match the given spec's data hash");
  }
  emit(report_table(recs), c.out, "report");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"driftadapt: reconstruction under forward-model drift"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common c;
  std::string method;
  int count = 64, size = 32, width = 32, swaps = 0, repeats = 10, unseen = 4;
  double accel = 6.0, cf = 0.04, offsets = 0.0;
  bool complex_images = false;
  std::vector<double> accels{2, 4, 6, 8, 12};
  std::vector<int> swap_counts{0, 2, 4, 6}, sizes{1, 4, 16, 64}, kernel_counts{1, 2, 4, 8};
  std::vector<std::string> records;

  auto* train = app.add_subcommand("train", "train f0 on A0");
  add_common(train, c);
  auto* adapt = app.add_subcommand("adapt", "run an adaptation method and evaluate it");
  add_common(adapt, c);
  adapt->add_option("--method", method, "override the spec's method");
  auto* eval = app.add_subcommand("eval", "evaluate the spec's method (including none and tv)");
  add_common(eval, c);
  eval->add_option("--method", method, "override the spec's method");

  auto* sweep = app.add_subcommand("sweep", "parameter sweeps");
  sweep->require_subcommand(1);
  auto* rate = sweep->add_subcommand("rate", "PSNR vs acceleration, no adaptation vs R&R");
  add_common(rate, c);
  rate->add_option("--accelerations", accels, "accelerations")->delimiter(',');
  auto* overlap = sweep->add_subcommand("overlap", "PSNR vs number of swapped k-space lines");
  add_common(overlap, c);
  overlap->add_option("--swaps", swap_counts, "swap counts")->delimiter(',');
  overlap->add_option("--repeats", repeats, "random instantiations per count")->capture_default_str();
  auto* calib = sweep->add_subcommand("calib", "calibrated P&P vs calibration set size");
  add_common(calib, c);
  calib->add_option("--sizes", sizes, "calibration sizes")->delimiter(',');
  auto* kernels = sweep->add_subcommand("kernels", "multi-kernel training vs single-model adaptation");
  add_common(kernels, c);
  kernels->add_option("--counts", kernel_counts, "training kernel counts")->delimiter(',');
  kernels->add_option("--unseen", unseen, "held-out kernels")->capture_default_str();

  auto* gen_data = app.add_subcommand("gen-data", "write synthetic images as .dat files");
  add_common(gen_data, c, false);
  gen_data->add_option("--count", count, "images (without --spec)")->capture_default_str();
  gen_data->add_option("--size", size, "image size (without --spec)")->capture_default_str();
  gen_data->add_flag("--complex", complex_images, "smooth random phase (MRI)");
  auto* gen_mask = app.add_subcommand("gen-mask", "write a k-space mask as JSON");
  add_common(gen_mask, c, false);
  gen_mask->add_option("--width", width, "mask width (without --spec)")->capture_default_str();
  gen_mask->add_option("--acceleration", accel, "acceleration")->capture_default_str();
  gen_mask->add_option("--center-fraction", cf, "fully sampled centre fraction")->capture_default_str();
  gen_mask->add_option("--swap", swaps, "lines swapped out of the pattern")->capture_default_str();
  gen_mask->add_option("--offsets", offsets, "max line offset")->capture_default_str();
  auto* report = app.add_subcommand("report", "tabulate run records");
  add_common(report, c, false);
  report->add_option("records", records, "runrecord.json files (default: all under --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train(c);
    if (*adapt) return cmd_run(c, method, true);
    if (*eval) return cmd_run(c, method, false);
    if (*rate) {
      const ExperimentSpec s = spec_of(c);
      emit(rate_table(sweep_sampling_rate(s, accels, options_of(c))), c.out, "sampling_rate");
      return 0;
    }
    if (*overlap) {
      const ExperimentSpec s = spec_of(c);
      emit(overlap_table(sweep_nullspace_overlap(s, swap_counts, repeats, options_of(c))), c.out, "nullspace_overlap");
      return 0;
    }
    if (*calib) {
      const ExperimentSpec s = spec_of(c);
      emit(calib_table(sweep_calibration_size(s, sizes, options_of(c))), c.out, "calibration_size");
      return 0;
    }
    if (*kernels) {
      const ExperimentSpec s = spec_of(c);
      emit(kernel_table(multi_kernel_training(s, kernel_counts, unseen, options_of(c))), c.out, "multi_kernel");
      return 0;
    }
    if (*gen_data) return cmd_gen_data(c, count, size, complex_images);
    if (*gen_mask) return cmd_gen_mask(c, width, accel, cf, swaps, offsets);
    if (*report) return cmd_report(c, records);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
