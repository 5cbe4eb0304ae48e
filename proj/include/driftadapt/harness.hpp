#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "driftadapt/adapt.hpp"
#include "driftadapt/data.hpp"
#include "driftadapt/family.hpp"
#include "driftadapt/kspace_mask.hpp"
#include "driftadapt/linops.hpp"
#include "driftadapt/metrics.hpp"
#include "driftadapt/network.hpp"
#include "driftadapt/parallel.hpp"
#include "driftadapt/solvers.hpp"
#include "driftadapt/tensor_io.hpp"
#include "driftadapt/train.hpp"

namespace driftadapt {

inline constexpr const char* kToolkitVersion = "driftadapt 0.1.0";

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Canonical (key-sorted, compact) JSON hash.
inline std::string json_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Operators from JSON

/// Unit-mass directional kernel for the multi-kernel bank: a motion blur of
/// random odd length in [3, size] at a random angle, zero-padded to size x size.
inline std::vector<double> random_directional_kernel(int size, Rng& rng) {
  const int len = 3 + 2 * static_cast<int>(rng.below(static_cast<std::uint64_t>((size - 3) / 2 + 1)));
  const auto k = motion_blur_kernel(len, rng.uniform(0.0, 180.0));
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  const int off = (size - len) / 2;
  for (int a = 0; a < len; ++a)
    for (int b = 0; b < len; ++b) out[(a + off) * size + b + off] = k[a * len + b];
  return out;
}

inline KspaceMask mask_from_spec(const nlohmann::json& j, int width) {
  if (j.contains("mask_file")) return load_mask(j.at("mask_file").get<std::string>());
  KspaceMask m = make_kspace_mask(j.value("width", width), j.value("acceleration", 6.0),
                                  j.value("center_fraction", 0.04), j.value("seed", std::uint64_t{0}));
  if (const int n = j.value("swap", 0); n > 0) m = swap_lines(m, n, j.value("swap_seed", std::uint64_t{0}));
  if (const double d = j.value("offsets_max", 0.0); d > 0.0)
    m = perturb_line_offsets(m, d, j.value("offset_seed", std::uint64_t{0}));
  return m;
}

/// Builds an operator from its JSON description for images of shape `img`.
inline Operator operator_from_json(const nlohmann::json& j, Shape img) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity") return make_identity(j.value("complex", false) ? DType::complex : DType::real);
  if (kind == "motion_blur") return make_motion_blur(j.value("size", 7), j.at("angle").get<double>());
  if (kind == "smooth_blur") return make_blur(j.value("size", 7), smooth_line_kernel(j.value("size", 7), j.at("angle")));
  if (kind == "blur") return make_blur(j.at("size").get<int>(), j.at("kernel").get<std::vector<double>>());
  if (kind == "downsample") {
    const std::string k = j.value("kernel", std::string("bilinear"));
    if (k != "bilinear" && k != "bicubic") throw std::invalid_argument("unknown downsample kernel '" + k + "'");
    return make_downsample(j.value("factor", 2), k == "bilinear" ? DownsampleKernel::bilinear : DownsampleKernel::bicubic);
  }
  if (kind == "fourier") return make_fourier_mask(mask_from_spec(j, img.width), img);
  throw std::invalid_argument("unknown operator kind '" + kind + "'");
}

/// Family description: {"kind": "native"} (A0's own parameters, the default
/// prior) or {"kind": "blur_angle", "size": 7, "init": 10}.
inline Family family_from_json(const nlohmann::json& j, const Operator& A0, std::vector<double>* sigma_init) {
  const std::string kind = j.value("kind", std::string("native"));
  if (kind == "native") {
    if (sigma_init) *sigma_init = j.contains("init") ? j.at("init").get<std::vector<double>>() : A0->params();
    return native_family(A0);
  }
  if (kind == "blur_angle") {
    if (sigma_init) *sigma_init = {j.value("init", 10.0)};
    return blur_angle_family(j.value("size", 7));
  }
  throw std::invalid_argument("unknown family kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Experiment specification

enum class Problem { deblur, superres, mri };

inline const char* to_string(Problem p) {
  switch (p) {
    case Problem::deblur: return "deblur";
    case Problem::superres: return "superres";
    default: return "mri";
  }
}

inline Problem problem_from_string(const std::string& s) {
  if (s == "deblur") return Problem::deblur;
  if (s == "superres") return Problem::superres;
  if (s == "mri") return Problem::mri;
  throw std::invalid_argument("unknown problem '" + s + "'");
}

struct ImageSource {
  std::string kind = "synthetic";  // or "directory"
  std::string path;
  std::uint64_t seed = 1;
  int size = 32;
  int train = 256, val = 64, test = 64, calib = 64;
};

struct NetTrainSpec {
  TrainConfig cfg;
  int hidden = 16;
  int hidden_layers = 3;
  std::uint64_t init_seed = 0;
};

struct GridSpec {
  std::string param = "lambda";  // lambda | mu | tau | lr | tv_weight
  std::vector<double> values;
  int val_images = 8;
};

struct TvSpec {
  double weight = 0.01;
  int iters = 200;
  double step = 1.0;
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"none",  "adjoint", "pinv",        "tv",       "pnp",     "pnp_blind",
                                          "pnp_calib", "pnp_blind_calib", "rnr", "rnr_sigma", "rnr_plus", "fixed_point"};
  return m;
}

struct ExperimentSpec {
  std::string name = "experiment";
  Problem problem = Problem::deblur;
  nlohmann::json A0 = {{"kind", "motion_blur"}, {"size", 7}, {"angle", 10.0}};
  nlohmann::json A1 = {{"kind", "motion_blur"}, {"size", 7}, {"angle", 20.0}};
  nlohmann::json family;  // null unless a blind method needs it
  ImageSource images;
  double sigma0 = 0.01, sigma1 = 0.01;
  NetTrainSpec train;
  std::string method = "none";
  AdaptConfig adapt;
  TvSpec tv;
  int calibration = 1;  // measurements used by the *_calib methods
  std::optional<GridSpec> grid;
  std::string checkpoint;  // explicit f0; trained and cached when empty
  std::uint64_t seed = 0;  // test-noise seed

  bool complex_images() const { return problem == Problem::mri; }
  Shape image_shape() const { return {1, images.size, images.size}; }
  void validate() const {
    bool ok = false;
    for (const auto& m : known_methods()) ok = ok || m == method;
    if (!ok) throw std::invalid_argument("unknown method '" + method + "'");
    adapt.validate();
    if (images.kind != "synthetic" && images.kind != "directory")
      throw std::invalid_argument("unknown image source '" + images.kind + "'");
    if (images.test < 1) throw std::invalid_argument("test set must be nonempty");
    if (calibration < 1) throw std::invalid_argument("calibration size must be >= 1");
    if (sigma0 < 0.0 || sigma1 < 0.0) throw std::invalid_argument("noise levels must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  const auto& t = s.train.cfg;
  j = {{"name", s.name},
       {"problem", to_string(s.problem)},
       {"A0", s.A0},
       {"A1", s.A1},
       {"images",
        {{"kind", s.images.kind},
         {"path", s.images.path},
         {"seed", s.images.seed},
         {"size", s.images.size},
         {"train", s.images.train},
         {"val", s.images.val},
         {"test", s.images.test},
         {"calib", s.images.calib}}},
       {"noise", {{"sigma0", s.sigma0}, {"sigma1", s.sigma1}}},
       {"train",
        {{"epochs", t.epochs},
         {"batch_size", t.batch_size},
         {"opt", t.opt},
         {"final_lr_fraction", t.final_lr_fraction},
         {"seed", t.seed},
         {"hidden", s.train.hidden},
         {"hidden_layers", s.train.hidden_layers},
         {"init_seed", s.train.init_seed}}},
       {"method", s.method},
       {"adapt", s.adapt},
       {"tv", {{"weight", s.tv.weight}, {"iters", s.tv.iters}, {"step", s.tv.step}}},
       {"calibration", s.calibration},
       {"checkpoint", s.checkpoint},
       {"seed", s.seed}};
  if (!s.family.is_null()) j["family"] = s.family;
  if (s.grid) j["grid"] = {{"param", s.grid->param}, {"values", s.grid->values}, {"val_images", s.grid->val_images}};
}

/// Log grid with `per_decade` points per decade over [lo, hi].
inline std::vector<double> log_grid(double lo, double hi, int per_decade) {
  if (!(lo > 0.0 && hi >= lo) || per_decade < 1) throw std::invalid_argument("log_grid: bad range");
  std::vector<double> v;
  const int n = static_cast<int>(std::lround(std::log10(hi / lo) * per_decade));
  for (int i = 0; i <= n; ++i) v.push_back(lo * std::pow(10.0, static_cast<double>(i) / per_decade));
  return v;
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  s = ExperimentSpec{};
  s.name = j.value("name", s.name);
  s.problem = problem_from_string(j.value("problem", std::string("deblur")));
  if (j.contains("A0")) s.A0 = j.at("A0");
  s.A1 = j.contains("A1") ? j.at("A1") : s.A0;
  if (j.contains("family")) s.family = j.at("family");
  if (j.contains("images")) {
    const auto& im = j.at("images");
    s.images.kind = im.value("kind", s.images.kind);
    s.images.path = im.value("path", s.images.path);
    s.images.seed = im.value("seed", s.images.seed);
    s.images.size = im.value("size", s.images.size);
    s.images.train = im.value("train", s.images.train);
    s.images.val = im.value("val", s.images.val);
    s.images.test = im.value("test", s.images.test);
    s.images.calib = im.value("calib", s.images.calib);
  }
  if (j.contains("noise")) {
    s.sigma0 = j.at("noise").value("sigma0", s.sigma0);
    s.sigma1 = j.at("noise").value("sigma1", s.sigma1);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    auto& c = s.train.cfg;
    c.epochs = t.value("epochs", c.epochs);
    c.batch_size = t.value("batch_size", c.batch_size);
    if (t.contains("opt")) c.opt = t.at("opt").get<OptimizerSpec>();
    if (t.contains("lr")) c.opt.lr = t.at("lr").get<double>();
    c.final_lr_fraction = t.value("final_lr_fraction", c.final_lr_fraction);
    c.seed = t.value("seed", c.seed);
    s.train.hidden = t.value("hidden", s.train.hidden);
    s.train.hidden_layers = t.value("hidden_layers", s.train.hidden_layers);
    s.train.init_seed = t.value("init_seed", s.train.init_seed);
  }
  s.method = j.value("method", s.method);
  if (j.contains("adapt")) s.adapt = j.at("adapt").get<AdaptConfig>();
  if (j.contains("tv")) {
    s.tv.weight = j.at("tv").value("weight", s.tv.weight);
    s.tv.iters = j.at("tv").value("iters", s.tv.iters);
    s.tv.step = j.at("tv").value("step", s.tv.step);
  }
  s.calibration = j.value("calibration", s.calibration);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    GridSpec gs;
    gs.param = g.value("param", gs.param);
    gs.val_images = g.value("val_images", gs.val_images);
    if (g.contains("values"))
      gs.values = g.at("values").get<std::vector<double>>();
    else
      gs.values = log_grid(g.value("lo", 1e-4), g.value("hi", 1e1), g.value("per_decade", 5));
    s.grid = gs;
  }
  s.checkpoint = j.value("checkpoint", s.checkpoint);
  s.seed = j.value("seed", s.seed);
  s.validate();
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open spec " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("spec " + path + " is not valid JSON: " + e.what());
  }
  return j.get<ExperimentSpec>();
}

inline std::string spec_hash(const ExperimentSpec& s) { return json_hash(nlohmann::json(s)); }

/// Identifies the trained network: everything that feeds training.
inline nlohmann::json training_key(const ExperimentSpec& s) {
  const nlohmann::json full = s;
  nlohmann::json im = full.at("images");
  im.erase("test");
  im.erase("calib");
  return {{"problem", full.at("problem")}, {"A0", s.A0},       {"images", im},
          {"sigma0", s.sigma0},             {"train", full.at("train")}, {"version", kToolkitVersion}};
}

/// Identifies the evaluation instance (images, operators, noise): records
/// sharing it are comparable in one table.
inline std::string data_hash(const ExperimentSpec& s) {
  const nlohmann::json full = s;
  return json_hash({{"problem", full.at("problem")},
                    {"A0", s.A0},
                    {"A1", s.A1},
                    {"images", full.at("images")},
                    {"noise", full.at("noise")},
                    {"train", full.at("train")},
                    {"checkpoint", s.checkpoint},
                    {"seed", s.seed}});
}

// ---------------------------------------------------------------------------
// Data

struct Datasets {
  std::vector<Tensor> train, val, test, calib;
};

inline Datasets load_datasets(const ExperimentSpec& s) {
  Datasets d;
  const auto& im = s.images;
  const bool cx = s.complex_images();
  if (im.kind == "synthetic") {
    d.train = gen_synthetic(mix_seed(im.seed, 1), im.train, im.size, cx);
    d.val = gen_synthetic(mix_seed(im.seed, 2), im.val, im.size, cx);
    d.test = gen_synthetic(mix_seed(im.seed, 3), im.test, im.size, cx);
    d.calib = gen_synthetic(mix_seed(im.seed, 4), im.calib, im.size, cx);
    return d;
  }
  // directory: files in name order, split train | val | test | calib
  auto all = load_image_directory(im.path);
  const std::size_t need = static_cast<std::size_t>(im.train + im.val + im.test + im.calib);
  if (all.size() < need)
    throw IoError("image directory " + im.path + " holds " + std::to_string(all.size()) + " images, spec needs " +
                  std::to_string(need));
  if (cx)
    for (auto& t : all)
      if (!t.is_complex()) t = to_complex(t);
  std::size_t at = 0;
  auto take = [&](int n) {
    std::vector<Tensor> v(all.begin() + static_cast<std::ptrdiff_t>(at), all.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += static_cast<std::size_t>(n);
    return v;
  };
  d.train = take(im.train);
  d.val = take(im.val);
  d.test = take(im.test);
  d.calib = take(im.calib);
  return d;
}

/// y_i = A x_i + sigma * noise with a per-(seed, tag, i) stream.
inline std::vector<Tensor> measure(const LinearOperator& A, const std::vector<Tensor>& xs, double sigma,
                                   std::uint64_t seed, std::uint64_t tag) {
  std::vector<Tensor> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Rng rng(mix_seed(mix_seed(seed, tag), i));
    ys[i] = add_noise(A.apply(xs[i]), sigma, rng);
  }
  return ys;
}

/// PSNR/SSIM compare magnitudes for complex images.
inline double image_psnr(const Tensor& x, const Tensor& ref) {
  return x.is_complex() ? psnr(magnitude(x), magnitude(ref)) : psnr(x, ref);
}
inline double image_ssim(const Tensor& x, const Tensor& ref) { return ssim(x, ref); }

// ---------------------------------------------------------------------------
// Trained network (f0)

struct RunOptions {
  std::string out_dir;    // empty: nothing written
  std::string cache_dir;  // f0 cache; defaults to <out_dir>/cache
  bool save_tensors = true;
  bool verbose = false;
};

inline std::string resolve_cache_dir(const RunOptions& o) {
  if (!o.cache_dir.empty()) return o.cache_dir;
  if (!o.out_dir.empty()) return (std::filesystem::path(o.out_dir) / "cache").string();
  return {};
}

inline ReconNet train_f0(const ExperimentSpec& s, const Datasets& d, TrainReport* report = nullptr) {
  const Operator A0 = operator_from_json(s.A0, s.image_shape());
  Rng rng(s.train.init_seed);
  const NetworkArch arch =
      NetworkArch::for_dtype(s.complex_images() ? DType::complex : DType::real, s.train.hidden, s.train.hidden_layers);
  ReconNet net(NetworkParams::init(arch, rng));
  TrainConfig cfg = s.train.cfg;
  cfg.noise_sigma = s.sigma0;
  const TrainReport rep = train_supervised(net, A0, d.train, d.val, cfg);
  if (report) *report = rep;
  return net;
}

inline void write_training_curve(const std::string& path, const TrainReport& rep) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.precision(17);
  f << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < rep.val_loss.size(); ++e)
    f << e << ',' << (e == 0 ? std::nan("") : rep.train_loss[e - 1]) << ',' << rep.val_loss[e] << '\n';
}

/// Network keyed by `key` in the cache dir: loaded when present, otherwise
/// produced by train() and stored with its key and training curve. An entry
/// whose recorded key differs from `key` is refused.
template <typename Train>
ReconNet cached_network(const nlohmann::json& key, const std::string& dir, Train&& train) {
  namespace fs = std::filesystem;
  const std::string h = json_hash(key);
  const fs::path ck = fs::path(dir) / ("f0_" + h + ".dann"), side = fs::path(dir) / ("f0_" + h + ".json");
  if (!dir.empty() && fs::exists(ck)) {
    std::ifstream f(side);
    nlohmann::json recorded;
    try {
      if (f) f >> recorded;
    } catch (const nlohmann::json::exception&) {
      recorded = nullptr;
    }
    if (recorded != key) throw IoError("spec hash mismatch against cached artifact " + ck.string());
    return ReconNet(load_checkpoint(ck.string()));
  }
  TrainReport rep;
  ReconNet net = train(rep);
  if (!dir.empty()) {
    fs::create_directories(dir);
    save_checkpoint(ck.string(), net.params());
    std::ofstream(side) << key.dump(2);
    write_training_curve((fs::path(dir) / ("f0_" + h + "_curve.csv")).string(), rep);
  }
  return net;
}

/// The explicit checkpoint when given, else the cached (or freshly trained) f0.
inline ReconNet obtain_f0(const ExperimentSpec& s, const Datasets& d, const RunOptions& o) {
  if (!s.checkpoint.empty()) {
    if (!std::filesystem::exists(s.checkpoint)) throw IoError("checkpoint not found: " + s.checkpoint);
    return ReconNet(load_checkpoint(s.checkpoint));
  }
  return cached_network(training_key(s), resolve_cache_dir(o), [&](TrainReport& rep) { return train_f0(s, d, &rep); });
}

// ---------------------------------------------------------------------------
// Methods

/// Everything a reconstruction method needs besides the measurement.
struct MethodContext {
  const ReconNet* net = nullptr;
  Operator A0, A1;
  Family family;
  std::vector<double> sigma_init;
  AdaptConfig cfg;
  TvSpec tv;
  // calibrated methods: network (and operator) fitted once beforehand
  std::optional<ReconNet> calibrated_net;
  Operator calibrated_op;
};

inline MethodContext make_context(const ExperimentSpec& s, const ReconNet& net) {
  MethodContext c;
  c.net = &net;
  c.A0 = operator_from_json(s.A0, s.image_shape());
  c.A1 = operator_from_json(s.A1, s.image_shape());
  if (!s.family.is_null()) c.family = family_from_json(s.family, c.A0, &c.sigma_init);
  c.cfg = s.adapt;
  c.tv = s.tv;
  return c;
}

inline Family require_family(const MethodContext& c, const std::string& method) {
  if (!c.family) throw std::invalid_argument("method " + method + " needs a 'family' in the spec");
  return c.family;
}

/// Fits the calibrated network for pnp_calib / pnp_blind_calib.
inline void calibrate(MethodContext& c, const std::string& method, const std::vector<Tensor>& ys) {
  if (method == "pnp_calib") {
    const AdaptResult r = pnp_adapt_calibrated(*c.net, c.A1, ys, c.cfg);
    c.calibrated_net = ReconNet(*r.theta1);
    c.calibrated_op = c.A1;
  } else if (method == "pnp_blind_calib") {
    const Family f = require_family(c, method);
    const AdaptResult r = pnp_adapt_calibrated(*c.net, *f, c.sigma_init, ys, c.cfg);
    c.calibrated_net = ReconNet(*r.theta1);
    c.calibrated_op = f->at(*r.sigma_hat);
  }
}

inline Tensor reconstruct(const std::string& method, const MethodContext& c, const Tensor& y) {
  const ReconNet& net = *c.net;
  if (method == "none") return net.forward(*c.A1, y);
  if (method == "adjoint") return c.A1->adjoint(y);
  if (method == "pinv") return pseudo_inverse_apply(*c.A1, y, c.cfg.pinv_iters);
  if (method == "tv") return tv_reconstruct(*c.A1, y, c.tv.weight, c.tv.iters, c.tv.step);
  if (method == "pnp") return pnp_adapt(net, c.A1, y, c.cfg).x_hat;
  if (method == "pnp_blind") return pnp_adapt_blind(net, *require_family(c, method), c.sigma_init, y, c.cfg).x_hat;
  if (method == "pnp_calib" || method == "pnp_blind_calib") {
    if (!c.calibrated_net) throw std::logic_error(method + ": calibrate() was not run");
    return c.calibrated_net->forward(*c.calibrated_op, y);
  }
  if (method == "rnr") return rnr_reconstruct(net, c.A0, c.A1, y, c.cfg).x_hat;
  if (method == "rnr_sigma")
    return rnr_estimate_sigma(net, c.A0, *require_family(c, method), c.sigma_init, y, c.cfg).x_hat;
  if (method == "rnr_plus") return rnr_plus(net, c.A0, c.A1, y, c.cfg).x_hat;
  if (method == "fixed_point") return fixed_point_iterate(net, *c.A0, *c.A1, y, c.cfg);
  throw std::invalid_argument("unknown method '" + method + "'");
}

// ---------------------------------------------------------------------------
// Run records

struct ImageMetrics {
  int index = 0;
  double psnr = 0.0, ssim = 0.0, residual = 0.0;
};

struct Summary {
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
};

/// Mean, sample standard deviation (N - 1), min and max.
inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  double acc = 0.0;
  for (double x : v) acc += x;
  s.mean = acc / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  return s;
}

struct RunRecord {
  std::string name, method, spec_hash, data_hash, version = kToolkitVersion;
  std::vector<ImageMetrics> images;
  Summary psnr, ssim, residual;
  double wall_time = 0.0;
  nlohmann::json chosen;  // grid-search outcome, if any
  std::vector<std::string> notes;

  void finalize() {
    std::vector<double> p, q, r;
    for (const auto& m : images) {
      p.push_back(m.psnr);
      q.push_back(m.ssim);
      r.push_back(m.residual);
    }
    psnr = summarize(p);
    ssim = summarize(q);
    residual = summarize(r);
  }
};

inline nlohmann::json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
}
inline Summary summary_from_json(const nlohmann::json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("min").get<double>(), j.at("max").get<double>()};
}

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& m : r.images)
    imgs.push_back({{"index", m.index}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"residual", m.residual}});
  j = {{"name", r.name},
       {"method", r.method},
       {"spec_hash", r.spec_hash},
       {"data_hash", r.data_hash},
       {"version", r.version},
       {"count", r.images.size()},
       {"psnr", summary_json(r.psnr)},
       {"ssim", summary_json(r.ssim)},
       {"residual", summary_json(r.residual)},
       {"wall_time_s", r.wall_time},
       {"chosen", r.chosen},
       {"notes", r.notes},
       {"images", imgs}};
}

inline void from_json(const nlohmann::json& j, RunRecord& r) {
  r = RunRecord{};
  r.name = j.at("name").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.spec_hash = j.at("spec_hash").get<std::string>();
  r.data_hash = j.at("data_hash").get<std::string>();
  r.version = j.at("version").get<std::string>();
  for (const auto& m : j.at("images"))
    r.images.push_back({m.at("index").get<int>(), m.at("psnr").get<double>(), m.at("ssim").get<double>(),
                        m.at("residual").get<double>()});
  r.psnr = summary_from_json(j.at("psnr"));
  r.ssim = summary_from_json(j.at("ssim"));
  r.residual = summary_from_json(j.at("residual"));
  r.wall_time = j.value("wall_time_s", 0.0);
  r.chosen = j.value("chosen", nlohmann::json());
  r.notes = j.value("notes", std::vector<std::string>{});
}

inline RunRecord load_record(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open run record " + path);
  nlohmann::json j;
  f >> j;
  return j.get<RunRecord>();
}

inline std::string metrics_csv(const RunRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << "index,psnr,ssim,residual\n";
  for (const auto& m : r.images) os << m.index << ',' << m.psnr << ',' << m.ssim << ',' << m.residual << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline

/// Reconstructs every measurement with `method`, in parallel over images.
inline std::vector<Tensor> reconstruct_all(const std::string& method, const MethodContext& c,
                                           const std::vector<Tensor>& ys) {
  std::vector<Tensor> out(ys.size());
  parallel_for(ys.size(), [&](std::size_t i) { out[i] = reconstruct(method, c, ys[i]); });
  return out;
}

inline std::vector<ImageMetrics> score(const std::vector<Tensor>& xh, const std::vector<Tensor>& xs,
                                       const std::vector<Tensor>& ys, const LinearOperator& A1) {
  std::vector<ImageMetrics> m(xh.size());
  parallel_for(xh.size(), [&](std::size_t i) {
    m[i] = {static_cast<int>(i), image_psnr(xh[i], xs[i]), image_ssim(xh[i], xs[i]), norm(A1.apply(xh[i]) - ys[i])};
  });
  return m;
}

inline void set_grid_param(MethodContext& c, const std::string& p, double v) {
  if (p == "lambda")
    c.cfg.lambda = v;
  else if (p == "mu")
    c.cfg.mu = v;
  else if (p == "tau")
    c.cfg.tau = v;
  else if (p == "lr")
    c.cfg.opt.lr = v;
  else if (p == "sigma_lr")
    c.cfg.sigma_opt.lr = v;
  else if (p == "tv_weight")
    c.tv.weight = v;
  else
    throw std::invalid_argument("unknown grid parameter '" + p + "'");
}

/// Picks the grid value with the best mean PSNR on the first val_images
/// validation images measured under A1.
inline double grid_search(MethodContext& c, const ExperimentSpec& s, const GridSpec& g, const Datasets& d,
                          nlohmann::json* log) {
  if (g.values.empty()) throw std::invalid_argument("grid search needs at least one value");
  const int n = std::min<int>(g.val_images, static_cast<int>(d.val.size()));
  if (n < 1) throw std::invalid_argument("grid search needs validation images");
  const std::vector<Tensor> xs(d.val.begin(), d.val.begin() + n);
  const std::vector<Tensor> ys = measure(*c.A1, xs, s.sigma1, s.seed, 0x6121D);
  std::vector<Tensor> calib_ys;
  if (s.method == "pnp_calib" || s.method == "pnp_blind_calib") {
    const std::vector<Tensor> cx(d.calib.begin(), d.calib.begin() + std::min<int>(s.calibration, static_cast<int>(d.calib.size())));
    calib_ys = measure(*c.A1, cx, s.sigma1, s.seed, 0xCA1B);
  }
  double best = -std::numeric_limits<double>::infinity(), best_v = g.values.front();
  nlohmann::json trials = nlohmann::json::array();
  for (double v : g.values) {
    MethodContext t = c;
    set_grid_param(t, g.param, v);
    if (!calib_ys.empty()) calibrate(t, s.method, calib_ys);
    const auto xh = reconstruct_all(s.method, t, ys);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += image_psnr(xh[i], xs[i]);
    const double m = acc / n;
    trials.push_back({{"value", v}, {"val_psnr", m}});
    if (m > best) {
      best = m;
      best_v = v;
    }
  }
  set_grid_param(c, g.param, best_v);
  if (log) *log = {{"param", g.param}, {"value", best_v}, {"val_psnr", best}, {"trials", trials}};
  return best_v;
}

/// Grid search (when configured), calibration, then reconstruction and
/// scoring of the test set under A1, with f0 already in hand.
inline RunRecord evaluate_spec(const ExperimentSpec& s, const ReconNet& net, const Datasets& d,
                               std::vector<Tensor>* recon = nullptr) {
  s.validate();
  if (d.test.empty()) throw std::invalid_argument("empty test set");
  const auto t0 = std::chrono::steady_clock::now();
  MethodContext c = make_context(s, net);
  RunRecord rec;
  rec.name = s.name;
  rec.method = s.method;
  rec.spec_hash = spec_hash(s);
  rec.data_hash = data_hash(s);
  if (s.problem == Problem::mri) rec.notes.push_back("no centre crop applied before scoring");
  if (s.grid) grid_search(c, s, *s.grid, d, &rec.chosen);
  if (s.method == "pnp_calib" || s.method == "pnp_blind_calib") {
    const int n = std::min<int>(s.calibration, static_cast<int>(d.calib.size()));
    if (n < s.calibration) throw std::invalid_argument("calibration set smaller than requested size");
    const std::vector<Tensor> cx(d.calib.begin(), d.calib.begin() + n);
    calibrate(c, s.method, measure(*c.A1, cx, s.sigma1, s.seed, 0xCA1B));
  }
  const std::vector<Tensor> ys = measure(*c.A1, d.test, s.sigma1, s.seed, 0x7E57);
  std::vector<Tensor> xh = reconstruct_all(s.method, c, ys);
  rec.images = score(xh, d.test, ys, *c.A1);
  rec.finalize();
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (recon) *recon = std::move(xh);
  return rec;
}

inline void write_run(const std::string& dir, const ExperimentSpec& s, const RunRecord& rec,
                      const std::vector<Tensor>* recon) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / "runrecord.json") << nlohmann::json(rec).dump(2) << '\n';
  std::ofstream(fs::path(dir) / "metrics.csv") << metrics_csv(rec);
  std::ofstream(fs::path(dir) / "spec.json") << nlohmann::json(s).dump(2) << '\n';
  if (recon) {
    fs::create_directories(fs::path(dir) / "tensors");
    for (std::size_t i = 0; i < recon->size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "xhat_%04zu.dat", i);
      save_tensor((fs::path(dir) / "tensors" / name).string(), (*recon)[i]);
    }
  }
}

/// train-if-needed -> (grid search) -> adapt -> evaluate. Writes
/// runrecord.json, metrics.csv and tensors/ when out_dir is set.
inline RunRecord run_experiment(const ExperimentSpec& s, const RunOptions& o = {}) {
  s.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Datasets d = load_datasets(s);
  const ReconNet net = obtain_f0(s, d, o);
  std::vector<Tensor> xh;
  RunRecord rec = evaluate_spec(s, net, d, &xh);
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.out_dir.empty()) write_run(o.out_dir, s, rec, o.save_tensors ? &xh : nullptr);
  return rec;
}

}  // namespace driftadapt
