#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "driftadapt/harness.hpp"

namespace driftadapt {

/// A titled grid of cells, rendered as aligned text or CSV.
struct Table {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  bool empty() const { return rows.empty(); }
  void add(std::vector<std::string> row) {
    if (row.size() != columns.size()) throw std::invalid_argument("table row has the wrong number of cells");
    rows.push_back(std::move(row));
  }

  std::string text() const {
    std::vector<std::size_t> w(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
      w[c] = columns[c].size();
      for (const auto& r : rows) w[c] = std::max(w[c], r[c].size());
    }
    std::ostringstream os;
    if (!title.empty()) os << title << '\n';
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (c) os << "  ";
        // first column left-aligned, numbers right-aligned
        if (c == 0)
          os << cells[c] << std::string(w[c] - cells[c].size(), ' ');
        else
          os << std::string(w[c] - cells[c].size(), ' ') << cells[c];
      }
      os << '\n';
    };
    line(columns);
    std::size_t total = 0;
    for (auto x : w) total += x;
    os << std::string(total + 2 * (w.empty() ? 0 : w.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (c) os << ',';
        if (cells[c].find_first_of(",\"") != std::string::npos) {
          os << '"';
          for (char ch : cells[c]) os << (ch == '"' ? "\"\"" : std::string(1, ch));
          os << '"';
        } else {
          os << cells[c];
        }
      }
      os << '\n';
    };
    line(columns);
    for (const auto& r : rows) line(r);
    return os.str();
  }

  void write(const std::string& dir, const std::string& stem) const {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "tables");
    std::ofstream(fs::path(dir) / "tables" / (stem + ".txt")) << text();
    std::ofstream(fs::path(dir) / "tables" / (stem + ".csv")) << csv();
  }
};

inline std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Sampling rate

struct RateRow {
  double acceleration = 0.0;
  Summary none, rnr;
};

inline Table rate_table(const std::vector<RateRow>& rows) {
  Table t{"PSNR vs acceleration (network trained at the base rate)",
          {"acceleration", "none_mean", "none_std", "rnr_mean", "rnr_std"},
          {}};
  for (const auto& r : rows) t.add({num(r.acceleration, 1), num(r.none.mean), num(r.none.std), num(r.rnr.mean), num(r.rnr.std)});
  return t;
}

/// A1 for acceleration `a`: the training mask itself at the training rate,
/// otherwise a fresh mask drawn with a rate-specific seed.
inline nlohmann::json mask_at_rate(const nlohmann::json& A0, double a) {
  if (A0.value("kind", std::string()) != "fourier") throw std::invalid_argument("sampling-rate sweep needs a fourier A0");
  if (A0.contains("mask_file")) throw std::invalid_argument("sampling-rate sweep needs a generated mask, not mask_file");
  if (a == A0.value("acceleration", 6.0)) return A0;
  nlohmann::json j = A0;
  j["acceleration"] = a;
  j["seed"] = mix_seed(A0.value("seed", std::uint64_t{0}), static_cast<std::uint64_t>(std::llround(a * 1000)));
  return j;
}

inline std::vector<RateRow> sweep_sampling_rate(const ExperimentSpec& base, const std::vector<double>& accels,
                                                const RunOptions& o = {}) {
  std::vector<RateRow> rows;
  if (accels.empty()) return rows;
  const Datasets d = load_datasets(base);
  const ReconNet net = obtain_f0(base, d, o);
  for (double a : accels) {
    ExperimentSpec s = base;
    s.A1 = mask_at_rate(base.A0, a);
    s.method = "none";
    const RunRecord none = evaluate_spec(s, net, d);
    s.method = "rnr";
    const RunRecord rnr = evaluate_spec(s, net, d);
    rows.push_back({a, none.psnr, rnr.psnr});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Nullspace overlap

struct OverlapRow {
  int swapped = 0;
  Summary none, rnr;  // over per-repeat mean PSNRs
};

inline Table overlap_table(const std::vector<OverlapRow>& rows) {
  Table t{"PSNR vs swapped k-space lines",
          {"n", "none_mean", "none_min", "none_max", "rnr_mean", "rnr_min", "rnr_max"},
          {}};
  for (const auto& r : rows)
    t.add({std::to_string(r.swapped), num(r.none.mean), num(r.none.min), num(r.none.max), num(r.rnr.mean),
           num(r.rnr.min), num(r.rnr.max)});
  return t;
}

inline std::vector<OverlapRow> sweep_nullspace_overlap(const ExperimentSpec& base, const std::vector<int>& n_swapped,
                                                       int repeats, const RunOptions& o = {}) {
  if (repeats < 1) throw std::invalid_argument("nullspace sweep needs repeats >= 1");
  if (base.A0.value("kind", std::string()) != "fourier") throw std::invalid_argument("nullspace sweep needs a fourier A0");
  std::vector<OverlapRow> rows;
  if (n_swapped.empty()) return rows;
  // reject impossible counts before any training
  const KspaceMask m0 = mask_from_spec(base.A0, base.images.size);
  const int limit = static_cast<int>(std::min(swappable_lines(m0).size(),
                                              static_cast<std::size_t>(m0.width) - m0.sampled_lines.size()));
  for (int n : n_swapped)
    if (n < 0 || n > limit)
      throw std::invalid_argument("cannot swap " + std::to_string(n) + " lines; only " + std::to_string(limit) +
                                  " swappable");
  const Datasets d = load_datasets(base);
  const ReconNet net = obtain_f0(base, d, o);
  for (int n : n_swapped) {
    std::vector<double> none, rnr;
    for (int r = 0; r < repeats; ++r) {
      ExperimentSpec s = base;
      s.A1 = base.A0;
      s.A1["swap"] = n;
      s.A1["swap_seed"] = mix_seed(base.seed, static_cast<std::uint64_t>(r));
      s.method = "none";
      none.push_back(evaluate_spec(s, net, d).psnr.mean);
      s.method = "rnr";
      rnr.push_back(evaluate_spec(s, net, d).psnr.mean);
      if (n == 0) break;  // every repeat is the same operator
    }
    rows.push_back({n, summarize(none), summarize(rnr)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Calibration size

struct CalibRow {
  int size = 0;
  Summary known, blind, naive;
};

inline Table calib_table(const std::vector<CalibRow>& rows) {
  Table t{"P&P PSNR vs calibration set size", {"N", "known_mean", "blind_mean", "naive_mean", "known_std", "blind_std"}, {}};
  for (const auto& r : rows)
    t.add({std::to_string(r.size), num(r.known.mean), num(r.blind.mean), num(r.naive.mean), num(r.known.std),
           num(r.blind.std)});
  return t;
}

/// Known-A1 and blind calibrated P&P per size; the blind variant runs only
/// when the spec names a family.
inline std::vector<CalibRow> sweep_calibration_size(const ExperimentSpec& base, const std::vector<int>& sizes,
                                                    const RunOptions& o = {}) {
  std::vector<CalibRow> rows;
  if (sizes.empty()) return rows;
  for (int n : sizes)
    if (n < 1 || n > base.images.calib)
      throw std::invalid_argument("calibration size " + std::to_string(n) + " outside [1, " +
                                  std::to_string(base.images.calib) + "]");
  const Datasets d = load_datasets(base);
  const ReconNet net = obtain_f0(base, d, o);
  ExperimentSpec s = base;
  s.method = "none";
  const Summary naive = evaluate_spec(s, net, d).psnr;
  for (int n : sizes) {
    CalibRow row;
    row.size = n;
    row.naive = naive;
    s.calibration = n;
    s.method = "pnp_calib";
    row.known = evaluate_spec(s, net, d).psnr;
    if (!base.family.is_null()) {
      s.method = "pnp_blind_calib";
      row.blind = evaluate_spec(s, net, d).psnr;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Multi-kernel training

struct KernelRow {
  int count = 0;
  Summary seen, unseen, single_rnr, single_pnp;
};

inline Table kernel_table(const std::vector<KernelRow>& rows) {
  Table t{"PSNR vs number of training kernels",
          {"kernels", "seen_mean", "unseen_mean", "single_rnr_unseen", "single_pnp_unseen"},
          {}};
  for (const auto& r : rows)
    t.add({std::to_string(r.count), num(r.seen.mean), num(r.unseen.mean), num(r.single_rnr.mean),
           num(r.single_pnp.mean)});
  return t;
}

struct KernelBank {
  std::vector<std::vector<double>> seen, unseen;
};

/// Seeded 7x7 directional kernels: `count` for training, `unseen` held out.
inline KernelBank make_kernel_bank(std::uint64_t seed, int count, int unseen, int size = 7) {
  KernelBank b;
  Rng rs(mix_seed(seed, 0xBA4C)), ru(mix_seed(seed, 0x0B5E));
  for (int i = 0; i < count; ++i) b.seen.push_back(random_directional_kernel(size, rs));
  for (int i = 0; i < unseen; ++i) b.unseen.push_back(random_directional_kernel(size, ru));
  return b;
}

inline nlohmann::json blur_json(const std::vector<double>& k) {
  return {{"kind", "blur"}, {"size", static_cast<int>(std::lround(std::sqrt(static_cast<double>(k.size()))))}, {"kernel", k}};
}

/// Per-image PSNR of recon(i, A_i, y_i) with test image i measured by
/// ops[i % ops.size()] (same noise streams as evaluate_spec).
template <typename Recon>
Summary score_round_robin(const ExperimentSpec& s, const Datasets& d, const std::vector<Operator>& ops, Recon&& recon) {
  std::vector<double> p(d.test.size());
  parallel_for(d.test.size(), [&](std::size_t i) {
    const Operator& A = ops[i % ops.size()];
    Rng rng(mix_seed(mix_seed(s.seed, 0x7E57), i));
    const Tensor y = add_noise(A->apply(d.test[i]), s.sigma1, rng);
    p[i] = image_psnr(recon(A, y), d.test[i]);
  });
  return summarize(p);
}

/// One network per kernel count, trained on the first `count` bank kernels
/// round-robin; the count-1 network is the single-model pipeline with A0 the
/// first bank kernel, and is also adapted (R&R, P&P) to the unseen kernels.
inline std::vector<KernelRow> multi_kernel_training(const ExperimentSpec& base, const std::vector<int>& counts,
                                                    int unseen = 4, const RunOptions& o = {}) {
  std::vector<KernelRow> rows;
  if (counts.empty()) return rows;
  if (base.complex_images()) throw std::invalid_argument("multi-kernel training is a deblurring protocol");
  if (unseen < 1) throw std::invalid_argument("need at least one unseen kernel");
  for (int c : counts)
    if (c < 1) throw std::invalid_argument("kernel counts must be >= 1");
  const int cmax = *std::max_element(counts.begin(), counts.end());
  const KernelBank bank = make_kernel_bank(base.seed, cmax, unseen);
  const Datasets d = load_datasets(base);
  auto ops_of = [](const std::vector<std::vector<double>>& ks, int n) {
    std::vector<Operator> ops;
    for (int i = 0; i < n; ++i) ops.push_back(make_blur(7, ks[i]));
    return ops;
  };
  const std::vector<Operator> unseen_ops = ops_of(bank.unseen, unseen);

  auto network_for = [&](int c) {
    ExperimentSpec s = base;
    s.checkpoint.clear();
    if (c == 1) {
      s.A0 = blur_json(bank.seen[0]);
      return obtain_f0(s, d, o);
    }
    nlohmann::json key = training_key(s);
    key["A0"] = {{"kind", "bank"}, {"kernels", bank.seen}, {"count", c}};
    return cached_network(key, resolve_cache_dir(o), [&](TrainReport& rep) {
      Rng rng(s.train.init_seed);
      ReconNet net(NetworkParams::init(NetworkArch::for_dtype(DType::real, s.train.hidden, s.train.hidden_layers), rng));
      TrainConfig cfg = s.train.cfg;
      cfg.noise_sigma = s.sigma0;
      rep = train_supervised(net, ops_of(bank.seen, c), d.train, d.val, cfg);
      return net;
    });
  };

  const ReconNet single = network_for(1);
  const Operator A0 = make_blur(7, bank.seen[0]);
  const Summary s_rnr = score_round_robin(base, d, unseen_ops, [&](const Operator& A, const Tensor& y) {
    return rnr_reconstruct(single, A0, A, y, base.adapt).x_hat;
  });
  const Summary s_pnp = score_round_robin(base, d, unseen_ops, [&](const Operator& A, const Tensor& y) {
    return pnp_adapt(single, A, y, base.adapt).x_hat;
  });
  for (int c : counts) {
    const ReconNet net = c == 1 ? single : network_for(c);
    auto direct = [&](const Operator& A, const Tensor& y) { return net.forward(*A, y); };
    KernelRow row;
    row.count = c;
    row.seen = score_round_robin(base, d, ops_of(bank.seen, c), direct);
    row.unseen = score_round_robin(base, d, unseen_ops, direct);
    row.single_rnr = s_rnr;
    row.single_pnp = s_pnp;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report

/// One row per record. Records must share data hash and toolkit version.
inline Table report_table(const std::vector<RunRecord>& recs) {
  Table t{"", {"name", "method", "N", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "residual_mean", "notes"}, {}};
  if (recs.empty()) return t;
  for (const auto& r : recs) {
    if (r.version != recs.front().version)
      throw std::invalid_argument("run " + r.name + " has version '" + r.version + "', expected '" +
                                  recs.front().version + "'");
    if (r.data_hash != recs.front().data_hash)
      throw std::invalid_argument("run " + r.name + " was evaluated on a different problem instance (data hash " +
                                  r.data_hash + " vs " + recs.front().data_hash + ")");
  }
  t.title = "data " + recs.front().data_hash + ", " + recs.front().version;
  for (const auto& r : recs) {
    std::string notes;
    for (const auto& n : r.notes) notes += (notes.empty() ? "" : "; ") + n;
    t.add({r.name, r.method, std::to_string(r.images.size()), num(r.psnr.mean), num(r.psnr.std), num(r.ssim.mean),
           num(r.ssim.std), num(r.residual.mean, 6), notes});
  }
  return t;
}

}  // namespace driftadapt
