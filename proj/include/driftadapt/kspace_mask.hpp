#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "driftadapt/errors.hpp"
#include "driftadapt/random.hpp"

namespace driftadapt {

/// Cartesian phase-encode sampling pattern. Line indices are centred
/// (fftshifted) column indices in [0, W); index W/2 is the DC column.
struct KspaceMask {
  int width = 0;
  double acceleration = 1.0;
  double center_fraction = 0.04;
  std::uint64_t seed = 0;
  double density_sigma = 0.0;  // std of the Gaussian line density, in columns
  std::vector<int> sampled_lines;
  std::vector<double> line_offsets;  // one per sampled line

  int center_count() const {
    return std::max(1, static_cast<int>(std::ceil(center_fraction * width - 1e-12)));
  }
  int center_begin() const { return width / 2 - center_count() / 2; }
  bool is_center(int line) const {
    return line >= center_begin() && line < center_begin() + center_count();
  }
  /// Frequency (in DFT cycles across the width) sampled by line l.
  double frequency(std::size_t l) const {
    return (sampled_lines[l] - width / 2) + line_offsets[l];
  }

  void validate() const {
    if (width < 1) throw std::invalid_argument("k-space mask width must be positive");
    if (line_offsets.size() != sampled_lines.size())
      throw std::invalid_argument("k-space mask needs one offset per sampled line");
    std::set<int> seen;
    for (int l : sampled_lines) {
      if (l < 0 || l >= width) throw std::invalid_argument("k-space line index out of range");
      if (!seen.insert(l).second) throw std::invalid_argument("duplicate k-space line " + std::to_string(l));
    }
    if (!std::is_sorted(sampled_lines.begin(), sampled_lines.end()))
      throw std::invalid_argument("k-space lines must be sorted");
  }
};

/// Centre ceil(center_fraction * W) lines plus lines drawn without
/// replacement from a Gaussian density (sigma = W/6) around the centre,
/// for round(W / acceleration) lines in total.
inline KspaceMask make_kspace_mask(int width, double acceleration, double center_fraction = 0.04,
                                   std::uint64_t seed = 0) {
  if (width < 2) throw std::invalid_argument("mask width must be >= 2");
  if (!(acceleration >= 1.0)) throw std::invalid_argument("acceleration must be >= 1");
  KspaceMask m;
  m.width = width;
  m.acceleration = acceleration;
  m.center_fraction = center_fraction;
  m.seed = seed;
  m.density_sigma = width / 6.0;

  std::set<int> lines;
  for (int i = 0; i < m.center_count(); ++i) lines.insert(m.center_begin() + i);
  const int target = std::max(static_cast<int>(lines.size()),
                              std::min(width, static_cast<int>(std::lround(width / acceleration))));
  std::vector<int> pool;
  std::vector<double> weight;
  for (int c = 0; c < width; ++c) {
    if (lines.count(c)) continue;
    const double d = c - width / 2;
    pool.push_back(c);
    weight.push_back(std::exp(-d * d / (2.0 * m.density_sigma * m.density_sigma)));
  }
  Rng rng(seed);
  while (static_cast<int>(lines.size()) < target && !pool.empty()) {
    double total = 0.0;
    for (double w : weight) total += w;
    double u = rng.uniform() * total;
    std::size_t pick = pool.size() - 1;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      u -= weight[i];
      if (u < 0.0) {
        pick = i;
        break;
      }
    }
    lines.insert(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    weight.erase(weight.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  m.sampled_lines.assign(lines.begin(), lines.end());
  m.line_offsets.assign(m.sampled_lines.size(), 0.0);
  return m;
}

/// All W lines (used to check unitarity and as the 1x pattern).
inline KspaceMask full_kspace_mask(int width) {
  KspaceMask m;
  m.width = width;
  m.acceleration = 1.0;
  m.density_sigma = width / 6.0;
  for (int c = 0; c < width; ++c) m.sampled_lines.push_back(c);
  m.line_offsets.assign(width, 0.0);
  return m;
}

/// Non-centre lines perturbed by U(-max_offset, max_offset); centre lines untouched.
inline KspaceMask perturb_line_offsets(KspaceMask m, double max_offset, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l < m.sampled_lines.size(); ++l)
    m.line_offsets[l] = m.is_center(m.sampled_lines[l]) ? 0.0 : rng.uniform(-max_offset, max_offset);
  return m;
}

/// Lines eligible for swapping: sampled, outside the centre block.
inline std::vector<int> swappable_lines(const KspaceMask& m) {
  std::vector<int> out;
  for (int l : m.sampled_lines)
    if (!m.is_center(l)) out.push_back(l);
  return out;
}

/// Replaces n sampled non-centre lines with n lines that were not sampled,
/// both chosen uniformly at random. The result has exactly n lines outside
/// the original pattern.
inline KspaceMask swap_lines(const KspaceMask& m, int n, std::uint64_t seed) {
  std::vector<int> sampled = swappable_lines(m);
  std::vector<int> unsampled;
  {
    std::set<int> s(m.sampled_lines.begin(), m.sampled_lines.end());
    for (int c = 0; c < m.width; ++c)
      if (!s.count(c) && !m.is_center(c)) unsampled.push_back(c);
  }
  if (n < 0 || n > static_cast<int>(sampled.size()) || n > static_cast<int>(unsampled.size()))
    throw std::invalid_argument("cannot swap " + std::to_string(n) + " lines; only " +
                                std::to_string(std::min(sampled.size(), unsampled.size())) +
                                " swappable");
  Rng rng(seed);
  std::set<int> lines(m.sampled_lines.begin(), m.sampled_lines.end());
  for (int i = 0; i < n; ++i) {
    const auto out_idx = rng.below(sampled.size());
    const auto in_idx = rng.below(unsampled.size());
    lines.erase(sampled[out_idx]);
    lines.insert(unsampled[in_idx]);
    sampled.erase(sampled.begin() + static_cast<std::ptrdiff_t>(out_idx));
    unsampled.erase(unsampled.begin() + static_cast<std::ptrdiff_t>(in_idx));
  }
  KspaceMask r = m;
  r.sampled_lines.assign(lines.begin(), lines.end());
  r.line_offsets.assign(r.sampled_lines.size(), 0.0);
  return r;
}

inline nlohmann::json to_json(const KspaceMask& m) {
  return {{"width", m.width},
          {"acceleration", m.acceleration},
          {"center_fraction", m.center_fraction},
          {"seed", m.seed},
          {"density_sigma", m.density_sigma},
          {"sampled_lines", m.sampled_lines},
          {"line_offsets", m.line_offsets}};
}

/// Regenerates the pattern from (width, acceleration, center_fraction, seed)
/// and checks it against any stored line list.
inline KspaceMask mask_from_json(const nlohmann::json& j) {
  KspaceMask m = make_kspace_mask(j.at("width").get<int>(), j.at("acceleration").get<double>(),
                                  j.value("center_fraction", 0.04), j.value("seed", std::uint64_t{0}));
  if (j.contains("sampled_lines")) {
    const auto stored = j.at("sampled_lines").get<std::vector<int>>();
    if (stored != m.sampled_lines) {
      // Explicit line lists (e.g. swapped patterns) take precedence over regeneration.
      m.sampled_lines = stored;
      m.line_offsets.assign(stored.size(), 0.0);
    }
  }
  if (j.contains("line_offsets")) {
    m.line_offsets = j.at("line_offsets").get<std::vector<double>>();
  }
  m.validate();
  return m;
}

inline void save_mask(const std::string& path, const KspaceMask& m) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << to_json(m).dump(2) << "\n";
}

inline KspaceMask load_mask(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  return mask_from_json(nlohmann::json::parse(f));
}

}  // namespace driftadapt
