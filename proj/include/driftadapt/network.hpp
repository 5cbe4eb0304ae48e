#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "driftadapt/errors.hpp"
#include "driftadapt/linops.hpp"
#include "driftadapt/random.hpp"
#include "driftadapt/tensor.hpp"
#include "driftadapt/tensor_io.hpp"

namespace driftadapt {

/// Channel widths of the residual CNN, input first. Every layer is a 3x3
/// periodic convolution with bias; ReLU sits between layers. The first and
/// last widths must match so the output can be added to the input.
struct NetworkArch {
  std::vector<int> widths{1, 16, 16, 16, 1};

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int channels() const { return widths.front(); }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("network needs at least one layer");
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("network widths must be positive");
    if (widths.front() != widths.back())
      throw std::invalid_argument("residual network needs equal input and output widths");
  }

  static NetworkArch for_dtype(DType dt, int hidden = 16, int hidden_layers = 3) {
    const int c = dt == DType::complex ? 2 : 1;
    NetworkArch a;
    a.widths.assign(1, c);
    for (int i = 0; i < hidden_layers; ++i) a.widths.push_back(hidden);
    a.widths.push_back(c);
    return a;
  }

  bool operator==(const NetworkArch&) const = default;
};

struct LayoutEntry {
  std::string kind;  // "conv3x3" (out, in, 3, 3) or "bias" (out)
  std::vector<int> shape;

  std::size_t size() const {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
};

inline std::vector<LayoutEntry> network_layout(const NetworkArch& arch) {
  std::vector<LayoutEntry> out;
  for (int l = 0; l < arch.layers(); ++l) {
    out.push_back({"conv3x3", {arch.widths[l + 1], arch.widths[l], 3, 3}});
    out.push_back({"bias", {arch.widths[l + 1]}});
  }
  return out;
}

inline std::string layout_string(const std::vector<LayoutEntry>& layout) {
  std::string s;
  for (const auto& e : layout) {
    s += e.kind + ":";
    for (std::size_t i = 0; i < e.shape.size(); ++i) s += (i ? "x" : "") + std::to_string(e.shape[i]);
    s += ";";
  }
  return s;
}

/// FNV-1a over the canonical layout string.
inline std::uint64_t layout_hash(const NetworkArch& arch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : layout_string(network_layout(arch))) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct NetworkParams {
  NetworkArch arch;
  std::vector<double> theta;

  std::vector<LayoutEntry> layout() const { return network_layout(arch); }

  static std::size_t count_for(const NetworkArch& arch) {
    std::size_t n = 0;
    for (const auto& e : network_layout(arch)) n += e.size();
    return n;
  }

  static NetworkParams zeros(const NetworkArch& arch) {
    arch.validate();
    return {arch, std::vector<double>(count_for(arch), 0.0)};
  }

  /// He-uniform kernels scaled by 0.1 (a near-identity start), zero biases.
  static NetworkParams init(const NetworkArch& arch, Rng& rng) {
    NetworkParams p = zeros(arch);
    std::size_t off = 0;
    for (const auto& e : p.layout()) {
      if (e.kind == "conv3x3") {
        const double bound = 0.1 * std::sqrt(6.0 / (e.shape[1] * 9.0));
        for (std::size_t i = 0; i < e.size(); ++i) p.theta[off + i] = rng.uniform(-bound, bound);
      }
      off += e.size();
    }
    return p;
  }

  void check() const {
    arch.validate();
    if (theta.size() != count_for(arch))
      throw ShapeError("parameter vector has " + std::to_string(theta.size()) + " entries, layout needs " +
                       std::to_string(count_for(arch)));
  }
};

namespace detail {

// Copies an h x w plane into an (h+2) x (w+2) buffer with a one-pixel
// periodic border.
inline void pad_periodic(const double* src, int h, int w, double* dst) {
  const int pw = w + 2;
  for (int y = -1; y <= h; ++y) {
    const double* row = src + static_cast<std::ptrdiff_t>((y + h) % h) * w;
    double* d = dst + static_cast<std::ptrdiff_t>(y + 1) * pw;
    d[0] = row[w - 1];
    std::memcpy(d + 1, row, sizeof(double) * w);
    d[w + 1] = row[0];
  }
}

// out[o](y,x) = b[o] + sum_{i,ky,kx} W[o,i,ky,kx] in[i](y+ky-1, x+kx-1), periodic.
inline void conv3x3_forward(const double* in, int cin, int h, int w, const double* W, const double* b, int cout,
                            double* out, std::vector<double>& scratch) {
  const int pw = w + 2;
  const std::size_t pp = static_cast<std::size_t>(h + 2) * pw;
  const std::size_t px = static_cast<std::size_t>(h) * w;
  scratch.resize(pp * cin);
  for (int i = 0; i < cin; ++i) pad_periodic(in + i * px, h, w, scratch.data() + i * pp);
  for (int o = 0; o < cout; ++o) {
    double* dst = out + o * px;
    for (std::size_t k = 0; k < px; ++k) dst[k] = b[o];
    for (int i = 0; i < cin; ++i) {
      const double* src = scratch.data() + i * pp;
      const double* wk = W + (static_cast<std::size_t>(o) * cin + i) * 9;
      const double k0 = wk[0], k1 = wk[1], k2 = wk[2], k3 = wk[3], k4 = wk[4], k5 = wk[5], k6 = wk[6], k7 = wk[7],
                   k8 = wk[8];
      for (int y = 0; y < h; ++y) {
        double* d = dst + static_cast<std::ptrdiff_t>(y) * w;
        const double* s0 = src + static_cast<std::ptrdiff_t>(y) * pw;
        const double* s1 = s0 + pw;
        const double* s2 = s1 + pw;
        for (int x = 0; x < w; ++x)
          d[x] += (k0 * s0[x] + k1 * s0[x + 1] + k2 * s0[x + 2]) + (k3 * s1[x] + k4 * s1[x + 1] + k5 * s1[x + 2]) +
                  (k6 * s2[x] + k7 * s2[x + 1] + k8 * s2[x + 2]);
      }
    }
  }
}

// Accumulates dW, db and (if gin != nullptr) writes dIn for the layer above.
inline void conv3x3_backward(const double* in, int cin, int h, int w, const double* W, int cout, const double* gout,
                             double* gW, double* gb, double* gin, std::vector<double>& scratch) {
  const int pw = w + 2;
  const std::size_t pp = static_cast<std::size_t>(h + 2) * pw;
  const std::size_t px = static_cast<std::size_t>(h) * w;
  scratch.resize(pp * (cin + cout));
  double* in_pad = scratch.data();
  double* g_pad = scratch.data() + pp * cin;
  for (int i = 0; i < cin; ++i) pad_periodic(in + i * px, h, w, in_pad + i * pp);
  for (int o = 0; o < cout; ++o) pad_periodic(gout + o * px, h, w, g_pad + o * pp);
  std::vector<double> col(static_cast<std::size_t>(w));
  for (int o = 0; o < cout; ++o) {
    const double* g = gout + o * px;
    double sb = 0.0;
    for (std::size_t k = 0; k < px; ++k) sb += g[k];
    gb[o] += sb;
    for (int i = 0; i < cin; ++i) {
      const double* src = in_pad + i * pp;
      double* gw = gW + (static_cast<std::size_t>(o) * cin + i) * 9;
      // column-wise partial sums keep the inner loop vectorizable
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          std::fill(col.begin(), col.end(), 0.0);
          for (int y = 0; y < h; ++y) {
            const double* s = src + static_cast<std::ptrdiff_t>(y + ky) * pw + kx;
            const double* gg = g + static_cast<std::ptrdiff_t>(y) * w;
            for (int x = 0; x < w; ++x) col[x] += gg[x] * s[x];
          }
          double acc = 0.0;
          for (int x = 0; x < w; ++x) acc += col[x];
          gw[ky * 3 + kx] += acc;
        }
    }
  }
  if (!gin) return;
  // dIn[i](y,x) = sum_{o,ky,kx} W[o,i,ky,kx] gout[o](y-ky+1, x-kx+1)
  for (int i = 0; i < cin; ++i) {
    double* dst = gin + i * px;
    for (std::size_t k = 0; k < px; ++k) dst[k] = 0.0;
    for (int o = 0; o < cout; ++o) {
      const double* src = g_pad + o * pp;
      const double* wk = W + (static_cast<std::size_t>(o) * cin + i) * 9;
      const double k0 = wk[0], k1 = wk[1], k2 = wk[2], k3 = wk[3], k4 = wk[4], k5 = wk[5], k6 = wk[6], k7 = wk[7],
                   k8 = wk[8];
      for (int y = 0; y < h; ++y) {
        double* d = dst + static_cast<std::ptrdiff_t>(y) * w;
        const double* s2 = src + static_cast<std::ptrdiff_t>(y) * pw;  // row for ky = 2
        const double* s1 = s2 + pw;
        const double* s0 = s1 + pw;
        for (int x = 0; x < w; ++x)
          d[x] += (k0 * s0[x + 2] + k1 * s0[x + 1] + k2 * s0[x]) + (k3 * s1[x + 2] + k4 * s1[x + 1] + k5 * s1[x]) +
                  (k6 * s2[x + 2] + k7 * s2[x + 1] + k8 * s2[x]);
      }
    }
  }
}

}  // namespace detail

/// Activations kept by a forward pass for the matching backward pass.
struct NetCache {
  std::vector<Tensor> acts;  // acts[0] is the channel-form input, then post-ReLU activations
  bool complex_input = false;
};

struct NetGrads {
  std::vector<double> theta;
  Tensor y;
  std::vector<double> sigma;
};

/// f(y; theta, A) = u + cnn_theta(u) with u = A^H y. Complex images enter
/// the CNN as (re, im) channel pairs.
class ReconNet {
 public:
  ReconNet() : ReconNet(NetworkParams::zeros(NetworkArch{})) {}
  explicit ReconNet(NetworkParams p) : params_(std::move(p)) { params_.check(); }

  const NetworkParams& params() const { return params_; }
  const NetworkArch& arch() const { return params_.arch; }
  const std::vector<double>& theta() const { return params_.theta; }
  void set_theta(std::vector<double> t) {
    if (t.size() != params_.theta.size()) throw ShapeError("set_theta: length mismatch");
    params_.theta = std::move(t);
  }
  std::size_t num_params() const { return params_.theta.size(); }

  /// u + cnn(u) on an image; records activations when cache is given.
  Tensor apply_image(const Tensor& u, NetCache* cache = nullptr) const {
    const bool cx = u.is_complex();
    Tensor a = cx ? complex_to_channels(u) : u;
    if (a.channels() != arch().channels())
      throw ShapeError("network expects " + std::to_string(arch().channels()) + " channels, got " + a.shape().str());
    const int h = a.height(), w = a.width();
    if (cache) {
      cache->acts.clear();
      cache->complex_input = cx;
      cache->acts.push_back(a);
    }
    const Tensor input = a;
    std::vector<double> scratch;
    std::size_t off = 0;
    for (int l = 0; l < arch().layers(); ++l) {
      const int cin = arch().widths[l], cout = arch().widths[l + 1];
      const double* W = params_.theta.data() + off;
      const double* b = W + static_cast<std::size_t>(cout) * cin * 9;
      off += static_cast<std::size_t>(cout) * cin * 9 + cout;
      Tensor z({cout, h, w});
      detail::conv3x3_forward(a.data(), cin, h, w, W, b, cout, z.data(), scratch);
      if (l + 1 < arch().layers()) {
        for (double& v : z.raw()) v = v > 0.0 ? v : 0.0;
        if (cache) cache->acts.push_back(z);
      }
      a = std::move(z);
    }
    a += input;
    return cx ? channels_to_complex(a) : a;
  }

  /// Reverse pass of apply_image: adds d<cot, out>/dtheta into grad_theta and
  /// returns d<cot, out>/du.
  Tensor backward_image(const NetCache& cache, const Tensor& cot, std::span<double> grad_theta) const {
    if (grad_theta.size() != num_params()) throw ShapeError("backward: gradient buffer length mismatch");
    if (cache.acts.empty()) throw std::logic_error("backward: empty forward cache");
    if (cot.is_complex() != cache.complex_input) throw DTypeError("backward: cotangent dtype mismatch");
    Tensor g = cache.complex_input ? complex_to_channels(cot) : cot;
    if (g.shape() != cache.acts[0].shape()) throw ShapeError("backward: cotangent shape mismatch");
    const Tensor skip = g;
    const int h = g.height(), w = g.width();
    std::vector<std::size_t> offs;
    std::size_t off = 0;
    for (int l = 0; l < arch().layers(); ++l) {
      offs.push_back(off);
      off += static_cast<std::size_t>(arch().widths[l + 1]) * arch().widths[l] * 9 + arch().widths[l + 1];
    }
    std::vector<double> scratch;
    for (int l = arch().layers() - 1; l >= 0; --l) {
      const int cin = arch().widths[l], cout = arch().widths[l + 1];
      const double* W = params_.theta.data() + offs[l];
      double* gW = grad_theta.data() + offs[l];
      double* gb = gW + static_cast<std::size_t>(cout) * cin * 9;
      const Tensor& in = cache.acts[l];
      Tensor gin({cin, h, w});
      detail::conv3x3_backward(in.data(), cin, h, w, W, cout, g.data(), gW, gb, gin.data(), scratch);
      if (l > 0) {
        const double* act = in.data();
        double* gi = gin.data();
        for (std::size_t k = 0; k < gin.scalar_count(); ++k)
          if (!(act[k] > 0.0)) gi[k] = 0.0;
      }
      g = std::move(gin);
    }
    g += skip;
    return cache.complex_input ? channels_to_complex(g) : g;
  }

  Tensor forward(const LinearOperator& A, const Tensor& y, NetCache* cache = nullptr) const {
    if (y.dtype() != A.out_dtype()) throw DTypeError("forward: measurement dtype does not match operator");
    return apply_image(A.adjoint(y), cache);
  }

  /// Gradients of <cot, forward(A, y)> with respect to theta, y and sigma(A).
  NetGrads backward(const LinearOperator& A, const Tensor& y, const Tensor& cot) const {
    NetCache cache;
    const Tensor out = forward(A, y, &cache);
    if (cot.shape() != out.shape() || cot.dtype() != out.dtype()) throw ShapeError("backward: cotangent shape");
    NetGrads g;
    g.theta.assign(num_params(), 0.0);
    const Tensor gu = backward_image(cache, cot, g.theta);
    g.y = A.apply(gu);
    if (A.num_params() > 0) g.sigma = A.sigma_vjp(gu, y);
    return g;
  }

  /// g(x) = f(A0 x; theta, A0).
  Tensor autoencode(const LinearOperator& A0, const Tensor& x) const { return forward(A0, A0.apply(x)); }

 private:
  NetworkParams params_;
};

inline Tensor forward(const ReconNet& net, const LinearOperator& A, const Tensor& y) { return net.forward(A, y); }
inline NetGrads backward(const ReconNet& net, const LinearOperator& A, const Tensor& y, const Tensor& cot) {
  return net.backward(A, y, cot);
}
inline Tensor autoencode(const ReconNet& net, const LinearOperator& A0, const Tensor& x) {
  return net.autoencode(A0, x);
}

// Checkpoint: "DANN" | u32 LE header length | JSON header | f64 LE theta.
inline std::vector<std::uint8_t> encode_checkpoint(const NetworkParams& p) {
  p.check();
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& e : p.layout()) layout.push_back({{"kind", e.kind}, {"shape", e.shape}});
  std::ostringstream hash;
  hash << std::hex << layout_hash(p.arch);
  const nlohmann::json header = {{"format", 1},
                                 {"arch", {{"widths", p.arch.widths}}},
                                 {"layout", layout},
                                 {"layout_hash", hash.str()},
                                 {"count", p.theta.size()}};
  const std::string hs = header.dump();
  std::vector<std::uint8_t> buf(8 + hs.size() + p.theta.size() * sizeof(double));
  std::memcpy(buf.data(), "DANN", 4);
  detail::put_u32(buf.data() + 4, static_cast<std::uint32_t>(hs.size()));
  std::memcpy(buf.data() + 8, hs.data(), hs.size());
  std::memcpy(buf.data() + 8 + hs.size(), p.theta.data(), p.theta.size() * sizeof(double));
  return buf;
}

inline NetworkParams decode_checkpoint(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 8 || std::memcmp(buf.data(), "DANN", 4) != 0) throw IoError("not a network checkpoint");
  const std::uint32_t hl = detail::get_u32(buf.data() + 4);
  if (buf.size() < 8 + static_cast<std::size_t>(hl)) throw IoError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 8, buf.begin() + 8 + hl);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }
  NetworkParams p;
  p.arch.widths = header.at("arch").at("widths").get<std::vector<int>>();
  p.arch.validate();
  std::ostringstream hash;
  hash << std::hex << layout_hash(p.arch);
  if (header.value("layout_hash", std::string()) != hash.str())
    throw IoError("checkpoint layout hash mismatch (expected " + hash.str() + ")");
  const std::size_t n = header.at("count").get<std::size_t>();
  if (n != NetworkParams::count_for(p.arch)) throw IoError("checkpoint parameter count disagrees with layout");
  if (buf.size() != 8 + hl + n * sizeof(double)) throw IoError("checkpoint payload size mismatch");
  p.theta.resize(n);
  std::memcpy(p.theta.data(), buf.data() + 8 + hl, n * sizeof(double));
  return p;
}

inline void save_checkpoint(const std::string& path, const NetworkParams& p) {
  const auto buf = encode_checkpoint(p);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline NetworkParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace driftadapt
