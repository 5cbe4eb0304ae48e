#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "driftadapt/tensor.hpp"

namespace driftadapt {

// DAT1 layout: "DAT1" | dtype u8 | channels u8 | height u32 LE | width u32 LE | 2 pad bytes,
// followed by little-endian f64 scalars, channel-major then row-major (complex interleaved).
inline constexpr std::size_t kDatHeaderBytes = 16;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need byte swapping");

inline void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  const Shape s = t.shape();
  if (s.channels > 255) throw ShapeError("DAT1 supports at most 255 channels");
  std::vector<std::uint8_t> buf(kDatHeaderBytes + t.scalar_count() * sizeof(double), 0);
  std::memcpy(buf.data(), "DAT1", 4);
  buf[4] = static_cast<std::uint8_t>(t.dtype());
  buf[5] = static_cast<std::uint8_t>(s.channels);
  detail::put_u32(buf.data() + 6, static_cast<std::uint32_t>(s.height));
  detail::put_u32(buf.data() + 10, static_cast<std::uint32_t>(s.width));
  std::memcpy(buf.data() + kDatHeaderBytes, t.data(), t.scalar_count() * sizeof(double));
  return buf;
}

inline Tensor decode_tensor(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < kDatHeaderBytes || std::memcmp(buf.data(), "DAT1", 4) != 0)
    throw IoError("not a DAT1 tensor stream");
  if (buf[4] > 1) throw IoError("unknown DAT1 dtype code " + std::to_string(buf[4]));
  const auto dtype = static_cast<DType>(buf[4]);
  const Shape s{buf[5], static_cast<int>(detail::get_u32(buf.data() + 6)),
                static_cast<int>(detail::get_u32(buf.data() + 10))};
  const std::size_t n = s.elements() * (dtype == DType::complex ? 2 : 1);
  if (buf.size() != kDatHeaderBytes + n * sizeof(double))
    throw IoError("DAT1 payload size does not match header " + s.str());
  std::vector<double> data(n);
  std::memcpy(data.data(), buf.data() + kDatHeaderBytes, n * sizeof(double));
  return Tensor(s, dtype, std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  const auto buf = encode_tensor(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(buf);
}

/// Writes 1-channel tensors as binary PGM and 3-channel tensors as PPM.
/// Values are clamped to [0, 1]; complex tensors are written by magnitude.
inline void save_pnm(const std::string& path, const Tensor& t_in) {
  const Tensor t = magnitude(t_in);
  const Shape s = t.shape();
  if (s.channels != 1 && s.channels != 3) throw ShapeError("PNM export needs 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << (s.channels == 1 ? "P5" : "P6") << "\n" << s.width << " " << s.height << "\n255\n";
  std::vector<std::uint8_t> px(s.elements());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < s.channels; ++c) {
        const double v = std::clamp(t(c, y, x), 0.0, 1.0);
        px[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

/// Reads binary PGM (P5) or PPM (P6) with maxval <= 255, scaled to [0, 1].
inline Tensor load_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6") throw IoError(path + ": unsupported PNM type " + magic);
  auto next_int = [&]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string line;
      std::getline(f, line);
      f >> std::ws;
    }
    int v = 0;
    f >> v;
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  f.get();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw IoError(path + ": bad PNM header");
  const int c = magic == "P5" ? 1 : 3;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * c);
  f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw IoError(path + ": truncated PNM payload");
  Tensor t({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        t(k, y, x) = px[(static_cast<std::size_t>(y) * w + x) * c + k] / static_cast<double>(maxval);
  return t;
}

}  // namespace driftadapt
