#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "lensveil/tensor.hpp"

namespace lensveil::io {

using Image3 = std::array<Tensor, 3>;

inline void check_stream(const std::ios& s, const std::string& path) {
  if (!s.good()) throw std::runtime_error("i/o failure on " + path);
}

inline std::uint8_t to_byte(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}

// 8-bit binary PPM; channels clamped to [0, 1].
inline void write_ppm(const std::string& path, const Image3& img) {
  const std::size_t h = img[0].shape[0], w = img[0].shape[1];
  std::ofstream f(path, std::ios::binary);
  check_stream(f, path);
  f << "P6\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (const Tensor& ch : img) f.put(static_cast<char>(to_byte(ch.re[i])));
  check_stream(f, path);
}

inline Image3 read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check_stream(f, path);
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("unsupported ppm: " + path);
  f.get();
  Image3 img{Tensor::zeros({h, w}), Tensor::zeros({h, w}), Tensor::zeros({h, w})};
  for (std::size_t i = 0; i < h * w; ++i)
    for (Tensor& ch : img) ch.re[i] = static_cast<std::uint8_t>(f.get()) / 255.0;
  check_stream(f, path);
  return img;
}

// 8-bit PGM scaled so the tensor max maps to 255 (display use).
inline void write_pgm8_scaled(const std::string& path, const Tensor& t) {
  double mx = 0.0;
  for (double v : t.re) mx = std::max(mx, v);
  if (mx <= 0.0) mx = 1.0;
  std::ofstream f(path, std::ios::binary);
  check_stream(f, path);
  f << "P5\n" << t.shape[1] << " " << t.shape[0] << "\n255\n";
  for (double v : t.re) f.put(static_cast<char>(to_byte(v / mx)));
  check_stream(f, path);
}

// 16-bit PGM (big-endian samples per the netpbm spec) with linear scaling;
// the recorded min/max land in a sidecar so values can be reconstructed.
inline void write_pgm16_with_sidecar(const std::string& path, const Tensor& t) {
  double lo = t.re.empty() ? 0.0 : t.re[0], hi = lo;
  for (double v : t.re) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream f(path, std::ios::binary);
  check_stream(f, path);
  f << "P5\n" << t.shape[1] << " " << t.shape[0] << "\n65535\n";
  for (double v : t.re) {
    const auto q = static_cast<std::uint16_t>((v - lo) / span * 65535.0 + 0.5);
    f.put(static_cast<char>(q >> 8));
    f.put(static_cast<char>(q & 0xff));
  }
  check_stream(f, path);
  std::ofstream side(path + ".minmax.txt");
  check_stream(side, path);
  side.precision(17);
  side << "min " << lo << "\nmax " << hi << "\n";
}

// Raw float64 dump: one text header line, then little-endian row-major
// doubles, channel-interleaved plane by plane.
inline void write_raw(const std::string& path, const std::vector<const Tensor*>& channels) {
  require(!channels.empty(), "raw dump needs at least one channel");
  const std::size_t h = channels[0]->shape[0], w = channels[0]->shape[1];
  std::ofstream f(path, std::ios::binary);
  check_stream(f, path);
  f << "P-RAW " << w << " " << h << " " << channels.size() << "\n";
  for (const Tensor* ch : channels) {
    static_assert(sizeof(double) == 8);
    f.write(reinterpret_cast<const char*>(ch->re.data()),
            static_cast<std::streamsize>(ch->re.size() * sizeof(double)));
  }
  check_stream(f, path);
}

inline void write_raw(const std::string& path, const Tensor& t) { write_raw(path, {&t}); }

inline void write_raw(const std::string& path, const Image3& img) {
  write_raw(path, {&img[0], &img[1], &img[2]});
}

inline std::vector<Tensor> read_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check_stream(f, path);
  std::string line;
  std::getline(f, line);
  std::istringstream hdr(line);
  std::string magic;
  std::size_t w = 0, h = 0, n = 0;
  hdr >> magic >> w >> h >> n;
  if (magic != "P-RAW" || w == 0 || h == 0 || n == 0)
    throw std::runtime_error("bad raw header in " + path);
  std::vector<Tensor> out;
  for (std::size_t c = 0; c < n; ++c) {
    Tensor t = Tensor::zeros({h, w});
    f.read(reinterpret_cast<char*>(t.re.data()),
           static_cast<std::streamsize>(t.re.size() * sizeof(double)));
    check_stream(f, path);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace lensveil::io
