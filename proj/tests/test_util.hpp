#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "sprout/image.hpp"
#include "sprout/rng.hpp"

namespace sprout::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("sprout-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Image8 noise_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  Image8 img(w, h, 3);
  Rng rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

// Smooth color gradient with random ellipses and mild pixel noise; passes the
// default quality checks.
inline Image8 natural_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  auto u = [&] { return uniform01(rng); };
  std::vector<double> img(w * h * 3);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 70 + 110 * u();
    gx[c] = (u() - 0.5) * 60;
    gy[c] = (u() - 0.5) * 60;
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(y * w + x) * 3 + c] = base[c] + gx[c] * (double(x) / w - 0.5) + gy[c] * (double(y) / h - 0.5);
  const int blobs = 3 + static_cast<int>(rng() % 4);
  for (int b = 0; b < blobs; ++b) {
    const double cx = u() * w, cy = u() * h, rx = 4 + u() * w / 3, ry = 4 + u() * h / 3;
    double col[3];
    for (auto& cc : col) cc = 40 + 175 * u();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        if (dx * dx + dy * dy <= 1.0)
          for (int c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = col[c];
      }
  }
  Image8 out(w, h, 3);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i] + (u() - 0.5) * 24.0;
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

// Separable Gaussian blur with clamped borders.
inline Image8 gaussian_blur(const Image8& img, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  const int W = static_cast<int>(img.width), H = static_cast<int>(img.height), C = static_cast<int>(img.channels);
  std::vector<double> tmp(img.pixels.size()), out(img.pixels.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double a = 0;
        for (int i = -r; i <= r; ++i) a += k[i + r] * img.pixels[(y * W + std::clamp(x + i, 0, W - 1)) * C + c];
        tmp[(y * W + x) * C + c] = a;
      }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double a = 0;
        for (int i = -r; i <= r; ++i) a += k[i + r] * tmp[(std::clamp(y + i, 0, H - 1) * W + x) * C + c];
        out[(y * W + x) * C + c] = a;
      }
  Image8 res(img.width, img.height, img.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    res.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(out[i]), 0L, 255L));
  return res;
}

}  // namespace sprout::testing
