#pragma once

// Two-texture segmentation images: a near-horizontal and a near-vertical
// grating share one random color pair and are split by a random line, so
// color and brightness carry no class information.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sprout/image.hpp"
#include "sprout/probe.hpp"
#include "sprout/rng.hpp"

namespace sprout::testing {

struct TextureSample {
  Image8 image;
  LabelMap label;  // 0: horizontal grating, 1: vertical grating
};

inline TextureSample texture_sample(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  auto u = [&] { return uniform01(rng); };
  const double pi = std::numbers::pi;
  double ca[3], cb[3];
  for (int c = 0; c < 3; ++c) {
    ca[c] = 30.0 + 195.0 * u();
    cb[c] = 30.0 + 195.0 * u();
  }
  // Orientation jitter, period and phase are drawn per texture.
  const double theta[2] = {(u() - 0.5) * pi / 6.0, pi / 2.0 + (u() - 0.5) * pi / 6.0};
  const double period[2] = {8.0 + 6.0 * u(), 8.0 + 6.0 * u()};
  const double phase[2] = {2.0 * pi * u(), 2.0 * pi * u()};
  // Boundary: a random line through a point near the center.
  const double angle = 2.0 * pi * u();
  const double nx = std::cos(angle), ny = std::sin(angle);
  const double cx = static_cast<double>(size) * (0.35 + 0.3 * u()), cy = static_cast<double>(size) * (0.35 + 0.3 * u());
  TextureSample s{Image8(size, size, 3), LabelMap(size, size)};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      const int cls = (px - cx) * nx + (py - cy) * ny > 0.0 ? 1 : 0;
      // Stripes run along theta, so the wave varies along its normal.
      const double along = -px * std::sin(theta[cls]) + py * std::cos(theta[cls]);
      const double w = 0.5 + 0.5 * std::sin(2.0 * pi * along / period[cls] + phase[cls]);
      for (int c = 0; c < 3; ++c) {
        const double v = w * ca[c] + (1.0 - w) * cb[c] + 6.0 * (u() - 0.5);
        s.image.at(x, y, static_cast<std::size_t>(c)) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
      s.label.at(x, y) = static_cast<std::uint8_t>(cls);
    }
  return s;
}

}  // namespace sprout::testing
