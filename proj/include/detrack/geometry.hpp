/* Copyright 2026 The detrack Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Box algebra, overlap metrics, window functions and positional encodings.
//
// All boxes live in coordinates normalized to the search-region side, so a
// box covering the whole search crop is (0.5, 0.5, 1, 1) in center-size form.

#ifndef DETRACK_GEOMETRY_HPP_
#define DETRACK_GEOMETRY_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace detrack {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Smallest side length a clamped box may have.
inline constexpr double kMinBoxSide = 1e-4;

struct Corners {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double Area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
};

struct BBox {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;

  double Area() const { return std::max(0.0, w) * std::max(0.0, h); }

  bool operator==(const BBox&) const = default;
};

inline Corners ToCorners(const BBox& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

inline BBox FromCorners(const Corners& c) {
  return {0.5 * (c.x1 + c.x2), 0.5 * (c.y1 + c.y2), c.x2 - c.x1, c.y2 - c.y1};
}

// Projects a box onto the valid set: center in [0,1]^2, sides in [kMinBoxSide, 1].
inline BBox Clamp(const BBox& b) {
  return {std::clamp(b.cx, 0.0, 1.0), std::clamp(b.cy, 0.0, 1.0),
          std::clamp(b.w, kMinBoxSide, 1.0), std::clamp(b.h, kMinBoxSide, 1.0)};
}

inline bool IsValid(const BBox& b) {
  return b.cx >= 0 && b.cx <= 1 && b.cy >= 0 && b.cy <= 1 && b.w > 0 && b.w <= 1 &&
         b.h > 0 && b.h <= 1;
}

inline bool Contains(const BBox& b, double x, double y) {
  const Corners c = ToCorners(b);
  return x >= c.x1 && x <= c.x2 && y >= c.y1 && y <= c.y2;
}

namespace internal {

inline double IntersectionArea(const Corners& a, const Corners& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

}  // namespace internal

inline double Iou(const Corners& a, const Corners& b) {
  const double inter = internal::IntersectionArea(a, b);
  const double uni = a.Area() + b.Area() - inter;
  if (uni <= 0 || inter <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double Iou(const BBox& a, const BBox& b) { return Iou(ToCorners(a), ToCorners(b)); }

// Generalized IoU. A zero-area box behaves as a point: it contributes no
// intersection, but still stretches the enclosing box.
inline double Giou(const Corners& a, const Corners& b) {
  const double inter = internal::IntersectionArea(a, b);
  const double uni = a.Area() + b.Area() - inter;
  const double iou = (uni > 0 && inter > 0) ? inter / uni : 0.0;
  const double ex = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ey = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclosing = ex * ey;
  if (enclosing <= 0) return iou;
  return iou - (enclosing - uni) / enclosing;
}

inline double Giou(const BBox& a, const BBox& b) { return Giou(ToCorners(a), ToCorners(b)); }

// Symmetric Hann window, w[i] = 0.5 - 0.5 cos(2 pi i / (n - 1)); n == 1 gives {1}.
inline std::vector<double> HanningWindow(int n) {
  if (n < 1) throw ConfigError("hanning window size must be >= 1, got " + std::to_string(n));
  if (n == 1) return {1.0};
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  }
  // Force exact symmetry and zero endpoints regardless of cos rounding.
  for (int i = 0; i < n / 2; ++i) w[n - 1 - i] = w[i];
  w.front() = 0.0;
  w.back() = 0.0;
  return w;
}

// Outer product of two Hann windows, row-major height x width.
inline std::vector<double> HanningWindow2d(int height, int width) {
  const auto wy = HanningWindow(height);
  const auto wx = HanningWindow(width);
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) out[static_cast<std::size_t>(r) * width + c] = wy[r] * wx[c];
  return out;
}

// Sine-cosine embedding of the four box coordinates. The output holds four
// blocks of dim/4 entries (cx, cy, w, h); each block is dim/8 sines followed
// by dim/8 cosines over geometrically spaced frequencies.
inline std::vector<double> SinCosBoxEmbedding(const BBox& b, int dim, double temperature = 10000.0) {
  if (dim <= 0 || dim % 8 != 0) {
    throw ConfigError("box embedding dim must be a positive multiple of 8, got " +
                      std::to_string(dim));
  }
  const int n_freq = dim / 8;
  const double coords[4] = {b.cx, b.cy, b.w, b.h};
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int k = 0; k < 4; ++k) {
    double* block = out.data() + k * (dim / 4);
    for (int i = 0; i < n_freq; ++i) {
      const double arg =
          coords[k] * 2.0 * std::numbers::pi / std::pow(temperature, static_cast<double>(i) / n_freq);
      block[i] = std::sin(arg);
      block[n_freq + i] = std::cos(arg);
    }
  }
  return out;
}

struct GridSpec {
  int height_tokens = 8;
  int width_tokens = 8;
  int patch_size = 8;

  int Count() const { return height_tokens * width_tokens; }
};

struct Point2 {
  double x = 0, y = 0;
  bool operator==(const Point2&) const = default;
};

// Normalized token centers in row-major order.
inline std::vector<Point2> TokenCenters(const GridSpec& g) {
  if (g.height_tokens < 1 || g.width_tokens < 1) {
    throw ConfigError("grid must have at least one token per side");
  }
  std::vector<Point2> out;
  out.reserve(static_cast<std::size_t>(g.Count()));
  for (int r = 0; r < g.height_tokens; ++r)
    for (int c = 0; c < g.width_tokens; ++c)
      out.push_back({(c + 0.5) / g.width_tokens, (r + 0.5) / g.height_tokens});
  return out;
}

// Row-major index of the grid cell that contains a normalized point; points
// outside [0,1] are clamped onto the border cells.
inline int CellIndex(const GridSpec& g, double x, double y) {
  const int c = std::clamp(static_cast<int>(std::floor(x * g.width_tokens)), 0, g.width_tokens - 1);
  const int r =
      std::clamp(static_cast<int>(std::floor(y * g.height_tokens)), 0, g.height_tokens - 1);
  return r * g.width_tokens + c;
}

}  // namespace detrack

#endif  // DETRACK_GEOMETRY_HPP_
