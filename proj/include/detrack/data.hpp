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

// Synthetic tracking data: textured target shapes on a textured background
// with distractors, rendered procedurally in continuous world coordinates so
// that template and search crops at any scale come from the same scene.

#ifndef DETRACK_DATA_HPP_
#define DETRACK_DATA_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "detrack/encoder.hpp"
#include "detrack/geometry.hpp"

namespace detrack::data {

using enc::Image;
using enc::ImagePair;
using Color = std::array<float, 3>;

enum class ShapeKind { kRect, kEllipse, kDiamond };
enum class Pattern { kSolid, kStripes, kChecker, kRings };

struct Shape {
  ShapeKind kind = ShapeKind::kRect;
  Pattern pattern = Pattern::kSolid;
  double cx = 0, cy = 0, w = 1, h = 1;  // world units
  Color a{}, b{};                       // pattern colors
  double period = 0.3;                  // pattern period relative to the shape size
  double angle = 0;                     // stripe direction

  bool Covers(double x, double y) const {
    const double u = (x - cx) / (0.5 * w), v = (y - cy) / (0.5 * h);
    switch (kind) {
      case ShapeKind::kRect: return std::abs(u) <= 1 && std::abs(v) <= 1;
      case ShapeKind::kEllipse: return u * u + v * v <= 1;
      case ShapeKind::kDiamond: return std::abs(u) + std::abs(v) <= 1;
    }
    return false;
  }

  Color ColorAt(double x, double y) const {
    const double s = std::sqrt(w * h) * period;
    const double u = (x - cx) / s, v = (y - cy) / s;
    bool first = true;
    switch (pattern) {
      case Pattern::kSolid: break;
      case Pattern::kStripes:
        first = std::fmod(std::abs(u * std::cos(angle) + v * std::sin(angle)), 2.0) < 1.0;
        break;
      case Pattern::kChecker:
        first = (static_cast<long>(std::floor(u)) + static_cast<long>(std::floor(v))) % 2 == 0;
        break;
      case Pattern::kRings: first = std::fmod(std::hypot(u, v), 2.0) < 1.0; break;
    }
    return first ? a : b;
  }
};

struct Scene {
  Color bg_a{}, bg_b{};
  double bg_period = 1.0;  // background checker period, world units
  double bg_angle = 0.0;
  std::vector<Shape> shapes;  // shapes[0] is the target, drawn on top
  double noise = 0.0;         // per-pixel Gaussian noise std

  Color ColorAt(double x, double y) const {
    for (const auto& s : shapes)
      if (s.Covers(x, y)) return s.ColorAt(x, y);
    const double u = (x * std::cos(bg_angle) + y * std::sin(bg_angle)) / bg_period;
    const double v = (-x * std::sin(bg_angle) + y * std::cos(bg_angle)) / bg_period;
    const double t = 0.5 + 0.25 * (std::sin(u * 3.1) + std::sin(v * 2.3));
    Color c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<float>(bg_a[k] * t + bg_b[k] * (1 - t));
    return c;
  }

  // Top-most shape first: the target stays visible over distractors.
  const Shape& target() const { return shapes.front(); }
};

// Square crop of `side` world units centered at (cx, cy), sampled at pixel
// centers into a size x size image.
inline Image RenderCrop(const Scene& scene, double cx, double cy, double side, int size,
                        std::mt19937_64& rng) {
  Image img(3, size, size);
  std::normal_distribution<double> noise(0.0, scene.noise > 0 ? scene.noise : 1.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double wx = cx + ((x + 0.5) / size - 0.5) * side;
      const double wy = cy + ((y + 0.5) / size - 0.5) * side;
      const Color c = scene.ColorAt(wx, wy);
      for (int k = 0; k < 3; ++k) {
        double v = c[static_cast<std::size_t>(k)];
        if (scene.noise > 0) v += noise(rng);
        img.at(k, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

struct GeneratorConfig {
  int difficulty = 1;  // 0: lone centered target; 1: distractors and noise; 2: look-alike distractors
  int template_size = 32;
  int search_size = 64;
  double template_factor = 2.0;
  double search_factor = 4.0;

  void Validate() const {
    if (difficulty < 0 || difficulty > 2) throw ConfigError("difficulty must be 0, 1 or 2");
    if (template_size < 1 || search_size < 1) throw ConfigError("crop sizes must be positive");
    if (!(template_factor > 0) || !(search_factor > 1)) throw ConfigError("crop factors out of range");
  }
};

namespace internal {

inline double U(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int Pick(std::mt19937_64& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

inline Color RandomColor(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return {static_cast<float>(U(rng, lo, hi)), static_cast<float>(U(rng, lo, hi)),
          static_cast<float>(U(rng, lo, hi))};
}

// Saturated color: one channel high, one low, one anywhere.
inline Color VividColor(std::mt19937_64& rng) {
  Color c;
  const int hi = Pick(rng, 3), lo = (hi + 1 + Pick(rng, 2)) % 3;
  for (int k = 0; k < 3; ++k) c[static_cast<std::size_t>(k)] = static_cast<float>(U(rng, 0.2, 0.8));
  c[static_cast<std::size_t>(hi)] = static_cast<float>(U(rng, 0.85, 1.0));
  c[static_cast<std::size_t>(lo)] = static_cast<float>(U(rng, 0.0, 0.15));
  return c;
}

inline Shape RandomShape(std::mt19937_64& rng, double cx, double cy, double area) {
  Shape s;
  s.kind = static_cast<ShapeKind>(Pick(rng, 3));
  s.pattern = static_cast<Pattern>(Pick(rng, 4));
  const double aspect = std::exp(U(rng, -0.4, 0.4));
  s.w = std::sqrt(area * aspect);
  s.h = std::sqrt(area / aspect);
  s.cx = cx;
  s.cy = cy;
  s.period = U(rng, 0.15, 0.35);
  s.angle = U(rng, 0.0, std::numbers::pi);
  return s;
}

}  // namespace internal

// Scene with the unit-area target at the origin.
inline Scene RandomScene(std::mt19937_64& rng, int difficulty) {
  using namespace internal;
  Scene sc;
  sc.bg_a = RandomColor(rng, 0.25, 0.6);
  sc.bg_b = RandomColor(rng, 0.25, 0.6);
  sc.bg_period = U(rng, 0.3, 0.8);
  sc.bg_angle = U(rng, 0.0, std::numbers::pi);
  Shape target = RandomShape(rng, 0.0, 0.0, 1.0);
  target.a = VividColor(rng);
  target.b = VividColor(rng);
  if (target.pattern == Pattern::kSolid) target.pattern = Pattern::kStripes;
  sc.shapes.push_back(target);
  if (difficulty == 0) return sc;

  const int n = difficulty == 1 ? 1 + Pick(rng, 3) : 3 + Pick(rng, 3);
  for (int i = 0; i < n; ++i) {
    // Anywhere in a 4x4 neighborhood, but not on top of the target center.
    double x = 0, y = 0;
    do {
      x = U(rng, -2.0, 2.0);
      y = U(rng, -2.0, 2.0);
    } while (std::hypot(x, y) < 1.0);
    Shape d = RandomShape(rng, x, y, U(rng, 0.4, 1.5));
    if (difficulty == 2 && i % 2 == 0) {
      d.a = target.a;  // look-alike with a different pattern
      d.b = RandomColor(rng);
      d.pattern = target.pattern == Pattern::kChecker ? Pattern::kRings : Pattern::kChecker;
    } else {
      d.a = RandomColor(rng);
      d.b = RandomColor(rng);
    }
    sc.shapes.push_back(d);
  }
  sc.noise = difficulty == 1 ? 0.03 : 0.06;
  return sc;
}

struct Sample {
  ImagePair images;
  BBox gt;  // target in normalized search-crop coordinates
};

namespace internal {

// Largest search-center offset per axis, as a fraction of the crop side.
inline double MaxShift(int difficulty) { return difficulty == 0 ? 0.07 : difficulty == 1 ? 0.2 : 0.25; }

// Target box relative to a crop, normalized.
inline BBox Relative(const Shape& t, double cx, double cy, double side) {
  return {0.5 + (t.cx - cx) / side, 0.5 + (t.cy - cy) / side, t.w / side, t.h / side};
}

// Offset (per axis) that keeps the target fully inside the crop.
inline double InsideShift(double shift, double half_extent) {
  const double limit = std::max(0.0, 0.5 - half_extent - 1e-6);
  return std::clamp(shift, -limit, limit);
}

inline Image TemplateCrop(const Scene& sc, const GeneratorConfig& cfg, std::mt19937_64& rng) {
  const Shape& t = sc.target();
  const double jitter = cfg.difficulty == 0 ? 0.0 : 0.05;
  const double side = cfg.template_factor * std::sqrt(t.w * t.h) * std::exp(U(rng, -jitter, jitter));
  const double cx = t.cx + U(rng, -jitter, jitter) * side, cy = t.cy + U(rng, -jitter, jitter) * side;
  return RenderCrop(sc, cx, cy, side, cfg.template_size, rng);
}

// Search crop around (ax, ay) with scale augmentation, plus a random
// translation when `shift` is set.
inline Sample SearchCrop(const Scene& sc, const GeneratorConfig& cfg, double ax, double ay, bool shift,
                         Image z, std::mt19937_64& rng) {
  const Shape& t = sc.target();
  const double scale_jitter = cfg.difficulty == 0 ? 0.0 : 0.15;
  const double side = cfg.search_factor * std::sqrt(t.w * t.h) * std::exp(U(rng, -scale_jitter, scale_jitter));
  const double m = shift ? MaxShift(cfg.difficulty) : 0.0;
  const double sx = InsideShift((t.cx - ax) / side + U(rng, -m, m), 0.5 * t.w / side);
  const double sy = InsideShift((t.cy - ay) / side + U(rng, -m, m), 0.5 * t.h / side);
  const double cx = t.cx - sx * side, cy = t.cy - sy * side;
  Sample s;
  s.images.z = std::move(z);
  s.images.x = RenderCrop(sc, cx, cy, side, cfg.search_size, rng);
  s.gt = Relative(t, cx, cy, side);
  return s;
}

}  // namespace internal

// One template/search pair: template crop 2x the target, search crop 4x,
// with the target shifted off center.
inline Sample GeneratePair(std::mt19937_64& rng, const GeneratorConfig& cfg) {
  cfg.Validate();
  const Scene sc = RandomScene(rng, cfg.difficulty);
  Image z = internal::TemplateCrop(sc, cfg, rng);
  const Shape& t = sc.target();
  return internal::SearchCrop(sc, cfg, t.cx, t.cy, true, std::move(z), rng);
}

struct Sequence {
  Image template_image;
  std::vector<Image> frames;  // search crops
  std::vector<BBox> gt;       // normalized in each frame's crop
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(frames.size()); }
  ImagePair Pair(int i) const { return {template_image, frames[static_cast<std::size_t>(i)]}; }
};

// A moving target. Each frame's search crop is centered on the previous
// frame's target position, as a tracker crops around its last estimate.
inline Sequence GenerateSequence(std::uint64_t seed, int n_frames, const GeneratorConfig& cfg) {
  cfg.Validate();
  if (n_frames < 1) throw ConfigError("a sequence needs at least one frame");
  std::mt19937_64 rng(seed);
  Scene sc = RandomScene(rng, cfg.difficulty);
  Sequence seq;
  seq.seed = seed;
  seq.template_image = internal::TemplateCrop(sc, cfg, rng);
  const double speed = internal::MaxShift(cfg.difficulty) * cfg.search_factor;  // world units per frame
  double vx = internal::U(rng, -0.5, 0.5) * speed, vy = internal::U(rng, -0.5, 0.5) * speed;
  double ax = sc.target().cx, ay = sc.target().cy;
  for (int f = 0; f < n_frames; ++f) {
    Shape& t = sc.shapes.front();
    if (f > 0) {
      vx = std::clamp(vx + internal::U(rng, -0.2, 0.2) * speed, -0.5 * speed, 0.5 * speed);
      vy = std::clamp(vy + internal::U(rng, -0.2, 0.2) * speed, -0.5 * speed, 0.5 * speed);
      t.cx += vx;
      t.cy += vy;
      for (std::size_t i = 1; i < sc.shapes.size(); ++i) {
        sc.shapes[i].cx += internal::U(rng, -0.1, 0.1);
        sc.shapes[i].cy += internal::U(rng, -0.1, 0.1);
      }
    }
    auto s = internal::SearchCrop(sc, cfg, ax, ay, false, Image{}, rng);
    seq.frames.push_back(std::move(s.images.x));
    seq.gt.push_back(s.gt);
    ax = t.cx;
    ay = t.cy;
  }
  return seq;
}

}  // namespace detrack::data

#endif  // DETRACK_DATA_HPP_
