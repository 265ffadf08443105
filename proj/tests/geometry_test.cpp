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

#include "detrack/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gtest/gtest.h"

namespace detrack {
namespace {

constexpr double kEps = 1e-12;

BBox RandomBox(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> s(0.02, 0.6);
  return {u(rng), u(rng), s(rng), s(rng)};
}

// Pixel-counting IoU over an n x n raster of the pair's enclosing box.
double RasterIou(const BBox& a, const BBox& b, int n) {
  const Corners ca = ToCorners(a), cb = ToCorners(b);
  const double x0 = std::min(ca.x1, cb.x1), y0 = std::min(ca.y1, cb.y1);
  const double sx = std::max(ca.x2, cb.x2) - x0, sy = std::max(ca.y2, cb.y2) - y0;
  long inter = 0, uni = 0;
  for (int i = 0; i < n; ++i) {
    const double y = y0 + sy * (i + 0.5) / n;
    for (int j = 0; j < n; ++j) {
      const double x = x0 + sx * (j + 0.5) / n;
      const bool ia = x >= ca.x1 && x < ca.x2 && y >= ca.y1 && y < ca.y2;
      const bool ib = x >= cb.x1 && x < cb.x2 && y >= cb.y1 && y < cb.y2;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

TEST(Iou, IdenticalBoxes) {
  EXPECT_DOUBLE_EQ(Iou(BBox{0.3, 0.4, 0.2, 0.5}, BBox{0.3, 0.4, 0.2, 0.5}), 1.0);
}

TEST(Iou, DisjointBoxes) {
  EXPECT_EQ(Iou(Corners{0, 0, 1, 1}, Corners{2, 2, 3, 3}), 0.0);
}

TEST(Iou, WorkedExampleOneSeventh) {
  // Intersection 1, union 4 + 4 - 1 = 7.
  EXPECT_NEAR(Iou(Corners{0, 0, 2, 2}, Corners{1, 1, 3, 3}), 1.0 / 7.0, kEps);
  // Same pair scaled into normalized coordinates, against the raster oracle.
  const BBox a = FromCorners({0.0, 0.0, 0.5, 0.5});
  const BBox b = FromCorners({0.25, 0.25, 0.75, 0.75});
  EXPECT_NEAR(RasterIou(a, b, 1000), 1.0 / 7.0, 5e-3);
}

TEST(Iou, DegenerateBoxIsZero) {
  EXPECT_EQ(Iou(BBox{0.5, 0.5, 0.0, 0.0}, BBox{0.5, 0.5, 0.2, 0.2}), 0.0);
  EXPECT_EQ(Iou(BBox{0.5, 0.5, 0.0, 0.0}, BBox{0.5, 0.5, 0.0, 0.0}), 0.0);
}

TEST(Iou, RandomPairsSymmetricAndBounded) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 10000; ++i) {
    const BBox a = RandomBox(rng), b = RandomBox(rng);
    const double ab = Iou(a, b), ba = Iou(b, a);
    ASSERT_EQ(ab, ba);
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 1.0);
  }
}

TEST(Iou, MatchesRasterOracle) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const BBox a = RandomBox(rng), b = RandomBox(rng);
    ASSERT_NEAR(Iou(a, b), RasterIou(a, b, 512), 5e-3) << "pair " << i;
  }
}

TEST(Giou, IdenticalBoxes) {
  const BBox a{0.2, 0.7, 0.3, 0.1};
  EXPECT_DOUBLE_EQ(Giou(a, a), 1.0);
}

TEST(Giou, TouchingBoxesAreZero) {
  // IoU 0, enclosing area 8 equals union area 8.
  EXPECT_NEAR(Giou(Corners{0, 0, 2, 2}, Corners{2, 0, 4, 2}), 0.0, kEps);
}

TEST(Giou, FarApartApproachesMinusOne) {
  EXPECT_LT(Giou(Corners{0, 0, 1, 1}, Corners{100, 100, 101, 101}), -0.9);
}

TEST(Giou, NeverExceedsIou) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10000; ++i) {
    const BBox a = RandomBox(rng), b = RandomBox(rng);
    const double g = Giou(a, b);
    ASSERT_LE(g, Iou(a, b) + kEps);
    ASSERT_GT(g, -1.0);
    ASSERT_LE(g, 1.0);
  }
}

TEST(Giou, DegenerateBoxActsAsPoint) {
  // Point at (3, 1) and box [0,2]^2: intersection 0, union 4, enclosing 3 x 2 = 6.
  const double g = Giou(Corners{3, 1, 3, 1}, Corners{0, 0, 2, 2});
  EXPECT_NEAR(g, -(6.0 - 4.0) / 6.0, kEps);
}

TEST(BoxTransforms, KnownValues) {
  const Corners c1 = ToCorners(BBox{0.5, 0.5, 1, 1});
  EXPECT_EQ(c1.x1, 0);
  EXPECT_EQ(c1.y1, 0);
  EXPECT_EQ(c1.x2, 1);
  EXPECT_EQ(c1.y2, 1);
  const Corners c2 = ToCorners(BBox{0.25, 0.25, 0.5, 0.5});
  EXPECT_EQ(c2.x1, 0);
  EXPECT_EQ(c2.y1, 0);
  EXPECT_EQ(c2.x2, 0.5);
  EXPECT_EQ(c2.y2, 0.5);
}

TEST(BoxTransforms, RoundTrip) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    const BBox b = RandomBox(rng);
    const BBox r = FromCorners(ToCorners(b));
    ASSERT_NEAR(r.cx, b.cx, kEps);
    ASSERT_NEAR(r.cy, b.cy, kEps);
    ASSERT_NEAR(r.w, b.w, kEps);
    ASSERT_NEAR(r.h, b.h, kEps);
  }
}

TEST(BoxTransforms, ClampProducesValidBox) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-2.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const BBox b = Clamp(BBox{u(rng), u(rng), u(rng), u(rng)});
    ASSERT_TRUE(IsValid(b));
  }
}

TEST(Hanning, SmallSizes) {
  EXPECT_EQ(HanningWindow(1), std::vector<double>{1.0});
  const auto w3 = HanningWindow(3);
  ASSERT_EQ(w3.size(), 3u);
  EXPECT_NEAR(w3[0], 0.0, kEps);
  EXPECT_NEAR(w3[1], 1.0, kEps);
  EXPECT_NEAR(w3[2], 0.0, kEps);
  const auto w5 = HanningWindow(5);
  const double expected[5] = {0.0, 0.5, 1.0, 0.5, 0.0};
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(w5[i], expected[i], kEps);
}

TEST(Hanning, SymmetricWithZeroEndpoints) {
  for (int n = 2; n <= 64; ++n) {
    const auto w = HanningWindow(n);
    EXPECT_EQ(w.front(), 0.0);
    EXPECT_EQ(w.back(), 0.0);
    for (int i = 0; i < n; ++i) {
      ASSERT_EQ(w[i], w[n - 1 - i]);
      ASSERT_GE(w[i], 0.0);
      ASSERT_LE(w[i], 1.0);
    }
  }
}

TEST(Hanning, RejectsNonPositiveSize) { EXPECT_THROW(HanningWindow(0), ConfigError); }

TEST(SinCosEmbedding, ZeroBox) {
  const auto e = SinCosBoxEmbedding(BBox{0, 0, 0, 0}, 32);
  ASSERT_EQ(e.size(), 32u);
  for (int k = 0; k < 4; ++k) {
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(e[k * 8 + i], 0.0);
      EXPECT_EQ(e[k * 8 + 4 + i], 1.0);
    }
  }
}

TEST(SinCosEmbedding, DeterministicBoundedAndSensitive) {
  const BBox a{0.3, 0.6, 0.2, 0.4};
  const auto e1 = SinCosBoxEmbedding(a, 64);
  EXPECT_EQ(e1, SinCosBoxEmbedding(a, 64));
  for (double v : e1) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  BBox b = a;
  b.w = 0.25;
  EXPECT_NE(e1, SinCosBoxEmbedding(b, 64));
  // Only the w block may change.
  const auto e2 = SinCosBoxEmbedding(b, 64);
  for (int i = 0; i < 64; ++i) {
    if (i < 32 || i >= 48) EXPECT_EQ(e1[i], e2[i]) << i;
  }
}

TEST(SinCosEmbedding, RejectsBadDim) {
  EXPECT_THROW(SinCosBoxEmbedding(BBox{}, 12), ConfigError);
  EXPECT_THROW(SinCosBoxEmbedding(BBox{}, 0), ConfigError);
}

TEST(TokenCenters, Grids) {
  const auto c1 = TokenCenters(GridSpec{1, 1, 8});
  ASSERT_EQ(c1.size(), 1u);
  EXPECT_EQ(c1[0], (Point2{0.5, 0.5}));
  const auto c2 = TokenCenters(GridSpec{2, 2, 8});
  const std::vector<Point2> expected = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
  EXPECT_EQ(c2, expected);
  EXPECT_EQ(TokenCenters(GridSpec{3, 5, 4}).size(), 15u);
}

TEST(TokenCenters, CellIndexRoundTrip) {
  const GridSpec g{4, 6, 8};
  const auto centers = TokenCenters(g);
  for (int i = 0; i < g.Count(); ++i) EXPECT_EQ(CellIndex(g, centers[i].x, centers[i].y), i);
  EXPECT_EQ(CellIndex(g, -1.0, -1.0), 0);
  EXPECT_EQ(CellIndex(g, 2.0, 2.0), g.Count() - 1);
}

}  // namespace
}  // namespace detrack
