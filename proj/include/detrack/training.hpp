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

// Label assignment, losses and the denoising branch.

#ifndef DETRACK_TRAINING_HPP_
#define DETRACK_TRAINING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "detrack/attention.hpp"
#include "detrack/autodiff.hpp"
#include "detrack/geometry.hpp"
#include "detrack/head.hpp"

namespace detrack::train {

using ad::Tape;
using ad::Tensor;
using ad::Var;

inline constexpr double kQflEps = 1e-7;

struct LossWeights {
  double giou = 2.0;
  double l1 = 5.0;
  double beta = 2.0;
  double cls = 1.0;
  double loc = 1.0;

  void Validate() const {
    if (giou < 0 || l1 < 0 || beta < 0 || cls < 0 || loc < 0) {
      throw ConfigError("loss weights must be nonnegative");
    }
  }
};

// ---------------------------------------------------------------------------
// Losses.

inline double Qfl(double sigma, double y, double beta = 2.0) {
  const double s = std::clamp(sigma, kQflEps, 1.0 - kQflEps);
  return -std::pow(std::abs(y - s), beta) * ((1.0 - y) * std::log(1.0 - s) + y * std::log(s));
}

// Elementwise quality focal loss of scores (n, 1) against constant targets.
template <typename T>
Var<T> QflRows(const Var<T>& scores, const std::vector<double>& y, double beta) {
  if (static_cast<int>(y.size()) != scores.rows() || scores.cols() != 1) {
    throw ad::ShapeError("qfl: scores " + ad::ShapeString(scores.shape()) + " for " +
                         std::to_string(y.size()) + " targets");
  }
  Tape<T>& tape = *scores.tape();
  const int n = scores.rows();
  std::vector<T> yv(y.begin(), y.end()), ny(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) ny[i] = static_cast<T>(1.0 - y[i]);
  const Var<T> target = tape.Constant({n, 1}, yv);
  const Var<T> s = ad::Clamp(scores, static_cast<T>(kQflEps), static_cast<T>(1.0 - kQflEps));
  const Var<T> modulator = ad::Pow(ad::Abs(ad::Sub(target, s)), static_cast<T>(beta));
  const Var<T> ce = ad::Add(ad::Mul(tape.Constant({n, 1}, ny), ad::Log(ad::AddScalar(ad::Neg(s), T(1)))),
                            ad::Mul(target, ad::Log(s)));
  return ad::Neg(ad::Mul(modulator, ce));
}

inline double LocLoss(const BBox& pred, const BBox& gt, const LossWeights& w = {}) {
  const double l1 = std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) + std::abs(pred.w - gt.w) +
                    std::abs(pred.h - gt.h);
  return w.giou * (1.0 - Giou(pred, gt)) + w.l1 * l1;
}

// Row-wise GIoU between predicted boxes (n, 4) and constant boxes.
template <typename T>
Var<T> GiouRows(const Var<T>& pred, const std::vector<BBox>& gt) {
  Tape<T>& tape = *pred.tape();
  const int n = pred.rows();
  if (static_cast<int>(gt.size()) != n || pred.cols() != 4) {
    throw ad::ShapeError("giou: boxes " + ad::ShapeString(pred.shape()) + " against " +
                         std::to_string(gt.size()) + " targets");
  }
  auto col = [](const Var<T>& x, int c) { return ad::SliceCols(x, c, c + 1); };
  auto constant = [&](auto f) {
    std::vector<T> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = static_cast<T>(f(gt[static_cast<std::size_t>(i)]));
    return tape.Constant({n, 1}, std::move(v));
  };
  const Var<T> cx = col(pred, 0), cy = col(pred, 1), w = col(pred, 2), h = col(pred, 3);
  const Var<T> hw = ad::Scale(w, T(0.5)), hh = ad::Scale(h, T(0.5));
  const Var<T> x1 = ad::Sub(cx, hw), x2 = ad::Add(cx, hw), y1 = ad::Sub(cy, hh), y2 = ad::Add(cy, hh);
  const Var<T> gx1 = constant([](const BBox& b) { return b.cx - b.w / 2; });
  const Var<T> gx2 = constant([](const BBox& b) { return b.cx + b.w / 2; });
  const Var<T> gy1 = constant([](const BBox& b) { return b.cy - b.h / 2; });
  const Var<T> gy2 = constant([](const BBox& b) { return b.cy + b.h / 2; });
  const Var<T> garea = constant([](const BBox& b) { return b.w * b.h; });
  const Var<T> iw = ad::Relu(ad::Sub(ad::Minimum(x2, gx2), ad::Maximum(x1, gx1)));
  const Var<T> ih = ad::Relu(ad::Sub(ad::Minimum(y2, gy2), ad::Maximum(y1, gy1)));
  const Var<T> inter = ad::Mul(iw, ih);
  const Var<T> uni = ad::Sub(ad::Add(ad::Mul(w, h), garea), inter);
  const Var<T> iou = ad::Div(inter, uni);
  const Var<T> cw = ad::Sub(ad::Maximum(x2, gx2), ad::Minimum(x1, gx1));
  const Var<T> ch = ad::Sub(ad::Maximum(y2, gy2), ad::Minimum(y1, gy1));
  const Var<T> enclosing = ad::Mul(cw, ch);
  return ad::Sub(iou, ad::Div(ad::Sub(enclosing, uni), enclosing));
}

// Row-wise localization loss: giou weight * (1 - giou) + l1 weight * L1.
template <typename T>
Var<T> LocLossRows(const Var<T>& pred, const std::vector<BBox>& gt, const LossWeights& w) {
  const Var<T> target = head::BoxConstant(*pred.tape(), gt);
  const Var<T> g = ad::Scale(ad::AddScalar(ad::Neg(GiouRows(pred, gt)), T(1)), static_cast<T>(w.giou));
  const Var<T> l1 = ad::Scale(ad::RowSum(ad::Abs(ad::Sub(pred, target))), static_cast<T>(w.l1));
  return ad::Add(g, ad::Reshape(l1, {pred.rows(), 1}));
}

// ---------------------------------------------------------------------------
// Label assignment.

enum class AssignMode { kQuality, kHard, kCenter, kHungarian };

inline const char* AssignModeName(AssignMode m) {
  switch (m) {
    case AssignMode::kQuality: return "quality";
    case AssignMode::kHard: return "hard";
    case AssignMode::kCenter: return "center";
    case AssignMode::kHungarian: return "hungarian";
  }
  return "?";
}

inline AssignMode ParseAssignMode(const std::string& s) {
  for (AssignMode m : {AssignMode::kQuality, AssignMode::kHard, AssignMode::kCenter, AssignMode::kHungarian}) {
    if (s == AssignModeName(m)) return m;
  }
  throw ConfigError("unknown assignment mode '" + s + "' (quality|hard|center|hungarian)");
}

struct AssignmentResult {
  std::vector<double> y;               // classification target per row
  std::vector<std::uint8_t> positive;
  std::vector<std::uint8_t> loc;       // rows supervised for localization

  explicit AssignmentResult(std::size_t n = 0) : y(n, 0.0), positive(n, 0), loc(n, 0) {}
  std::size_t size() const { return y.size(); }
  int NumPositive() const { return static_cast<int>(std::count(positive.begin(), positive.end(), 1)); }
  int NumLoc() const { return static_cast<int>(std::count(loc.begin(), loc.end(), 1)); }
};

inline int NearestCenter(const std::vector<Point2>& centers, double x, double y) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double d = (centers[i].x - x) * (centers[i].x - x) + (centers[i].y - y) * (centers[i].y - y);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Every row whose center lies inside the GT box is positive with target
// IoU(pred, gt), or 1 when `hard`. The top `k_loc` positives by score are
// supervised for localization. Without any inside center, the row nearest
// the GT center is the single positive.
inline AssignmentResult AssignOneToMany(const std::vector<Point2>& centers,
                                        const std::vector<BBox>& pred,
                                        const std::vector<double>& scores, const BBox& gt, int k_loc,
                                        bool hard = false) {
  if (pred.size() != centers.size() || scores.size() != centers.size()) {
    throw ad::ShapeError("assignment: " + std::to_string(centers.size()) + " centers, " +
                         std::to_string(pred.size()) + " boxes, " + std::to_string(scores.size()) +
                         " scores");
  }
  AssignmentResult r(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) r.positive[i] = Contains(gt, centers[i].x, centers[i].y) ? 1 : 0;
  if (r.NumPositive() == 0 && !centers.empty()) {
    r.positive[static_cast<std::size_t>(NearestCenter(centers, gt.cx, gt.cy))] = 1;
  }
  std::vector<double> pos_scores(centers.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    if (!r.positive[i]) continue;
    r.y[i] = hard ? 1.0 : Iou(pred[i], gt);
    pos_scores[i] = scores[i];
  }
  for (int i : head::TopK(pos_scores, std::min(k_loc, r.NumPositive()))) r.loc[static_cast<std::size_t>(i)] = 1;
  return r;
}

// One-to-one: the row whose center is nearest the GT center.
inline AssignmentResult AssignCenter(const std::vector<Point2>& centers, const BBox& gt) {
  AssignmentResult r(centers.size());
  const int i = NearestCenter(centers, gt.cx, gt.cy);
  if (i >= 0) {
    r.y[static_cast<std::size_t>(i)] = 1.0;
    r.positive[static_cast<std::size_t>(i)] = 1;
    r.loc[static_cast<std::size_t>(i)] = 1;
  }
  return r;
}

// Minimum-cost assignment for a rectangular cost matrix (Kuhn-Munkres with
// potentials). Returns the column of every row, -1 for unmatched rows when
// there are more rows than columns.
inline std::vector<int> HungarianMatch(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(cost.front().size());
  for (const auto& r : cost) {
    if (static_cast<int>(r.size()) != cols) throw ad::ShapeError("hungarian: ragged cost matrix");
    for (double c : r)
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
  }
  if (cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
  if (rows > cols) {
    std::vector<std::vector<double>> t(static_cast<std::size_t>(cols), std::vector<double>(static_cast<std::size_t>(rows)));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    const std::vector<int> tm = HungarianMatch(t);
    std::vector<int> out(static_cast<std::size_t>(rows), -1);
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(tm[static_cast<std::size_t>(j)])] = j;
    return out;
  }
  const double inf = std::numeric_limits<double>::infinity();
  const int n = rows, m = cols;
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) out[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return out;
}

// Matching cost of a prediction against the GT; mirrors the loss.
inline double MatchCost(const BBox& pred, double score, const BBox& gt, const LossWeights& w) {
  return LocLoss(pred, gt, w) + w.cls * (Qfl(score, 1.0, w.beta) - Qfl(score, 0.0, w.beta));
}

// One-to-one: the row minimizing the matching cost.
inline AssignmentResult AssignHungarian(const std::vector<BBox>& pred, const std::vector<double>& scores,
                                        const BBox& gt, const LossWeights& w = {}) {
  if (pred.size() != scores.size()) throw ad::ShapeError("hungarian assignment: boxes and scores differ");
  AssignmentResult r(pred.size());
  if (pred.empty()) return r;
  std::vector<std::vector<double>> cost(1, std::vector<double>(pred.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) cost[0][i] = MatchCost(pred[i], scores[i], gt, w);
  const int i = HungarianMatch(cost)[0];
  r.y[static_cast<std::size_t>(i)] = 1.0;
  r.positive[static_cast<std::size_t>(i)] = 1;
  r.loc[static_cast<std::size_t>(i)] = 1;
  return r;
}

inline AssignmentResult Assign(AssignMode mode, const std::vector<Point2>& centers,
                               const std::vector<BBox>& pred, const std::vector<double>& scores,
                               const BBox& gt, int k_loc, const LossWeights& w) {
  switch (mode) {
    case AssignMode::kQuality: return AssignOneToMany(centers, pred, scores, gt, k_loc, false);
    case AssignMode::kHard: return AssignOneToMany(centers, pred, scores, gt, k_loc, true);
    case AssignMode::kCenter: return AssignCenter(centers, gt);
    case AssignMode::kHungarian: return AssignHungarian(pred, scores, gt, w);
  }
  throw ConfigError("unknown assignment mode");
}

// ---------------------------------------------------------------------------
// Denoising.

enum class DnMode { kOff, kEmbedding, kCenterCorner, kCenterOutside };

inline const char* DnModeName(DnMode m) {
  switch (m) {
    case DnMode::kOff: return "off";
    case DnMode::kEmbedding: return "embedding";
    case DnMode::kCenterCorner: return "on";
    case DnMode::kCenterOutside: return "outside";
  }
  return "?";
}

inline DnMode ParseDnMode(const std::string& s) {
  if (s == "on" || s == "corner") return DnMode::kCenterCorner;
  for (DnMode m : {DnMode::kOff, DnMode::kEmbedding, DnMode::kCenterOutside}) {
    if (s == DnModeName(m)) return m;
  }
  throw ConfigError("unknown denoising mode '" + s + "' (on|off|embedding|outside)");
}

struct DenoisingConfig {
  DnMode mode = DnMode::kCenterCorner;
  double lambda1 = 0.4;  // center shift, fraction of half the side
  double lambda2 = 0.4;  // side scaling
  double lambda1_neg = 0.6;
  double lambda2_neg = 0.6;
  int groups = 5;

  // Negatives scaled by 1.5, capped below 1.
  static DenoisingConfig WithScales(double l1, double l2, DnMode mode = DnMode::kCenterCorner) {
    DenoisingConfig c;
    c.mode = mode;
    c.lambda1 = l1;
    c.lambda2 = l2;
    c.lambda1_neg = std::max(l1, std::min(1.5 * l1, 0.95));
    c.lambda2_neg = std::max(l2, std::min(1.5 * l2, 0.95));
    return c;
  }

  bool enabled() const { return mode != DnMode::kOff && groups > 0; }

  void Validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v < 1.0; };
    if (!in_unit(lambda1) || !in_unit(lambda2) || !in_unit(lambda1_neg) || !in_unit(lambda2_neg)) {
      throw ConfigError("denoising noise scales must lie in [0, 1)");
    }
    if (lambda1_neg < lambda1 || lambda2_neg < lambda2) {
      throw ConfigError("negative noise scales must be at least the positive ones");
    }
    if (groups < 0) throw ConfigError("denoising group count must be nonnegative");
  }
};

struct DenoisingBatch {
  std::vector<BBox> boxes;             // noised reference boxes
  std::vector<int> group;
  std::vector<std::uint8_t> positive;
  std::vector<int> source;             // kept-token row of the content, -1 for label embeddings
  int groups = 0;

  int size() const { return static_cast<int>(boxes.size()); }
};

// Center shift with |dx| < l1 * w / 2, |dy| < l1 * h / 2 and sides scaled
// uniformly in [1 - l2, 1 + l2], then clamped.
inline BBox NoiseBox(const BBox& gt, double l1, double l2, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  BBox b = gt;
  b.cx += u(rng) * l1 * gt.w / 2;
  b.cy += u(rng) * l1 * gt.h / 2;
  b.w *= 1.0 + u(rng) * l2;
  b.h *= 1.0 + u(rng) * l2;
  return Clamp(b);
}

// Kept token nearest to (x, y), preferring tokens whose center is inside
// `inside` when any is.
inline int NearestKept(const std::vector<Point2>& centers, double x, double y, const BBox* inside) {
  if (inside != nullptr) {
    std::vector<Point2> in;
    std::vector<int> idx;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (Contains(*inside, centers[i].x, centers[i].y)) {
        in.push_back(centers[i]);
        idx.push_back(static_cast<int>(i));
      }
    }
    if (!in.empty()) return idx[static_cast<std::size_t>(NearestCenter(in, x, y))];
  }
  return NearestCenter(centers, x, y);
}

// One positive and one negative query per group. The positive reads the
// token at the GT center; the negative reads a corner token of the GT box
// (one of four at random), a random token outside it, or label embeddings,
// depending on the mode.
inline DenoisingBatch GenDenoisingBatch(const BBox& gt, const std::vector<Point2>& kept_centers,
                                        const DenoisingConfig& cfg, std::mt19937_64& rng) {
  cfg.Validate();
  DenoisingBatch b;
  if (!cfg.enabled()) return b;
  if (kept_centers.empty()) throw std::invalid_argument("denoising needs at least one kept token");
  b.groups = cfg.groups;
  const Corners c = ToCorners(gt);
  const Point2 corners[4] = {{c.x1, c.y1}, {c.x2, c.y1}, {c.x1, c.y2}, {c.x2, c.y2}};
  const bool embed = cfg.mode == DnMode::kEmbedding;
  const int center = embed ? -1 : NearestKept(kept_centers, gt.cx, gt.cy, &gt);
  std::vector<int> outside;
  for (std::size_t i = 0; i < kept_centers.size(); ++i)
    if (!Contains(gt, kept_centers[i].x, kept_centers[i].y)) outside.push_back(static_cast<int>(i));
  std::uniform_int_distribution<int> pick_corner(0, 3);
  for (int g = 0; g < cfg.groups; ++g) {
    b.boxes.push_back(NoiseBox(gt, cfg.lambda1, cfg.lambda2, rng));
    b.group.push_back(g);
    b.positive.push_back(1);
    b.source.push_back(center);

    int neg = -1;
    if (cfg.mode == DnMode::kCenterOutside && !outside.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, outside.size() - 1);
      neg = outside[pick(rng)];
    } else if (!embed) {
      const Point2 p = corners[pick_corner(rng)];
      neg = NearestKept(kept_centers, p.x, p.y, &gt);
    }
    b.boxes.push_back(NoiseBox(gt, cfg.lambda1_neg, cfg.lambda2_neg, rng));
    b.group.push_back(g);
    b.positive.push_back(0);
    b.source.push_back(neg);
  }
  return b;
}

// Additive self-attention mask over [denoising ; matching] queries. Queries
// of different denoising groups, and denoising versus matching queries,
// cannot attend to each other.
template <typename T = double>
Tensor<T> BuildDnAttentionMask(int groups, int per_group, int n_matching) {
  if (groups < 0 || per_group < 0 || n_matching < 0) throw ConfigError("mask sizes must be nonnegative");
  const int n_dn = groups * per_group, n = n_dn + n_matching;
  Tensor<T> m({n, n});
  auto group_of = [&](int i) { return i < n_dn ? i / per_group : -1; };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (group_of(i) != group_of(j)) m.at(i, j) = static_cast<T>(attn::kBlockedMask);
  return m;
}

// Positives target IoU(refined, gt) and get localization loss; negatives
// target 0.
inline AssignmentResult DnTargets(const DenoisingBatch& batch, const std::vector<BBox>& refined,
                                  const BBox& gt) {
  if (static_cast<int>(refined.size()) != batch.size()) {
    throw ad::ShapeError("denoising targets: " + std::to_string(refined.size()) + " boxes for " +
                         std::to_string(batch.size()) + " queries");
  }
  AssignmentResult r(refined.size());
  for (std::size_t i = 0; i < refined.size(); ++i) {
    if (!batch.positive[i]) continue;
    r.positive[i] = 1;
    r.loc[i] = 1;
    r.y[i] = Iou(refined[i], gt);
  }
  return r;
}

// Content and mask for the decoder. `label_embedding` (2, dim) supplies the
// content of queries without a source token: row 1 positive, row 0 negative.
template <typename T>
head::DenoisingInput<T> MakeDenoisingInput(Tape<T>& tape, const DenoisingBatch& batch,
                                           const Var<T>& projected, int n_matching,
                                           ad::Parameter<T>* label_embedding = nullptr) {
  head::DenoisingInput<T> in;
  if (batch.size() == 0) return in;
  const bool any_embed = std::any_of(batch.source.begin(), batch.source.end(), [](int s) { return s < 0; });
  if (any_embed && label_embedding == nullptr) {
    throw std::invalid_argument("denoising queries without source tokens need a label embedding");
  }
  std::vector<Var<T>> rows;
  const Var<T> table = any_embed ? tape.Param(*label_embedding) : Var<T>();
  for (int i = 0; i < batch.size(); ++i) {
    const int s = batch.source[static_cast<std::size_t>(i)];
    rows.push_back(s >= 0 ? ad::GatherRows(projected, {s})
                          : ad::GatherRows(table, {batch.positive[static_cast<std::size_t>(i)] ? 1 : 0}));
  }
  in.queries.content = ad::ConcatRows(rows);
  in.queries.refs = head::BoxConstant(tape, batch.boxes);
  in.mask = BuildDnAttentionMask<T>(batch.groups, batch.size() / std::max(batch.groups, 1), n_matching);
  return in;
}

// ---------------------------------------------------------------------------
// Objective.

// QFL summed over rows and normalized by the number of positives.
template <typename T>
Var<T> ClsLoss(const Var<T>& scores, const AssignmentResult& a, const LossWeights& w) {
  const double n = std::max(a.NumPositive(), 1);
  return ad::Scale(ad::Sum(QflRows(scores, a.y, w.beta)), static_cast<T>(1.0 / n));
}

// Mean localization loss over the supervised rows; zero when there are none.
template <typename T>
Var<T> LocLossMean(const Var<T>& boxes, const AssignmentResult& a, const BBox& gt, const LossWeights& w) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < a.loc.size(); ++i)
    if (a.loc[i]) rows.push_back(static_cast<int>(i));
  if (rows.empty()) return boxes.tape()->Constant({}, {T(0)});
  const Var<T> sel = ad::GatherRows(boxes, rows);
  return ad::Mean(LocLossRows(sel, std::vector<BBox>(rows.size(), gt), w));
}

template <typename T>
std::vector<double> Column(const Var<T>& x, int begin, int end) {
  std::vector<double> out;
  for (int i = begin; i < end; ++i) out.push_back(static_cast<double>(x.value()[static_cast<std::size_t>(i)]));
  return out;
}

template <typename T>
std::vector<BBox> BoxRows(const Var<T>& boxes, int begin, int end) {
  const auto all = head::ToBoxes(boxes);
  return {all.begin() + begin, all.begin() + end};
}

// Targets for layer 0 (every kept token) and each decoder layer (matching
// queries, located at their source tokens).
template <typename T>
std::vector<AssignmentResult> AssignLayers(const head::DecoderOutput<T>& out, const BBox& gt,
                                           AssignMode mode, int k_loc, const LossWeights& w) {
  std::vector<AssignmentResult> r;
  const int nt = out.layer0.size();
  r.push_back(Assign(mode, out.token_centers, BoxRows(out.layer0.boxes, 0, nt),
                     Column(out.layer0.scores, 0, nt), gt, k_loc, w));
  const int b = out.n_dn, e = out.n_dn + out.n_matching();
  for (const auto& p : out.layers) {
    r.push_back(Assign(mode, out.query_centers, BoxRows(p.boxes, b, e), Column(p.scores, b, e), gt, k_loc, w));
  }
  return r;
}

template <typename T>
std::vector<AssignmentResult> AssignDenoising(const head::DecoderOutput<T>& out,
                                              const DenoisingBatch& batch, const BBox& gt) {
  std::vector<AssignmentResult> r;
  if (out.n_dn == 0) return r;
  for (const auto& p : out.layers) r.push_back(DnTargets(batch, BoxRows(p.boxes, 0, out.n_dn), gt));
  return r;
}

struct LossTerms {
  std::vector<double> cls, loc, cls_dn, loc_dn;  // per layer, 0 = query selection
  double total = 0.0;
};

template <typename T>
struct LossResult {
  Var<T> total;
  LossTerms terms;
};

// Sum over layers of cls * (L_cls + L_cls^dn) + loc * (L_loc + L_loc^dn);
// layer 0 has no denoising terms.
template <typename T>
LossResult<T> TotalLoss(const head::DecoderOutput<T>& out, const std::vector<AssignmentResult>& assign,
                        const std::vector<AssignmentResult>& dn_assign, const BBox& gt,
                        const LossWeights& w) {
  const std::size_t n_layers = out.layers.size() + 1;
  if (assign.size() != n_layers || (!dn_assign.empty() && dn_assign.size() != out.layers.size())) {
    throw ad::ShapeError("total loss: assignments do not cover every layer");
  }
  LossResult<T> r;
  std::vector<Var<T>> parts;
  auto add = [&](const Var<T>& cls, const Var<T>& loc, std::vector<double>& cls_log,
                 std::vector<double>& loc_log) {
    cls_log.push_back(static_cast<double>(cls.item()));
    loc_log.push_back(static_cast<double>(loc.item()));
    parts.push_back(ad::Add(ad::Scale(cls, static_cast<T>(w.cls)), ad::Scale(loc, static_cast<T>(w.loc))));
  };
  add(ClsLoss(out.layer0.scores, assign[0], w), LocLossMean(out.layer0.boxes, assign[0], gt, w),
      r.terms.cls, r.terms.loc);
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    const auto m = out.Matching(static_cast<int>(l));
    add(ClsLoss(m.scores, assign[l + 1], w), LocLossMean(m.boxes, assign[l + 1], gt, w), r.terms.cls,
        r.terms.loc);
    if (!dn_assign.empty()) {
      const auto d = out.Denoising(static_cast<int>(l));
      add(ClsLoss(d.scores, dn_assign[l], w), LocLossMean(d.boxes, dn_assign[l], gt, w), r.terms.cls_dn,
          r.terms.loc_dn);
    }
  }
  Var<T> total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = ad::Add(total, parts[i]);
  r.total = total;
  r.terms.total = static_cast<double>(total.item());
  return r;
}

}  // namespace detrack::train

#endif  // DETRACK_TRAINING_HPP_
