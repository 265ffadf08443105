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

// Multi-head self-attention and single-scale deformable attention.
//
// Feature maps are stored position-major: a map of C channels over an
// H x W grid is an (H*W, C) array whose row r*W + c is grid node (r, c).
// Continuous sampling points use pixel coordinates (x, y) in which node
// (r, c) sits exactly at (c, r). Samples outside the grid read zeros.

#ifndef DETRACK_ATTENTION_HPP_
#define DETRACK_ATTENTION_HPP_

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "detrack/autodiff.hpp"
#include "detrack/geometry.hpp"
#include "detrack/nn.hpp"

namespace detrack::attn {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// Additive mask value for a blocked key; anything at or below half of it
// counts as blocked and receives exactly zero attention.
inline constexpr double kBlockedMask = -1e9;
inline bool IsBlocked(double mask_value) { return mask_value <= 0.5 * kBlockedMask; }

namespace internal {

struct Corner {
  long index;  // row in the (H*W, C) map, -1 when outside
  double weight;
};

struct Stencil {
  Corner c[4];  // (x0,y0) (x0+1,y0) (x0,y0+1) (x0+1,y0+1)
  long x0, y0;
  double fx, fy;
};

inline Stencil MakeStencil(double x, double y, int height, int width) {
  Stencil s;
  const double xf = std::floor(x), yf = std::floor(y);
  s.fx = x - xf;
  s.fy = y - yf;
  s.x0 = static_cast<long>(xf);
  s.y0 = static_cast<long>(yf);
  const long xs[4] = {s.x0, s.x0 + 1, s.x0, s.x0 + 1};
  const long ys[4] = {s.y0, s.y0, s.y0 + 1, s.y0 + 1};
  const double ws[4] = {(1 - s.fx) * (1 - s.fy), s.fx * (1 - s.fy), (1 - s.fx) * s.fy, s.fx * s.fy};
  for (int k = 0; k < 4; ++k) {
    const bool inside = xs[k] >= 0 && xs[k] < width && ys[k] >= 0 && ys[k] < height;
    s.c[k] = {inside ? ys[k] * width + xs[k] : -1L, ws[k]};
  }
  return s;
}

// Adds d(sample)/d(x, y) . grad_out to gx, gy, for one channel block.
template <typename T>
void StencilPointGrad(const Stencil& s, const T* map, int stride, int c0, int n, const T* gout,
                      double& gx, double& gy) {
  for (int c = 0; c < n; ++c) {
    const double v[4] = {
        s.c[0].index >= 0 ? static_cast<double>(map[s.c[0].index * stride + c0 + c]) : 0.0,
        s.c[1].index >= 0 ? static_cast<double>(map[s.c[1].index * stride + c0 + c]) : 0.0,
        s.c[2].index >= 0 ? static_cast<double>(map[s.c[2].index * stride + c0 + c]) : 0.0,
        s.c[3].index >= 0 ? static_cast<double>(map[s.c[3].index * stride + c0 + c]) : 0.0};
    const double g = static_cast<double>(gout[c]);
    gx += g * ((1 - s.fy) * (v[1] - v[0]) + s.fy * (v[3] - v[2]));
    gy += g * ((1 - s.fx) * (v[2] - v[0]) + s.fx * (v[3] - v[1]));
  }
}

}  // namespace internal

// Bilinear interpolation of an (H*W, C) map at P pixel-coordinate points
// (shape (P, 2), columns x then y). Differentiable in the map and the points.
template <typename T>
Var<T> BilinearSample(const Var<T>& map, int height, int width, const Var<T>& points) {
  if (map.rows() != height * width) {
    throw ad::ShapeError("bilinear_sample: map " + ad::ShapeString(map.shape()) +
                         " is not a " + std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  if (points.cols() != 2) {
    throw ad::ShapeError("bilinear_sample: points must be (P, 2), got " + ad::ShapeString(points.shape()));
  }
  Tape<T>& tape = ad::internal::SameTape(map, points);
  const int C = map.cols(), P = points.rows();
  const auto& mv = map.value();
  const auto& pv = points.value();
  std::vector<internal::Stencil> st(static_cast<std::size_t>(P));
  std::vector<T> out(static_cast<std::size_t>(P) * C, T(0));
  for (int p = 0; p < P; ++p) {
    st[p] = internal::MakeStencil(pv[2 * p], pv[2 * p + 1], height, width);
    T* o = out.data() + static_cast<std::size_t>(p) * C;
    for (const auto& cr : st[p].c) {
      if (cr.index < 0) continue;
      const T w = static_cast<T>(cr.weight);
      const T* src = mv.data() + cr.index * C;
      for (int c = 0; c < C; ++c) o[c] += w * src[c];
    }
  }
  tape.AddMacs(4ULL * P * C);
  const int mid = map.id(), pid = points.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({P, C}, std::move(out), {map, points}, [=, st = std::move(st)](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& mn = t.node(mid);
    auto& pn = t.node(pid);
    for (int p = 0; p < P; ++p) {
      const T* g = o.grad.data() + static_cast<std::size_t>(p) * C;
      if (mn.requires_grad) {
        for (const auto& cr : st[p].c) {
          if (cr.index < 0) continue;
          T* dst = mn.grad.data() + cr.index * C;
          const T w = static_cast<T>(cr.weight);
          for (int c = 0; c < C; ++c) dst[c] += w * g[c];
        }
      }
      if (pn.requires_grad) {
        double gx = 0, gy = 0;
        internal::StencilPointGrad(st[p], mn.value.data(), C, 0, C, g, gx, gy);
        pn.grad[2 * p] += static_cast<T>(gx);
        pn.grad[2 * p + 1] += static_cast<T>(gy);
      }
    }
  });
}

// Fused multi-head sampling and weighting:
//   out[q, m*Dh + c] = sum_k weights[q, m*K + k] * sample(value[:, m*Dh + c], loc[q, m, k])
// value: (H*W, D) with D = n_heads * Dh; locations: (Q, n_heads*K*2) pixel
// coordinates ordered (head, point, xy); weights: (Q, n_heads*K).
template <typename T>
Var<T> DeformSample(const Var<T>& value, int height, int width, int n_heads, int n_points,
                    const Var<T>& locations, const Var<T>& weights) {
  const int D = value.cols(), Q = locations.rows();
  if (value.rows() != height * width || D % n_heads != 0 ||
      locations.cols() != n_heads * n_points * 2 || weights.rows() != Q ||
      weights.cols() != n_heads * n_points) {
    throw ad::ShapeError("deform_sample: value " + ad::ShapeString(value.shape()) + ", locations " +
                         ad::ShapeString(locations.shape()) + ", weights " +
                         ad::ShapeString(weights.shape()));
  }
  Tape<T>& tape = ad::internal::SameTape(value, locations);
  const int Dh = D / n_heads, M = n_heads, K = n_points;
  const auto& vv = value.value();
  const auto& lv = locations.value();
  const auto& wv = weights.value();
  std::vector<internal::Stencil> st(static_cast<std::size_t>(Q) * M * K);
  std::vector<T> out(static_cast<std::size_t>(Q) * D, T(0));
  std::vector<T> sample(static_cast<std::size_t>(Dh));
  for (int q = 0; q < Q; ++q) {
    for (int m = 0; m < M; ++m) {
      T* o = out.data() + static_cast<std::size_t>(q) * D + m * Dh;
      for (int k = 0; k < K; ++k) {
        const std::size_t sk = (static_cast<std::size_t>(q) * M + m) * K + k;
        st[sk] = internal::MakeStencil(lv[2 * sk], lv[2 * sk + 1], height, width);
        std::fill(sample.begin(), sample.end(), T(0));
        for (const auto& cr : st[sk].c) {
          if (cr.index < 0) continue;
          const T w = static_cast<T>(cr.weight);
          const T* src = vv.data() + cr.index * D + m * Dh;
          for (int c = 0; c < Dh; ++c) sample[c] += w * src[c];
        }
        const T a = wv[static_cast<std::size_t>(q) * M * K + m * K + k];
        for (int c = 0; c < Dh; ++c) o[c] += a * sample[c];
      }
    }
  }
  tape.AddMacs(5ULL * Q * M * K * Dh);
  const int vid = value.id(), lid = locations.id(), wid = weights.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({Q, D}, std::move(out), {value, locations, weights},
                     [=, st = std::move(st)](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& vn = t.node(vid);
    auto& ln = t.node(lid);
    auto& wn = t.node(wid);
    for (int q = 0; q < Q; ++q) {
      for (int m = 0; m < M; ++m) {
        const T* g = o.grad.data() + static_cast<std::size_t>(q) * D + m * Dh;
        for (int k = 0; k < K; ++k) {
          const std::size_t sk = (static_cast<std::size_t>(q) * M + m) * K + k;
          const std::size_t wi = static_cast<std::size_t>(q) * M * K + m * K + k;
          const auto& s = st[sk];
          const T a = wn.value[wi];
          if (wn.requires_grad) {
            double acc = 0;
            for (const auto& cr : s.c) {
              if (cr.index < 0) continue;
              const T* src = vn.value.data() + cr.index * D + m * Dh;
              double dot = 0;
              for (int c = 0; c < Dh; ++c) dot += static_cast<double>(src[c]) * g[c];
              acc += cr.weight * dot;
            }
            wn.grad[wi] += static_cast<T>(acc);
          }
          if (vn.requires_grad) {
            for (const auto& cr : s.c) {
              if (cr.index < 0) continue;
              T* dst = vn.grad.data() + cr.index * D + m * Dh;
              const T w = static_cast<T>(cr.weight) * a;
              for (int c = 0; c < Dh; ++c) dst[c] += w * g[c];
            }
          }
          if (ln.requires_grad) {
            double gx = 0, gy = 0;
            internal::StencilPointGrad(s, vn.value.data(), D, m * Dh, Dh, g, gx, gy);
            ln.grad[2 * sk] += static_cast<T>(a * gx);
            ln.grad[2 * sk + 1] += static_cast<T>(a * gy);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention.

template <typename T>
struct MhsaWeights {
  nn::LinearLayer<T> q, k, v, o;
  int n_heads = 1;

  static MhsaWeights Create(nn::ParameterStore<T>& store, const std::string& name,
                            const std::string& group, int dim, int n_heads, std::mt19937_64& rng) {
    if (n_heads < 1 || dim % n_heads != 0) {
      throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    MhsaWeights w;
    w.q = nn::LinearLayer<T>::Create(store, name + ".q", group, dim, dim, rng);
    // A key bias shifts every score of a query equally and cancels in the
    // softmax, so keys have none.
    w.k = nn::LinearLayer<T>::Create(store, name + ".k", group, dim, dim, rng, 1.0, false);
    w.v = nn::LinearLayer<T>::Create(store, name + ".v", group, dim, dim, rng);
    w.o = nn::LinearLayer<T>::Create(store, name + ".o", group, dim, dim, rng);
    w.n_heads = n_heads;
    return w;
  }
};

// Attention of `queries` over `keys`/`values` (rows are tokens). The optional
// additive mask is (Nq, Nk); blocked entries get zero weight and a query
// with every key blocked produces a zero attention vector. When `probs` is
// given it receives the attention weights, head-major (heads, Nq, Nk).
template <typename T>
Var<T> Mhsa(Tape<T>& tape, const Var<T>& queries, const Var<T>& keys, const Var<T>& values,
            const MhsaWeights<T>& w, const Tensor<T>* additive_mask = nullptr,
            std::vector<T>* probs = nullptr) {
  const int nq = queries.rows(), nk = keys.rows();
  if (values.rows() != nk) {
    throw ad::ShapeError("mhsa: keys " + ad::ShapeString(keys.shape()) + " and values " +
                         ad::ShapeString(values.shape()) + " differ in length");
  }
  if (additive_mask != nullptr && (additive_mask->rows() != nq || additive_mask->cols() != nk)) {
    throw ad::ShapeError("mhsa: mask " + ad::ShapeString(additive_mask->shape) + " for " +
                         std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");
  }
  const Var<T> q = w.q(tape, queries);
  const Var<T> k = w.k(tape, keys);
  const Var<T> v = w.v(tape, values);
  const int dim = q.cols(), dh = dim / w.n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<std::uint8_t> allowed;
  Var<T> bias;
  if (additive_mask != nullptr) {
    allowed.resize(additive_mask->size());
    std::vector<T> finite(additive_mask->size());
    bool any_bias = false;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      const double m = static_cast<double>(additive_mask->data[i]);
      allowed[i] = IsBlocked(m) ? 0 : 1;
      finite[i] = allowed[i] ? additive_mask->data[i] : T(0);
      any_bias = any_bias || finite[i] != T(0);
    }
    if (any_bias) bias = tape.Constant({nq, nk}, std::move(finite));
  }
  if (probs != nullptr) probs->clear();

  std::vector<Var<T>> heads;
  heads.reserve(static_cast<std::size_t>(w.n_heads));
  for (int h = 0; h < w.n_heads; ++h) {
    const Var<T> qh = w.n_heads == 1 ? q : ad::SliceCols(q, h * dh, (h + 1) * dh);
    const Var<T> kh = w.n_heads == 1 ? k : ad::SliceCols(k, h * dh, (h + 1) * dh);
    const Var<T> vh = w.n_heads == 1 ? v : ad::SliceCols(v, h * dh, (h + 1) * dh);
    Var<T> scores = ad::Scale(ad::MatmulNT(qh, kh), scale);
    if (bias.valid()) scores = ad::Add(scores, bias);
    const Var<T> p = additive_mask != nullptr ? ad::MaskedSoftmaxRows(scores, allowed)
                                              : ad::Softmax(scores, 1);
    if (probs != nullptr) probs->insert(probs->end(), p.value().begin(), p.value().end());
    heads.push_back(ad::Matmul(p, vh));
  }
  const Var<T> joined = w.n_heads == 1 ? heads.front() : ad::ConcatCols(heads);
  return w.o(tape, joined);
}

// ---------------------------------------------------------------------------
// Deformable attention.

struct DeformAttnConfig {
  int n_heads = 4;
  int n_points = 4;
  int model_dim = 32;

  int head_dim() const { return model_dim / n_heads; }

  void Validate() const {
    if (n_heads < 1 || n_points < 1 || model_dim < 1 || model_dim % n_heads != 0) {
      throw ConfigError("deformable attention: need heads >= 1, points >= 1 and model_dim (" +
                        std::to_string(model_dim) + ") divisible by heads (" +
                        std::to_string(n_heads) + ")");
    }
  }
};

template <typename T>
struct DeformAttnWeights {
  DeformAttnConfig cfg;
  nn::LinearLayer<T> offsets;  // D -> heads*points*2, in units of half the box size
  nn::LinearLayer<T> weights;  // D -> heads*points, softmax over points
  nn::LinearLayer<T> value;    // W'
  nn::LinearLayer<T> output;   // W

  static DeformAttnWeights Create(nn::ParameterStore<T>& store, const std::string& name,
                                  const std::string& group, const DeformAttnConfig& cfg,
                                  std::mt19937_64& rng) {
    cfg.Validate();
    DeformAttnWeights w;
    w.cfg = cfg;
    const int mk = cfg.n_heads * cfg.n_points;
    w.offsets = nn::LinearLayer<T>::Create(store, name + ".offsets", group, cfg.model_dim, 2 * mk, rng);
    w.weights = nn::LinearLayer<T>::Create(store, name + ".weights", group, cfg.model_dim, mk, rng);
    w.value = nn::LinearLayer<T>::Create(store, name + ".value", group, cfg.model_dim, cfg.model_dim, rng);
    w.output = nn::LinearLayer<T>::Create(store, name + ".output", group, cfg.model_dim, cfg.model_dim, rng);
    // Start with uniform point weights and points fanned out radially per
    // head, reaching the box border at the last point.
    w.weights.SetZero();
    w.offsets.SetZero();
    auto& b = w.offsets.bias->value.data;
    for (int m = 0; m < cfg.n_heads; ++m) {
      const double theta = 2.0 * std::numbers::pi * m / cfg.n_heads;
      double dx = std::cos(theta), dy = std::sin(theta);
      const double norm = std::max(std::abs(dx), std::abs(dy));
      dx /= norm;
      dy /= norm;
      for (int k = 0; k < cfg.n_points; ++k) {
        const double r = static_cast<double>(k + 1) / cfg.n_points;
        b[2 * (m * cfg.n_points + k)] = static_cast<T>(r * dx);
        b[2 * (m * cfg.n_points + k) + 1] = static_cast<T>(r * dy);
      }
    }
    return w;
  }
};

// Sparse search features as a 2-D map: `tokens` (N_kept, C) sit at grid cells
// `cells`; every other cell reads as zero.
template <typename T>
struct FeatureMap {
  Var<T> tokens;
  std::vector<int> cells;
  int height = 0;
  int width = 0;
};

// Boxes as an (n, 4) constant of cxcywh rows.
template <typename T>
Var<T> BoxesToVar(Tape<T>& tape, const std::vector<BBox>& boxes) {
  std::vector<T> v;
  v.reserve(4 * boxes.size());
  for (const auto& b : boxes) {
    v.push_back(static_cast<T>(b.cx));
    v.push_back(static_cast<T>(b.cy));
    v.push_back(static_cast<T>(b.w));
    v.push_back(static_cast<T>(b.h));
  }
  return tape.Constant({static_cast<int>(boxes.size()), 4}, std::move(v));
}

// Pixel-coordinate sampling locations for every (query, head, point):
// the reference box center displaced by offsets scaled with half the box
// size. Differentiable in both the offsets and the reference boxes (n, 4).
template <typename T>
Var<T> SamplingLocations(const Var<T>& raw_offsets, const Var<T>& refs, int height, int width) {
  Tape<T>& tape = ad::internal::SameTape(raw_offsets, refs);
  const int Q = raw_offsets.rows(), n = raw_offsets.cols();
  if (refs.rows() != Q || refs.cols() != 4 || n % 2 != 0) {
    throw ad::ShapeError("deform_attn: reference boxes " + ad::ShapeString(refs.shape()) +
                         " for offsets " + ad::ShapeString(raw_offsets.shape()));
  }
  const auto& rv = raw_offsets.value();
  const auto& bv = refs.value();
  const T W = static_cast<T>(width), H = static_cast<T>(height);
  std::vector<T> out(rv.size());
  for (int q = 0; q < Q; ++q) {
    const T* b = &bv[static_cast<std::size_t>(q) * 4];
    for (int j = 0; j < n; j += 2) {
      const std::size_t i = static_cast<std::size_t>(q) * n + j;
      out[i] = rv[i] * (T(0.5) * b[2] * W) + (b[0] * W - T(0.5));
      out[i + 1] = rv[i + 1] * (T(0.5) * b[3] * H) + (b[1] * H - T(0.5));
    }
  }
  const int rid = raw_offsets.id(), bid = refs.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({Q, n}, std::move(out), {raw_offsets, refs}, [=](Tape<T>& t) {
    const auto& g = t.node(oid).grad;
    auto& rn = t.node(rid);
    auto& bn = t.node(bid);
    for (int q = 0; q < Q; ++q) {
      const std::size_t bq = static_cast<std::size_t>(q) * 4;
      for (int j = 0; j < n; j += 2) {
        const std::size_t i = static_cast<std::size_t>(q) * n + j;
        if (rn.requires_grad) {
          rn.grad[i] += g[i] * T(0.5) * bn.value[bq + 2] * W;
          rn.grad[i + 1] += g[i + 1] * T(0.5) * bn.value[bq + 3] * H;
        }
        if (bn.requires_grad) {
          bn.grad[bq] += g[i] * W;
          bn.grad[bq + 1] += g[i + 1] * H;
          bn.grad[bq + 2] += g[i] * T(0.5) * rn.value[i] * W;
          bn.grad[bq + 3] += g[i + 1] * T(0.5) * rn.value[i + 1] * H;
        }
      }
    }
  });
}

template <typename T>
Var<T> SamplingLocations(Tape<T>& tape, const Var<T>& raw_offsets, const std::vector<BBox>& refs,
                         int height, int width) {
  if (static_cast<int>(refs.size()) != raw_offsets.rows()) {
    throw ad::ShapeError("deform_attn: " + std::to_string(refs.size()) + " reference boxes for " +
                         std::to_string(raw_offsets.rows()) + " queries");
  }
  return SamplingLocations(raw_offsets, BoxesToVar(tape, refs), height, width);
}

// Deformable attention of Q queries (rows of z_q) with reference boxes
// `refs` (Q, 4) over a sparse feature map.
template <typename T>
Var<T> DeformAttn(Tape<T>& tape, const Var<T>& z_q, const Var<T>& refs, const FeatureMap<T>& x,
                  const DeformAttnWeights<T>& w) {
  const auto& cfg = w.cfg;
  const int Q = z_q.rows();
  const Var<T> projected = w.value(tape, x.tokens);
  const Var<T> value_map = ad::ScatterRows(projected, x.cells, x.height * x.width);
  const Var<T> raw = w.offsets(tape, z_q);
  const Var<T> loc = SamplingLocations(raw, refs, x.height, x.width);
  Var<T> a = w.weights(tape, z_q);
  a = ad::Reshape(a, {Q * cfg.n_heads, cfg.n_points});
  a = ad::Softmax(a, 1);
  a = ad::Reshape(a, {Q, cfg.n_heads * cfg.n_points});
  const Var<T> sampled =
      DeformSample(value_map, x.height, x.width, cfg.n_heads, cfg.n_points, loc, a);
  return w.output(tape, sampled);
}

template <typename T>
Var<T> DeformAttn(Tape<T>& tape, const Var<T>& z_q, const std::vector<BBox>& refs,
                  const FeatureMap<T>& x, const DeformAttnWeights<T>& w) {
  if (static_cast<int>(refs.size()) != z_q.rows()) {
    throw ad::ShapeError("deform_attn: " + std::to_string(refs.size()) + " reference boxes for " +
                         std::to_string(z_q.rows()) + " queries");
  }
  return DeformAttn(tape, z_q, BoxesToVar(tape, refs), x, w);
}

}  // namespace detrack::attn

#endif  // DETRACK_ATTENTION_HPP_
