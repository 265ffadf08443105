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

// Self-checks shared by the command-line tool and the acceptance suite:
// finite-difference gradient checks over every differentiable operation and
// layer, denoising-mask isolation, and positive-noise containment.

#ifndef DETRACK_CHECKS_HPP_
#define DETRACK_CHECKS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "detrack/attention.hpp"
#include "detrack/autodiff.hpp"
#include "detrack/encoder.hpp"
#include "detrack/geometry.hpp"
#include "detrack/head.hpp"
#include "detrack/model.hpp"
#include "detrack/training.hpp"

namespace detrack::checks {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using Fn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

inline Tensor<double> RandomTensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = u(rng);
  return t;
}

inline enc::Image RandomImage(int channels, int side, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  enc::Image img(channels, side, side);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

inline enc::ImagePair RandomPair(const enc::EncoderConfig& cfg, std::mt19937_64& rng) {
  return {RandomImage(cfg.channels, cfg.template_size, rng), RandomImage(cfg.channels, cfg.search_size, rng)};
}

// Moves every parameter off initialization-induced kinks (zero biases feed
// ReLUs exactly at zero), so finite differences see a smooth neighborhood.
template <typename Store>
void Jitter(Store& store, std::mt19937_64& rng, double scale = 0.05) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto* p : store.All())
    for (auto& v : p->value.data) v += u(rng);
}

inline BBox RandomBox(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.4);
  return {c(rng), c(rng), s(rng), s(rng)};
}

// Small configurations for gradient checks and property sweeps.
inline enc::EncoderConfig TinyEncoder() {
  enc::EncoderConfig c;
  c.dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.mlp_ratio = 2;
  c.patch = 2;
  c.channels = 1;
  c.template_size = 4;
  c.search_size = 8;
  c.ce_layers = {1};
  c.keep_ratio = 0.5;
  return c;
}

inline head::HeadConfig TinyHead() {
  head::HeadConfig c;
  c.enc_dim = 8;
  c.dim = 8;
  c.heads = 2;
  c.points = 2;
  c.layers = 3;
  c.queries = 4;
  c.ffn = 16;
  return c;
}

// Weighted sum with fixed pseudo-random weights, so every output entry
// contributes a distinct amount to the checked scalar.
inline Var<double> Project(Tape<double>& tape, const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ad::Sum(ad::Mul(y, tape.Constant(RandomTensor(y.shape(), rng))));
}

struct OpCase {
  std::string name;
  ad::Shape shape;
  Fn f;
  double lo = -1.0, hi = 1.0;
};

// One case per primitive operation of the tape.
inline std::vector<OpCase> OpCases() {
  using namespace ad;  // NOLINT(build/namespaces)
  std::vector<OpCase> cases;
  cases.push_back({"add", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     std::mt19937_64 r(1);
                     return Project(t, Add(x, t.Constant(RandomTensor({4}, r))));
                   }});
  cases.push_back({"sub_bcast", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Sub(x, SliceCols(x, 0, 1)));
                   }});
  cases.push_back({"mul", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Mul(x, Transpose(Reshape(x, {4, 3}))));
                   }});
  cases.push_back({"div", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Div(x, AddScalar(Mul(x, x), 1.0)));
                   }});
  cases.push_back({"matmul", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Matmul(x, Transpose(x)));
                   }});
  cases.push_back({"matmul_nt", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     std::mt19937_64 r(2);
                     return Project(t, MatmulNT(x, Add(x, t.Constant(RandomTensor({3, 4}, r)))));
                   }});
  cases.push_back({"linear", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Linear(x, Reshape(SliceRows(x, 0, 2), {4, 2}),
                                              SliceCols(SliceRows(x, 2, 3), 0, 2)));
                   }});
  cases.push_back({"reshape_concat", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     const auto stacked = ConcatRows<double>({x, Scale(x, 2.0)});
                     return Project(t, ConcatCols<double>({Reshape(stacked, {4, 6}), Reshape(x, {4, 3})}));
                   }});
  cases.push_back({"slice_gather_scatter", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     const auto g = GatherRows(x, {2, 0, 2});
                     return Project(t, ScatterRows(SliceCols(g, 1, 3), {4, 0, 1}, 5));
                   }});
  cases.push_back({"softmax_rows", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Softmax(x, 1));
                   }});
  cases.push_back({"softmax_cols", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Softmax(x, 0));
                   }});
  cases.push_back({"masked_softmax", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, MaskedSoftmaxRows(x, {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1}));
                   }});
  cases.push_back({"sigmoid", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Sigmoid(Scale(x, 3.0)));
                   }});
  cases.push_back({"exp_log", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Log(AddScalar(Exp(x), 0.5)));
                   }});
  cases.push_back({"gelu", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Gelu(Scale(x, 2.0)));
                   }});
  cases.push_back({"relu", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Relu(x));
                   }});
  cases.push_back({"layer_norm", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     std::mt19937_64 r(3);
                     const auto g = t.Constant(RandomTensor({4}, r));
                     const auto b = t.Constant(RandomTensor({4}, r));
                     return Project(t, LayerNorm(x, g, b));
                   }});
  cases.push_back({"layer_norm_affine_grad", {2, 4}, [](Tape<double>& t, const Var<double>& x) {
                     std::mt19937_64 r(4);
                     const auto in = t.Constant(RandomTensor({3, 4}, r));
                     return Project(t, LayerNorm(in, SliceRows(x, 0, 1), SliceRows(x, 1, 2)));
                   }});
  cases.push_back({"masked_fill", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Mul(MaskedFill(x, {1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0}, 0.3), x));
                   }});
  cases.push_back({"abs_pow", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Project(t, Pow(Abs(x), 2.5));
                   }});
  cases.push_back({"min_max_clamp", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     const auto y = Transpose(Reshape(x, {4, 3}));
                     const auto y2 = Reshape(y, {3, 4});
                     return Project(t, Add(Minimum(x, y2), Maximum(Clamp(x, -0.5, 0.5), Scale(y2, 0.3))));
                   }});
  cases.push_back({"row_sum_mean", {3, 4}, [](Tape<double>& t, const Var<double>& x) {
                     return Add(Project(t, RowSum(Mul(x, x))), Mean(x));
                   }});
  return cases;
}

struct GradEntry {
  std::string name;
  ad::GradCheckResult result;  // worst over the trials
};

namespace internal {

inline void Keep(ad::GradCheckResult& worst, const ad::GradCheckResult& r) {
  if (!r.finite) {
    worst = r;
    return;
  }
  if (worst.finite && r.max_rel_error >= worst.max_rel_error) {
    const std::size_t checked = worst.checked;
    worst = r;
    worst.checked += checked;
  } else if (worst.finite) {
    worst.checked += r.checked;
  }
}

}  // namespace internal

// Finite-difference checks in double precision: every tape operation, the
// losses, the sampling and attention operators, and the encoder and decoder
// end to end on the tiny configuration.
inline std::vector<GradEntry> GradientSuite(int trials = 3) {
  using attn::FeatureMap;
  std::vector<GradEntry> out;
  auto add = [&](const std::string& name, const std::function<ad::GradCheckResult(int)>& run) {
    GradEntry e{name, {}};
    for (int t = 0; t < trials; ++t) internal::Keep(e.result, run(t));
    out.push_back(e);
  };

  for (const auto& c : OpCases()) {
    add("op/" + c.name, [&](int t) {
      std::mt19937_64 rng(1000 + t);
      return ad::GradCheck<double>(c.f, RandomTensor(c.shape, rng, c.lo, c.hi), 1e-6);
    });
  }

  add("qfl", [](int t) {
    std::mt19937_64 rng(10 + t);
    const auto s = RandomTensor({6, 1}, rng, 0.05, 0.95);
    const auto y = RandomTensor({6, 1}, rng, 0.0, 1.0).data;
    return ad::GradCheck<double>(
        [&](Tape<double>&, const Var<double>& x) { return ad::Sum(train::QflRows(x, y, 2.0)); }, s, 1e-6);
  });

  add("giou_l1", [](int t) {
    std::mt19937_64 rng(20 + t);
    std::vector<BBox> gt;
    Tensor<double> pred({5, 4});
    for (int i = 0; i < 5; ++i) {
      const BBox p = RandomBox(rng);
      pred.at(i, 0) = p.cx;
      pred.at(i, 1) = p.cy;
      pred.at(i, 2) = p.w;
      pred.at(i, 3) = p.h;
      gt.push_back(RandomBox(rng));
    }
    return ad::GradCheck<double>(
        [&](Tape<double>&, const Var<double>& x) { return ad::Sum(train::LocLossRows(x, gt, train::LossWeights{})); },
        pred, 1e-3, 4);
  });

  add("bilinear_sample", [](int t) {
    std::mt19937_64 rng(30 + t);
    const auto map = RandomTensor({12, 3}, rng);
    const auto pts = RandomTensor({5, 2}, rng, -0.8, 3.8);
    const auto mix = RandomTensor({5, 3}, rng);
    auto r = ad::GradCheck<double>(
        [&](Tape<double>& tp, const Var<double>& m) {
          return ad::Sum(ad::Mul(attn::BilinearSample(m, 3, 4, tp.Constant(pts)), tp.Constant(mix)));
        },
        map, 1e-6);
    internal::Keep(r, ad::GradCheck<double>(
                          [&](Tape<double>& tp, const Var<double>& p) {
                            return ad::Sum(ad::Mul(attn::BilinearSample(tp.Constant(map), 3, 4, p), tp.Constant(mix)));
                          },
                          pts, 1e-6));
    return r;
  });

  add("deformable_sample", [](int t) {
    const int H = 3, W = 4, M = 2, K = 2, D = 4, Q = 3;
    std::mt19937_64 rng(40 + t);
    const auto value = RandomTensor({H * W, D}, rng);
    const auto loc = RandomTensor({Q, M * K * 2}, rng, -0.7, 3.7);
    const auto weights = RandomTensor({Q, M * K}, rng, 0.0, 1.0);
    const auto mix = RandomTensor({Q, D}, rng);
    auto run = [&](Tape<double>& tp, const Var<double>& v, const Var<double>& l, const Var<double>& a) {
      return ad::Sum(ad::Mul(attn::DeformSample(v, H, W, M, K, l, a), tp.Constant(mix)));
    };
    auto r = ad::GradCheck<double>(
        [&](Tape<double>& tp, const Var<double>& v) { return run(tp, v, tp.Constant(loc), tp.Constant(weights)); },
        value, 1e-6);
    internal::Keep(r, ad::GradCheck<double>(
                          [&](Tape<double>& tp, const Var<double>& l) {
                            return run(tp, tp.Constant(value), l, tp.Constant(weights));
                          },
                          loc, 1e-6));
    internal::Keep(r, ad::GradCheck<double>(
                          [&](Tape<double>& tp, const Var<double>& a) {
                            return run(tp, tp.Constant(value), tp.Constant(loc), a);
                          },
                          weights, 1e-6));
    return r;
  });

  add("deformable_attention", [](int t) {
    const int H = 4, W = 4, D = 4;
    std::mt19937_64 rng(50 + t);
    nn::ParameterStore<double> store;
    auto w = attn::DeformAttnWeights<double>::Create(store, "da", "decoder", {2, 2, D}, rng);
    for (auto& v : w.offsets.weight->value.data) v = std::uniform_real_distribution<>(-0.5, 0.5)(rng);
    for (auto& v : w.weights.weight->value.data) v = std::uniform_real_distribution<>(-1, 1)(rng);
    const auto feats = RandomTensor({10, D}, rng);
    const std::vector<int> cells = {0, 1, 3, 4, 6, 7, 9, 11, 12, 15};
    const auto z = RandomTensor({2, D}, rng);
    const std::vector<BBox> refs = {{0.45, 0.55, 0.5, 0.4}, {0.3, 0.35, 0.35, 0.6}};
    auto run = [&](Tape<double>& tp, const Var<double>& zq, const Var<double>& x) {
      const FeatureMap<double> fm{x, cells, H, W};
      return ad::Sum(ad::Mul(attn::DeformAttn(tp, zq, refs, fm, w), ad::AddScalar(zq, 0.5)));
    };
    auto r = ad::GradCheck<double>(
        [&](Tape<double>& tp, const Var<double>& zq) { return run(tp, zq, tp.Constant(feats)); }, z, 1e-6);
    internal::Keep(r, ad::GradCheck<double>(
                          [&](Tape<double>& tp, const Var<double>& x) { return run(tp, tp.Constant(z), x); },
                          feats, 1e-6));
    internal::Keep(r, ad::GradCheckParams<double>(
                          [&](Tape<double>& tp) { return run(tp, tp.Constant(z), tp.Constant(feats)); },
                          store.All(), 1e-6, 8, static_cast<std::uint64_t>(t)));
    return r;
  });

  add("mhsa", [](int t) {
    std::mt19937_64 rng(60 + t);
    nn::ParameterStore<double> store;
    const auto w = attn::MhsaWeights<double>::Create(store, "sa", "g", 4, 2, rng);
    const auto x = RandomTensor({3, 4}, rng);
    const auto mix = RandomTensor({3, 4}, rng);
    Tensor<double> mask({3, 3}, 0.0);
    mask.at(0, 2) = attn::kBlockedMask;
    auto f = [&](Tape<double>& tp, const Var<double>& xv) {
      return ad::Sum(ad::Mul(attn::Mhsa(tp, xv, xv, xv, w, &mask), tp.Constant(mix)));
    };
    auto r = ad::GradCheck<double>(f, x, 1e-6);
    internal::Keep(r, ad::GradCheckParams<double>([&](Tape<double>& tp) { return f(tp, tp.Constant(x)); },
                                                  store.All(), 1e-3, 8, static_cast<std::uint64_t>(t), 4));
    return r;
  });

  add("encoder_end_to_end", [](int t) {
    std::mt19937_64 rng(70 + t);
    const auto cfg = TinyEncoder();
    nn::ParameterStore<double> store;
    const auto w = enc::EncoderWeights<double>::Create(store, cfg, rng);
    Jitter(store, rng);
    const auto pair = RandomPair(cfg, rng);
    const auto mix = RandomTensor(
        {cfg.TemplateTokens() + enc::KeepCount(cfg.SearchTokens(), cfg.keep_ratio), cfg.dim}, rng);
    auto f = [&](Tape<double>& tp) {
      const auto o = enc::Encode(tp, enc::PatchifyAndEmbed(tp, pair, w), w);
      return ad::Sum(ad::Mul(o.features, tp.Constant(mix)));
    };
    return ad::GradCheckParams<double>(f, store.All(), 1e-3, 6, static_cast<std::uint64_t>(t), 4);
  });

  add("decoder_end_to_end", [](int t) {
    std::mt19937_64 rng(80 + t);
    nn::ParameterStore<double> store;
    const auto w = head::HeadWeights<double>::Create(store, TinyHead(), rng);
    Jitter(store, rng);
    enc::TokenSet<double> tokens;
    tokens.n_template = 2;
    tokens.grid = {4, 4, 2};
    tokens.search_cells = {0, 2, 3, 5, 6, 9, 10, 12, 15};
    const auto feats = RandomTensor({2 + tokens.n_kept(), 8}, rng);
    const auto mix0 = RandomTensor({tokens.n_kept(), 5}, rng);
    const auto mix = RandomTensor({4, 5}, rng);
    auto f = [&](Tape<double>& tp) {
      auto tk = tokens;
      tk.features = tp.Constant(feats);
      const auto o = head::Forward(tp, tk, w, 3);
      Var<double> acc = ad::Sum(
          ad::Mul(ad::ConcatCols<double>({o.layer0.boxes, o.layer0.scores}), tp.Constant(mix0)));
      for (const auto& l : o.layers)
        acc = ad::Add(acc, ad::Sum(ad::Mul(ad::ConcatCols<double>({l.boxes, l.scores}), tp.Constant(mix))));
      return acc;
    };
    return ad::GradCheckParams<double>(f, store.All(), 1e-3, 4, static_cast<std::uint64_t>(t), 4);
  });
  return out;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Decoder outputs (boxes then scores, per layer) of the tiny model with the
// given denoising queries in front of the matching queries.
struct DnProbe {
  Model<double> model;
  enc::ImagePair pair;
  Tensor<double> content, refs, mask;
  int n_dn = 0, per_group = 0, n_matching = 0;

  std::vector<std::vector<double>> Run(const Tensor<double>& c, const Tensor<double>& r) const {
    Tape<double> tape;
    const auto tokens = model.Encode(tape, pair);
    auto out = head::Select(tape, tokens, model.head);
    head::DenoisingInput<double> dn{{tape.Constant(c), tape.Constant(r)}, mask};
    head::Decode(tape, out, tokens, model.head, model.cfg.head.layers, &dn);
    std::vector<std::vector<double>> v;
    for (const auto& p : out.layers) {
      v.push_back(p.boxes.value());
      v.push_back(p.scores.value());
    }
    return v;
  }
};

inline DnProbe MakeDnProbe(std::uint64_t seed, int groups = 3) {
  config::ModelConfig mc;
  mc.encoder = TinyEncoder();
  mc.head = TinyHead();
  std::mt19937_64 rng(seed);
  DnProbe p{Model<double>::Create(mc, seed), RandomPair(mc.encoder, rng), {}, {}, {}};
  train::DenoisingConfig dc;
  dc.groups = groups;
  Tape<double> tape;
  const auto tokens = p.model.Encode(tape, p.pair);
  const auto out = head::Select(tape, tokens, p.model.head);
  const auto batch = train::GenDenoisingBatch(RandomBox(rng), out.token_centers, dc, rng);
  const auto in = train::MakeDenoisingInput(tape, batch, out.projected, out.n_matching());
  p.content = in.queries.content.ToTensor();
  p.refs = in.queries.refs.ToTensor();
  p.mask = in.mask;
  p.n_dn = batch.size();
  p.per_group = batch.size() / groups;
  p.n_matching = out.n_matching();
  return p;
}

// Perturbs each denoising query's content and reference box in turn and
// measures how far every other group's rows and the matching rows move.
inline Outcome DnIsolation(std::uint64_t seed = 1) {
  const DnProbe p = MakeDnProbe(seed);
  const auto base = p.Run(p.content, p.refs);
  const int n = p.n_dn + p.n_matching;
  double leak = 0, self = std::numeric_limits<double>::infinity();
  for (int i = 0; i < p.n_dn; ++i) {
    auto c = p.content;
    auto r = p.refs;
    for (int k = 0; k < c.cols(); ++k) c.at(i, k) += 0.7;
    r.at(i, 0) = std::clamp(r.at(i, 0) + 0.05, 0.0, 1.0);
    const auto pert = p.Run(c, r);
    double moved = 0;
    for (std::size_t l = 0; l < base.size(); ++l) {
      const int width = static_cast<int>(base[l].size()) / n;
      for (int row = 0; row < n; ++row) {
        for (int k = 0; k < width; ++k) {
          const std::size_t at = static_cast<std::size_t>(row * width + k);
          const double d = std::abs(base[l][at] - pert[l][at]);
          if (row < p.n_dn && row / p.per_group == i / p.per_group) {
            moved = std::max(moved, d);
          } else {
            leak = std::max(leak, d);
          }
        }
      }
    }
    self = std::min(self, moved);
  }
  Outcome o;
  o.pass = leak < 1e-10 && self > 1e-8;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max change outside the perturbed group %.3g, min change inside %.3g", leak, self);
  o.detail = buf;
  return o;
}

// Positive denoising centers generated for random GT boxes must lie inside
// the GT box for every center-shift scale.
inline Outcome PositiveContainment(int samples = 10000, std::uint64_t seed = 1,
                                   const std::vector<double>& scales = {0.2, 0.4, 0.8}) {
  std::mt19937_64 rng(seed);
  const auto centers = TokenCenters(GridSpec{8, 8, 1});
  Outcome o{true, ""};
  for (double l1 : scales) {
    auto dc = train::DenoisingConfig::WithScales(l1, 0.4);
    dc.groups = 1;
    int inside = 0, positives = 0;
    for (int s = 0; s < samples; ++s) {
      const BBox gt = RandomBox(rng);
      const auto b = train::GenDenoisingBatch(gt, centers, dc, rng);
      for (int i = 0; i < b.size(); ++i) {
        if (!b.positive[static_cast<std::size_t>(i)]) continue;
        ++positives;
        const BBox& q = b.boxes[static_cast<std::size_t>(i)];
        inside += Contains(gt, q.cx, q.cy) ? 1 : 0;
      }
    }
    o.pass = o.pass && positives == samples && inside == positives;
    o.detail += (o.detail.empty() ? "" : ", ") + std::string("lambda1 ") + std::to_string(l1).substr(0, 3) + ": " +
                std::to_string(inside) + "/" + std::to_string(positives);
  }
  return o;
}

}  // namespace detrack::checks

#endif  // DETRACK_CHECKS_HPP_
