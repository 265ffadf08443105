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

// Query selection and the deformable transformer decoder with layer-wise
// box refinement.

#ifndef DETRACK_HEAD_HPP_
#define DETRACK_HEAD_HPP_

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "detrack/attention.hpp"
#include "detrack/autodiff.hpp"
#include "detrack/encoder.hpp"
#include "detrack/geometry.hpp"
#include "detrack/nn.hpp"

namespace detrack::head {

using ad::Tape;
using ad::Tensor;
using ad::Var;

struct HeadConfig {
  int enc_dim = 64;
  int dim = 32;
  int heads = 4;
  int points = 4;
  int layers = 3;  // layers trained
  int queries = 16;
  int ffn = 128;
  double anchor_size = 0.25;  // side of the anchor boxes at token centers
  bool detach_refs = false;   // stop gradients through reference boxes

  attn::DeformAttnConfig Deform() const { return {heads, points, dim}; }

  void Validate() const {
    if (enc_dim < 1 || dim < 8 || dim % 8 != 0) {
      throw ConfigError("decoder dim must be a positive multiple of 8, got " + std::to_string(dim));
    }
    if (layers < 1) throw ConfigError("decoder needs at least one layer");
    if (queries < 1) throw ConfigError("query count must be at least 1");
    if (ffn < 1) throw ConfigError("ffn width must be positive");
    if (!(anchor_size > 0.0 && anchor_size <= 1.0)) throw ConfigError("anchor size must lie in (0, 1]");
    Deform().Validate();
  }
};

template <typename T>
struct DecoderLayerWeights {
  attn::MhsaWeights<T> self_attn;
  nn::LayerNormLayer<T> ln1;
  attn::DeformAttnWeights<T> cross_attn;
  nn::LayerNormLayer<T> ln2;
  nn::Mlp<T> ffn;
  nn::LayerNormLayer<T> ln3;
};

template <typename T>
struct HeadWeights {
  HeadConfig cfg;
  nn::LinearLayer<T> project;
  nn::LinearLayer<T> select_score;
  nn::Mlp<T> select_box;
  std::vector<DecoderLayerWeights<T>> layers;
  nn::Mlp<T> box_offset;     // shared by all decoder layers
  nn::LinearLayer<T> score;  // shared by all decoder layers

  static HeadWeights Create(nn::ParameterStore<T>& store, const HeadConfig& cfg,
                            std::mt19937_64& rng, const std::string& group = "decoder") {
    cfg.Validate();
    HeadWeights w;
    w.cfg = cfg;
    const int d = cfg.dim;
    w.project = nn::LinearLayer<T>::Create(store, "head.project", group, cfg.enc_dim, d, rng);
    w.select_score = nn::LinearLayer<T>::Create(store, "head.select.score", group, d, 1, rng);
    w.select_box = nn::Mlp<T>::Create(store, "head.select.box", group, {d, d, d, 4}, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "head.layer" + std::to_string(l);
      DecoderLayerWeights<T> layer;
      layer.self_attn = attn::MhsaWeights<T>::Create(store, p + ".self_attn", group, d, cfg.heads, rng);
      layer.ln1 = nn::LayerNormLayer<T>::Create(store, p + ".ln1", group, d);
      layer.cross_attn =
          attn::DeformAttnWeights<T>::Create(store, p + ".cross_attn", group, cfg.Deform(), rng);
      layer.ln2 = nn::LayerNormLayer<T>::Create(store, p + ".ln2", group, d);
      layer.ffn = nn::Mlp<T>::Create(store, p + ".ffn", group, {d, cfg.ffn, d}, rng);
      layer.ln3 = nn::LayerNormLayer<T>::Create(store, p + ".ln3", group, d);
      w.layers.push_back(std::move(layer));
    }
    w.box_offset = nn::Mlp<T>::Create(store, "head.box_offset", group, {d, d, d, 4}, rng);
    w.score = nn::LinearLayer<T>::Create(store, "head.score", group, d, 1, rng);
    // Small initial offsets keep early refinements near the proposals.
    for (T& v : w.box_offset.layers.back().weight->value.data) v *= T(0.1);
    for (T& v : w.select_box.layers.back().weight->value.data) v *= T(0.1);
    return w;
  }
};

// Boxes and scores for a set of rows (tokens or queries).
template <typename T>
struct Prediction {
  Var<T> boxes;   // (n, 4) clamped cxcywh
  Var<T> logits;  // (n, 1)
  Var<T> scores;  // (n, 1) sigmoid of logits

  int size() const { return boxes.valid() ? boxes.rows() : 0; }
};

template <typename T>
std::vector<BBox> ToBoxes(const Var<T>& boxes) {
  std::vector<BBox> out(static_cast<std::size_t>(boxes.rows()));
  const auto& v = boxes.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = {static_cast<double>(v[4 * i]), static_cast<double>(v[4 * i + 1]),
              static_cast<double>(v[4 * i + 2]), static_cast<double>(v[4 * i + 3])};
  }
  return out;
}

template <typename T>
Var<T> BoxConstant(Tape<T>& tape, const std::vector<BBox>& boxes) {
  return attn::BoxesToVar(tape, boxes);
}

// Row-wise clamp to valid boxes: centers in [0, 1], sides in [kMinBoxSide, 1].
template <typename T>
Var<T> ClampBoxes(const Var<T>& boxes) {
  Tape<T>& tape = *boxes.tape();
  const T m = static_cast<T>(kMinBoxSide);
  const Var<T> lo = tape.Constant({1, 4}, {T(0), T(0), m, m});
  const Var<T> hi = tape.Constant({1, 4}, {T(1), T(1), T(1), T(1)});
  return ad::Minimum(ad::Maximum(boxes, lo), hi);
}

// Sine-cosine embedding of box rows (n, 4), laid out as
// SinCosBoxEmbedding and differentiable in the boxes.
template <typename T>
Var<T> PositionEmbedding(const Var<T>& boxes, int dim, double temperature = 10000.0) {
  if (dim <= 0 || dim % 8 != 0) {
    throw ConfigError("box embedding dim must be a positive multiple of 8, got " + std::to_string(dim));
  }
  Tape<T>& tape = *boxes.tape();
  const int n = boxes.rows(), nf = dim / 8;
  std::vector<T> freq(static_cast<std::size_t>(nf));
  for (int i = 0; i < nf; ++i) {
    freq[static_cast<std::size_t>(i)] = static_cast<T>(
        2.0 * std::numbers::pi / std::pow(temperature, static_cast<double>(i) / nf));
  }
  const auto& bv = boxes.value();
  std::vector<T> out(static_cast<std::size_t>(n) * dim);
  for (int r = 0; r < n; ++r)
    for (int k = 0; k < 4; ++k) {
      const T c = bv[static_cast<std::size_t>(r) * 4 + k];
      T* block = &out[static_cast<std::size_t>(r) * dim + k * (dim / 4)];
      for (int i = 0; i < nf; ++i) {
        const T arg = c * freq[static_cast<std::size_t>(i)];
        block[i] = std::sin(arg);
        block[nf + i] = std::cos(arg);
      }
    }
  const int bid = boxes.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({n, dim}, std::move(out), {boxes}, [=](Tape<T>& t) {
    auto& bn = t.node(bid);
    if (!bn.requires_grad) return;
    const auto& o = t.node(oid);
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < 4; ++k) {
        const std::size_t base = static_cast<std::size_t>(r) * dim + static_cast<std::size_t>(k) * (dim / 4);
        T acc = 0;
        for (int i = 0; i < nf; ++i) {
          const T f = freq[static_cast<std::size_t>(i)];
          // d sin = cos * f, d cos = -sin * f
          acc += o.grad[base + i] * o.value[base + nf + i] * f - o.grad[base + nf + i] * o.value[base + i] * f;
        }
        bn.grad[static_cast<std::size_t>(r) * 4 + k] += acc;
      }
  });
}

// Linear map of every kept search token to the decoder width.
template <typename T>
Var<T> ProjectTokens(Tape<T>& tape, const enc::TokenSet<T>& tokens, const HeadWeights<T>& w) {
  return w.project(tape, tokens.SearchFeatures());
}

template <typename T>
struct QuerySelection {
  Prediction<T> tokens;          // layer-0 predictions for every kept token
  std::vector<int> selected;     // kept-token positions, score descending
  std::vector<BBox> proposals;   // the selected tokens' predicted boxes
  Var<T> proposal_rows;          // (K, 4) the same boxes on the tape
  Var<T> content;                // (K, dim) features of the selected tokens
};

// Positions of the top `k` scores, descending, ties by lower position.
inline std::vector<int> TopK(const std::vector<double>& scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(std::min(order.size(), static_cast<std::size_t>(std::max(k, 0))));
  return order;
}

// Every kept token predicts a score and a box (anchored at its own center);
// the top-K become the content queries and their boxes the proposals.
template <typename T>
QuerySelection<T> QuerySelect(Tape<T>& tape, const Var<T>& projected,
                              const std::vector<Point2>& centers, const HeadWeights<T>& w) {
  if (static_cast<int>(centers.size()) != projected.rows()) {
    throw ad::ShapeError("query selection: " + std::to_string(centers.size()) + " centers for " +
                         std::to_string(projected.rows()) + " tokens");
  }
  std::vector<BBox> anchors;
  anchors.reserve(centers.size());
  for (const auto& c : centers) anchors.push_back({c.x, c.y, w.cfg.anchor_size, w.cfg.anchor_size});
  QuerySelection<T> out;
  out.tokens.logits = w.select_score(tape, projected);
  out.tokens.scores = ad::Sigmoid(out.tokens.logits);
  out.tokens.boxes = ClampBoxes(ad::Add(BoxConstant(tape, anchors), w.select_box(tape, projected)));
  const std::vector<double> s(out.tokens.scores.value().begin(), out.tokens.scores.value().end());
  out.selected = TopK(s, w.cfg.queries);
  const auto boxes = ToBoxes(out.tokens.boxes);
  for (int i : out.selected) out.proposals.push_back(boxes[static_cast<std::size_t>(i)]);
  out.proposal_rows = ad::GatherRows(out.tokens.boxes, out.selected);
  if (w.cfg.detach_refs) out.proposal_rows = ad::Detach(out.proposal_rows);
  out.content = ad::GatherRows(projected, out.selected);
  return out;
}

// Decoder state: content rows plus their reference boxes (n, 4).
template <typename T>
struct Queries {
  Var<T> content;
  Var<T> refs;
};

// One post-norm decoder layer followed by the shared prediction heads.
// Returns the updated content and the refined predictions.
template <typename T>
std::pair<Var<T>, Prediction<T>> DecoderLayer(Tape<T>& tape, const Queries<T>& q,
                                              const attn::FeatureMap<T>& features,
                                              const DecoderLayerWeights<T>& lw,
                                              const HeadWeights<T>& w,
                                              const Tensor<T>* mask = nullptr) {
  const Var<T> pos = PositionEmbedding(q.refs, w.cfg.dim);
  Var<T> tgt = q.content;
  const Var<T> qk = ad::Add(tgt, pos);
  tgt = lw.ln1(tape, ad::Add(tgt, attn::Mhsa(tape, qk, qk, tgt, lw.self_attn, mask)));
  tgt = lw.ln2(tape, ad::Add(tgt, attn::DeformAttn(tape, ad::Add(tgt, pos), q.refs, features,
                                                   lw.cross_attn)));
  tgt = lw.ln3(tape, ad::Add(tgt, lw.ffn(tape, tgt)));
  Prediction<T> p;
  p.boxes = ClampBoxes(ad::Add(q.refs, w.box_offset(tape, tgt)));
  p.logits = w.score(tape, tgt);
  p.scores = ad::Sigmoid(p.logits);
  return {tgt, p};
}

// Runs the first `n_layers` decoder layers; each layer's refined boxes are
// the next layer's references.
template <typename T>
std::vector<Prediction<T>> RunDecoder(Tape<T>& tape, Queries<T> q,
                                      const attn::FeatureMap<T>& features, const HeadWeights<T>& w,
                                      int n_layers, const Tensor<T>* mask = nullptr) {
  const int trained = static_cast<int>(w.layers.size());
  if (n_layers < 1 || n_layers > trained) {
    throw ConfigError("decoder layers to run must lie in [1, " + std::to_string(trained) +
                      "], got " + std::to_string(n_layers));
  }
  std::vector<Prediction<T>> out;
  for (int l = 0; l < n_layers; ++l) {
    auto [content, pred] = DecoderLayer(tape, q, features, w.layers[static_cast<std::size_t>(l)], w, mask);
    q.content = content;
    q.refs = w.cfg.detach_refs ? ad::Detach(pred.boxes) : pred.boxes;
    out.push_back(pred);
  }
  return out;
}

template <typename T>
struct DecoderOutput {
  Prediction<T> layer0;               // all kept tokens, before selection
  std::vector<Prediction<T>> layers;  // rows: [denoising ; matching]
  int n_dn = 0;
  QuerySelection<T> selection;
  Var<T> projected;                   // kept tokens at decoder width
  std::vector<Point2> token_centers;  // kept-token centers
  std::vector<Point2> query_centers;  // source-token center of each matching query

  int n_matching() const { return static_cast<int>(selection.selected.size()); }
  Prediction<T> Matching(int layer) const { return Rows(layer, n_dn, n_dn + n_matching()); }
  Prediction<T> Denoising(int layer) const { return Rows(layer, 0, n_dn); }
  const Prediction<T>& Final() const { return layers.back(); }

 private:
  Prediction<T> Rows(int layer, int begin, int end) const {
    const auto& p = layers[static_cast<std::size_t>(layer)];
    if (begin == 0 && end == p.size()) return p;
    return {ad::SliceRows(p.boxes, begin, end), ad::SliceRows(p.logits, begin, end),
            ad::SliceRows(p.scores, begin, end)};
  }
};

template <typename T>
attn::FeatureMap<T> MakeFeatureMap(const Var<T>& projected, const enc::TokenSet<T>& tokens) {
  return {projected, tokens.search_cells, tokens.grid.height_tokens, tokens.grid.width_tokens};
}

// Denoising queries prepended to the matching queries during training.
template <typename T>
struct DenoisingInput {
  Queries<T> queries;
  Tensor<T> mask;  // additive, over [denoising ; matching]
};

// Projection and query selection; the decoder fields stay empty.
template <typename T>
DecoderOutput<T> Select(Tape<T>& tape, const enc::TokenSet<T>& tokens, const HeadWeights<T>& w) {
  DecoderOutput<T> out;
  out.projected = ProjectTokens(tape, tokens, w);
  out.token_centers = tokens.KeptCenters();
  out.selection = QuerySelect(tape, out.projected, out.token_centers, w);
  out.layer0 = out.selection.tokens;
  for (int i : out.selection.selected) {
    out.query_centers.push_back(out.token_centers[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Runs `n_layers` decoder layers on the selected queries, with optional
// denoising queries in front.
template <typename T>
void Decode(Tape<T>& tape, DecoderOutput<T>& out, const enc::TokenSet<T>& tokens,
            const HeadWeights<T>& w, int n_layers, const DenoisingInput<T>* dn = nullptr) {
  Queries<T> q{out.selection.content, out.selection.proposal_rows};
  const Tensor<T>* mask = nullptr;
  out.n_dn = 0;
  if (dn != nullptr && dn->queries.content.valid() && dn->queries.content.rows() > 0) {
    out.n_dn = dn->queries.content.rows();
    const int side = out.n_dn + out.n_matching();
    if (dn->mask.rows() != side || dn->mask.cols() != side) {
      throw ad::ShapeError("denoising mask " + ad::ShapeString(dn->mask.shape) + " for " +
                           std::to_string(side) + " queries");
    }
    q.content = ad::ConcatRows<T>({dn->queries.content, q.content});
    q.refs = ad::ConcatRows<T>({dn->queries.refs, q.refs});
    mask = &dn->mask;
  }
  out.layers = RunDecoder(tape, q, MakeFeatureMap(out.projected, tokens), w, n_layers, mask);
}

template <typename T>
DecoderOutput<T> Forward(Tape<T>& tape, const enc::TokenSet<T>& tokens, const HeadWeights<T>& w,
                         int n_layers, const DenoisingInput<T>* dn = nullptr) {
  DecoderOutput<T> out = Select(tape, tokens, w);
  Decode(tape, out, tokens, w, n_layers, dn);
  return out;
}

}  // namespace detrack::head

#endif  // DETRACK_HEAD_HPP_
