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

#include "detrack/head.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace detrack::head {
namespace {

using Store = nn::ParameterStore<double>;
using testing::RandomTensor;

HeadConfig TinyHead() {
  HeadConfig c;
  c.enc_dim = 8;
  c.dim = 8;
  c.heads = 2;
  c.points = 2;
  c.layers = 3;
  c.queries = 4;
  c.ffn = 16;
  return c;
}

// Tokens on a 4x4 grid with a few search cells dropped.
enc::TokenSet<double> RandomTokens(Tape<double>& tape, std::mt19937_64& rng, int enc_dim,
                                   std::vector<int> cells = {0, 2, 3, 5, 6, 9, 10, 12, 15}) {
  enc::TokenSet<double> t;
  t.n_template = 2;
  t.grid = {4, 4, 2};
  t.search_cells = std::move(cells);
  t.features = tape.Constant(RandomTensor({2 + t.n_kept(), enc_dim}, rng));
  return t;
}

std::vector<double> Values(const Var<double>& v) { return v.value(); }

TEST(ProjectTokens, IdentityProjectionKeepsTokens) {
  std::mt19937_64 rng(1);
  Store store;
  auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  w.project.SetZero();
  for (int i = 0; i < 8; ++i) w.project.weight->value.at(i, i) = 1.0;
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto p = ProjectTokens(tape, tokens, w);
  EXPECT_EQ(p.value(), tokens.SearchFeatures().value());
}

TEST(ProjectTokens, OutputWidthIsDecoderDim) {
  std::mt19937_64 rng(2);
  HeadConfig cfg = TinyHead();
  cfg.enc_dim = 12;
  Store store;
  const auto w = HeadWeights<double>::Create(store, cfg, rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 12);
  const auto p = ProjectTokens(tape, tokens, w);
  EXPECT_EQ(p.rows(), tokens.n_kept());
  EXPECT_EQ(p.cols(), cfg.dim);
}

TEST(ProjectTokens, GradCheck) {
  std::mt19937_64 rng(3);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> setup;
  const auto tokens = RandomTokens(setup, rng, 8);
  const auto feats = tokens.features.ToTensor();
  const auto mix = RandomTensor({tokens.n_kept(), 8}, rng);
  auto f = [&](Tape<double>& t, const Var<double>& x) {
    auto tk = tokens;
    tk.features = x;
    return ad::Sum(ad::Mul(ProjectTokens(t, tk, w), t.Constant(mix)));
  };
  EXPECT_LT(ad::GradCheck<double>(f, feats, 1e-6).max_rel_error, 1e-6);
  const auto res = ad::GradCheckParams<double>(
      [&](Tape<double>& t) { return f(t, t.Constant(feats)); },
      {w.project.weight, w.project.bias}, 1e-6, 16, 3);
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(TopK, WorkedExampleAndOverflow) {
  EXPECT_EQ(TopK({0.9, 0.1, 0.5}, 2), (std::vector<int>{0, 2}));
  EXPECT_EQ(TopK({0.9, 0.1, 0.5}, 5), (std::vector<int>{0, 2, 1}));
  EXPECT_EQ(TopK({0.2, 0.2, 0.2}, 2), (std::vector<int>{0, 1}));
}

TEST(QuerySelect, ProposalsAreTheSelectedTokensBoxes) {
  std::mt19937_64 rng(4);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto out = Select(tape, tokens, w);
  ASSERT_EQ(out.n_matching(), 4);
  const auto boxes = ToBoxes(out.layer0.boxes);
  const auto& s = out.layer0.scores.value();
  for (std::size_t q = 0; q < out.selection.selected.size(); ++q) {
    const int i = out.selection.selected[q];
    EXPECT_EQ(out.selection.proposals[q], boxes[static_cast<std::size_t>(i)]);
    if (q > 0) EXPECT_GE(s[static_cast<std::size_t>(out.selection.selected[q - 1])], s[static_cast<std::size_t>(i)]);
    for (int c = 0; c < 8; ++c) EXPECT_EQ(out.selection.content.at(static_cast<int>(q), c), out.projected.at(i, c));
  }
  for (double v : s) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(QuerySelect, FewerTokensThanQueriesSelectsAll) {
  std::mt19937_64 rng(5);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8, {1, 7, 8});
  const auto out = Forward(tape, tokens, w, 3);
  EXPECT_EQ(out.n_matching(), 3);
  auto sel = out.selection.selected;
  std::sort(sel.begin(), sel.end());
  EXPECT_EQ(sel, (std::vector<int>{0, 1, 2}));
}

TEST(Decoder, ZeroOffsetsKeepBoxes) {
  std::mt19937_64 rng(6);
  Store store;
  auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  w.box_offset.layers.back().SetZero();
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto out = Forward(tape, tokens, w, 3);
  for (const auto& layer : out.layers) {
    const auto boxes = ToBoxes(layer.boxes);
    for (std::size_t q = 0; q < boxes.size(); ++q) {
      const auto& p = out.selection.proposals[q];
      EXPECT_DOUBLE_EQ(boxes[q].cx, p.cx);
      EXPECT_DOUBLE_EQ(boxes[q].cy, p.cy);
      EXPECT_DOUBLE_EQ(boxes[q].w, p.w);
      EXPECT_DOUBLE_EQ(boxes[q].h, p.h);
    }
  }
}

TEST(Decoder, LayerCount) {
  std::mt19937_64 rng(7);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto out = Forward(tape, tokens, w, 3);
  EXPECT_EQ(out.layers.size(), 3u);
  EXPECT_EQ(out.layer0.size(), tokens.n_kept());
  for (const auto& l : out.layers) EXPECT_EQ(l.size(), 4);
}

TEST(Decoder, RefinementTelescopes) {
  std::mt19937_64 rng(8);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto out = Forward(tape, tokens, w, 3);
  // Unclamped offsets of every layer, recomputed from the shared head.
  const int Q = out.n_matching();
  std::vector<BBox> refs = out.selection.proposals;
  std::vector<std::array<double, 4>> sum(static_cast<std::size_t>(Q), {0, 0, 0, 0});
  bool clamped = false;
  for (const auto& layer : out.layers) {
    const auto boxes = ToBoxes(layer.boxes);
    for (int q = 0; q < Q; ++q) {
      const auto& b = boxes[static_cast<std::size_t>(q)];
      const auto& r = refs[static_cast<std::size_t>(q)];
      const double d[4] = {b.cx - r.cx, b.cy - r.cy, b.w - r.w, b.h - r.h};
      for (int k = 0; k < 4; ++k) sum[static_cast<std::size_t>(q)][static_cast<std::size_t>(k)] += d[k];
      clamped = clamped || b.cx <= 0 || b.cy <= 0 || b.w <= kMinBoxSide || b.h <= kMinBoxSide ||
                b.cx >= 1 || b.cy >= 1 || b.w >= 1 || b.h >= 1;
    }
    refs = boxes;
  }
  ASSERT_FALSE(clamped);
  const auto final_boxes = ToBoxes(out.Final().boxes);
  for (int q = 0; q < Q; ++q) {
    const auto& p = out.selection.proposals[static_cast<std::size_t>(q)];
    const auto& s = sum[static_cast<std::size_t>(q)];
    const auto& f = final_boxes[static_cast<std::size_t>(q)];
    EXPECT_NEAR(f.cx, p.cx + s[0], 1e-12);
    EXPECT_NEAR(f.cy, p.cy + s[1], 1e-12);
    EXPECT_NEAR(f.w, p.w + s[2], 1e-12);
    EXPECT_NEAR(f.h, p.h + s[3], 1e-12);
  }
}

TEST(RunDecoder, TruncatedRunIsBitExactPrefix) {
  std::mt19937_64 rng(9);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto full = Forward(tape, tokens, w, 3);
  for (int l_test = 1; l_test <= 3; ++l_test) {
    Tape<double> t2;
    auto tk = tokens;
    tk.features = t2.Constant(tokens.features.ToTensor());
    const auto part = Forward(t2, tk, w, l_test);
    ASSERT_EQ(static_cast<int>(part.layers.size()), l_test);
    for (int l = 0; l < l_test; ++l) {
      EXPECT_EQ(Values(part.layers[static_cast<std::size_t>(l)].boxes), Values(full.layers[static_cast<std::size_t>(l)].boxes));
      EXPECT_EQ(Values(part.layers[static_cast<std::size_t>(l)].scores), Values(full.layers[static_cast<std::size_t>(l)].scores));
    }
  }
}

TEST(RunDecoder, RejectsLayerCountOutsideTrained) {
  std::mt19937_64 rng(10);
  Store store;
  const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  EXPECT_THROW(Forward(tape, tokens, w, 0), ConfigError);
  EXPECT_THROW(Forward(tape, tokens, w, 4), ConfigError);
}

TEST(Decoder, BoxesAlwaysValid) {
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(100 + seed));
    Store store;
    auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
    // Large offsets force the clamp.
    for (auto& v : w.box_offset.layers.back().weight->value.data) v *= 50.0;
    for (auto& v : w.select_box.layers.back().weight->value.data) v *= 50.0;
    Tape<double> tape;
    const auto out = Forward(tape, RandomTokens(tape, rng, 8), w, 3);
    for (const auto& b : ToBoxes(out.layer0.boxes)) EXPECT_TRUE(IsValid(b));
    for (const auto& l : out.layers)
      for (const auto& b : ToBoxes(l.boxes)) EXPECT_TRUE(IsValid(b));
  }
}

TEST(PositionEmbedding, MatchesGeometryEmbedding) {
  Tape<double> tape;
  const std::vector<BBox> boxes = {{0.3, 0.6, 0.2, 0.4}, {0.9, 0.1, 0.05, 0.7}};
  const auto e = PositionEmbedding(BoxConstant(tape, boxes), 16);
  for (int r = 0; r < 2; ++r) {
    const auto ref = SinCosBoxEmbedding(boxes[static_cast<std::size_t>(r)], 16);
    for (int c = 0; c < 16; ++c) EXPECT_NEAR(e.at(r, c), ref[static_cast<std::size_t>(c)], 1e-15);
  }
}

TEST(PositionEmbedding, GradCheck) {
  std::mt19937_64 rng(12);
  const auto boxes = RandomTensor({3, 4}, rng, 0.1, 0.9);
  const auto mix = RandomTensor({3, 16}, rng);
  auto f = [&](Tape<double>& t, const Var<double>& b) {
    return ad::Sum(ad::Mul(PositionEmbedding(b, 16), t.Constant(mix)));
  };
  EXPECT_LT(ad::GradCheck<double>(f, boxes, 1e-6).max_rel_error, 1e-6);
}

TEST(SamplingLocations, GradCheckOffsetsAndBoxes) {
  std::mt19937_64 rng(13);
  const auto raw = RandomTensor({3, 8}, rng);
  const auto boxes = RandomTensor({3, 4}, rng, 0.1, 0.9);
  const auto mix = RandomTensor({3, 8}, rng);
  auto with_boxes = [&](Tape<double>& t, const Var<double>& b) {
    return ad::Sum(ad::Mul(attn::SamplingLocations(t.Constant(raw), b, 5, 7), t.Constant(mix)));
  };
  auto with_raw = [&](Tape<double>& t, const Var<double>& r) {
    return ad::Sum(ad::Mul(attn::SamplingLocations(r, t.Constant(boxes), 5, 7), t.Constant(mix)));
  };
  EXPECT_LT(ad::GradCheck<double>(with_boxes, boxes, 1e-6).max_rel_error, 1e-6);
  EXPECT_LT(ad::GradCheck<double>(with_raw, raw, 1e-6).max_rel_error, 1e-6);
}

TEST(Decoder, DetachedReferencesLeaveForwardUnchanged) {
  std::mt19937_64 rng(14);
  Store s1, s2;
  HeadConfig cfg = TinyHead();
  std::mt19937_64 r1(rng()), r2 = r1;
  const auto a = HeadWeights<double>::Create(s1, cfg, r1);
  cfg.detach_refs = true;
  const auto b = HeadWeights<double>::Create(s2, cfg, r2);
  Tape<double> tape;
  const auto tokens = RandomTokens(tape, rng, 8);
  const auto oa = Forward(tape, tokens, a, 3);
  const auto ob = Forward(tape, tokens, b, 3);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(Values(oa.layers[static_cast<std::size_t>(l)].boxes), Values(ob.layers[static_cast<std::size_t>(l)].boxes));
}

TEST(Decoder, GradCheckAllParameters) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(11 + seed));
    Store store;
    const auto w = HeadWeights<double>::Create(store, TinyHead(), rng);
    testing::Jitter(store, rng);
    Tape<double> setup;
    const auto tokens = RandomTokens(setup, rng, 8);
    const auto feats = tokens.features.ToTensor();
    const auto mix0 = RandomTensor({tokens.n_kept(), 5}, rng);
    const auto mix = RandomTensor({4, 5}, rng);
    auto f = [&](Tape<double>& t) {
      auto tk = tokens;
      tk.features = t.Constant(feats);
      const auto out = Forward(t, tk, w, 3);
      Var<double> acc = ad::Sum(ad::Mul(ad::ConcatCols<double>({out.layer0.boxes, out.layer0.scores}),
                                        t.Constant(mix0)));
      for (const auto& l : out.layers)
        acc = ad::Add(acc, ad::Sum(ad::Mul(ad::ConcatCols<double>({l.boxes, l.scores}), t.Constant(mix))));
      return acc;
    };
    const auto res = ad::GradCheckParams<double>(f, store.All(), 1e-3, 4, 11, 4);
    EXPECT_TRUE(res.finite);
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed << " " << res.worst_name << " analytic "
                                       << res.worst_analytic << " numeric " << res.worst_numeric;
  }
}

}  // namespace
}  // namespace detrack::head
