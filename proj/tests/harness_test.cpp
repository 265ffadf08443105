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

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "detrack/config.hpp"
#include "detrack/data.hpp"
#include "detrack/model.hpp"
#include "detrack/track.hpp"
#include "detrack/trainer.hpp"
#include "gtest/gtest.h"

namespace detrack {
namespace {

// ---------------------------------------------------------------------------
// Synthetic data.

TEST(GeneratePair, EasyTargetIsCentered) {
  std::mt19937_64 rng(1);
  data::GeneratorConfig cfg;
  cfg.difficulty = 0;
  for (int i = 0; i < 200; ++i) {
    const auto s = data::GeneratePair(rng, cfg);
    EXPECT_LE(std::hypot(s.gt.cx - 0.5, s.gt.cy - 0.5), 0.1);
  }
}

TEST(GeneratePair, TargetAlwaysInsideSearchCrop) {
  for (int d = 0; d <= 2; ++d) {
    std::mt19937_64 rng(2);
    data::GeneratorConfig cfg;
    cfg.difficulty = d;
    for (int i = 0; i < 1000; ++i) {
      const auto s = data::GeneratePair(rng, cfg);
      const auto c = ToCorners(s.gt);
      ASSERT_GE(c.x1, 0.0);
      ASSERT_GE(c.y1, 0.0);
      ASSERT_LE(c.x2, 1.0);
      ASSERT_LE(c.y2, 1.0);
    }
  }
}

TEST(GeneratePair, TargetSpansAQuarterOfTheCrop) {
  std::mt19937_64 rng(3);
  data::GeneratorConfig cfg;
  for (int i = 0; i < 200; ++i) {
    const auto s = data::GeneratePair(rng, cfg);
    const double side = std::sqrt(s.gt.w * s.gt.h);
    EXPECT_GT(side, 0.25 * std::exp(-0.16));
    EXPECT_LT(side, 0.25 * std::exp(0.16));
  }
}

TEST(GeneratePair, ShapesAndRange) {
  std::mt19937_64 rng(4);
  data::GeneratorConfig cfg;
  cfg.template_size = 16;
  cfg.search_size = 40;
  const auto s = data::GeneratePair(rng, cfg);
  EXPECT_EQ(s.images.z.height, 16);
  EXPECT_EQ(s.images.x.width, 40);
  EXPECT_EQ(s.images.x.channels, 3);
  for (float v : s.images.x.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(GeneratePair, DeterministicBytes) {
  for (int d = 0; d <= 2; ++d) {
    data::GeneratorConfig cfg;
    cfg.difficulty = d;
    std::mt19937_64 a(5), b(5);
    for (int i = 0; i < 3; ++i) {
      const auto x = data::GeneratePair(a, cfg), y = data::GeneratePair(b, cfg);
      EXPECT_EQ(x.images.z.pixels, y.images.z.pixels);
      EXPECT_EQ(x.images.x.pixels, y.images.x.pixels);
      EXPECT_EQ(x.gt, y.gt);
    }
  }
}

TEST(GeneratePair, TemplateShowsTheTarget) {
  // The template center renders the target's pattern colors.
  std::mt19937_64 rng(6);
  data::GeneratorConfig cfg;
  cfg.difficulty = 0;
  std::mt19937_64 scene_rng(6);
  const auto scene = data::RandomScene(scene_rng, 0);
  const auto s = data::GeneratePair(rng, cfg);
  const auto& t = scene.target();
  const int c = cfg.template_size / 2;
  const float r = s.images.z.at(0, c, c), g = s.images.z.at(1, c, c), b = s.images.z.at(2, c, c);
  const bool is_a = r == t.a[0] && g == t.a[1] && b == t.a[2];
  const bool is_b = r == t.b[0] && g == t.b[1] && b == t.b[2];
  EXPECT_TRUE(is_a || is_b);
}

TEST(GeneratePair, RejectsBadConfig) {
  std::mt19937_64 rng(7);
  data::GeneratorConfig cfg;
  cfg.difficulty = 3;
  EXPECT_THROW(data::GeneratePair(rng, cfg), ConfigError);
}

TEST(GenerateSequence, FramesFollowTheTarget) {
  data::GeneratorConfig cfg;
  const auto seq = data::GenerateSequence(9, 12, cfg);
  ASSERT_EQ(seq.size(), 12);
  EXPECT_NEAR(seq.gt[0].cx, 0.5, 1e-12);
  EXPECT_NEAR(seq.gt[0].cy, 0.5, 1e-12);
  for (const auto& g : seq.gt) {
    const auto c = ToCorners(g);
    EXPECT_TRUE(c.x1 >= 0 && c.y1 >= 0 && c.x2 <= 1 && c.y2 <= 1);
  }
  const auto again = data::GenerateSequence(9, 12, cfg);
  EXPECT_EQ(again.frames.back().pixels, seq.frames.back().pixels);
  EXPECT_EQ(again.gt, seq.gt);
}

// ---------------------------------------------------------------------------
// Configuration.

TEST(Config, ParsesKeyValueLines) {
  const auto c = config::FromText(
      "# comment\n"
      "seed = 42\n"
      "  assignment=hungarian   # trailing comment\n"
      "dn = off\n"
      "lr_encoder = 1e-3\n"
      "ce_layers = 0,1\n"
      "layers_train = 4\n"
      "\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.assignment, train::AssignMode::kHungarian);
  EXPECT_EQ(c.dn.mode, train::DnMode::kOff);
  EXPECT_DOUBLE_EQ(c.lr_encoder, 1e-3);
  EXPECT_EQ(c.model.encoder.ce_layers, (std::vector<int>{0, 1}));
  EXPECT_EQ(c.model.head.layers, 4);
}

TEST(Config, ReportsBadInput) {
  EXPECT_THROW(config::FromText("seed 42\n"), ConfigError);
  EXPECT_THROW(config::FromText("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(config::FromText("epochs = ten\n"), ConfigError);
  EXPECT_THROW(config::FromText("assignment = nearest\n"), ConfigError);
  EXPECT_THROW(config::FromText("layers_test = 5\n"), ConfigError);
  EXPECT_THROW(config::FromText("patch = 7\n"), ConfigError);
}

TEST(Config, TextRoundTrip) {
  config::TrainConfig c;
  c.seed = 7;
  c.lr_decoder = 0.00123456789;
  c.assignment = train::AssignMode::kCenter;
  c.model.encoder.ce_layers = {};
  c.hanning = false;
  const auto back = config::FromText(config::ToText(c));
  EXPECT_EQ(config::ToText(back), config::ToText(c));
  EXPECT_EQ(back.lr_decoder, c.lr_decoder);
  EXPECT_TRUE(back.model.encoder.ce_layers.empty());
}

TEST(Config, DefaultsKeepTheTenfoldHeadRate) {
  const config::TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr_decoder, 10 * c.lr_encoder);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
  EXPECT_DOUBLE_EQ(c.lr_drop_at, 0.8);
  EXPECT_DOUBLE_EQ(c.lr_drop_factor, 0.1);
  EXPECT_EQ(c.pairs_per_epoch, 200);
  EXPECT_NO_THROW(c.Validate());
  EXPECT_FALSE(config::Documentation().empty());
}

// ---------------------------------------------------------------------------
// Model and checkpoints.

TEST(Checkpoint, RoundTripRestoresEveryParameter) {
  config::TrainConfig c;
  c.dn.mode = train::DnMode::kEmbedding;
  const auto m = Model<double>::Create(c.model, 3, true);
  const auto ck = MakeCheckpoint(m, config::ToText(c), 17);
  const auto bytes = Serialize(ck);
  const auto back = Deserialize(bytes);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(Serialize(back), bytes);
  const auto m2 = LoadModel<double>(back);
  ASSERT_NE(m2.label_embedding, nullptr);
  for (const auto* p : m.store.All()) EXPECT_EQ(m2.store.Find(p->name)->value.data, p->value.data) << p->name;
}

TEST(Checkpoint, RejectsCorruption) {
  config::TrainConfig c;
  const auto m = Model<double>::Create(c.model, 3);
  const auto bytes = Serialize(MakeCheckpoint(m, config::ToText(c), 0));
  EXPECT_THROW(Deserialize("garbage"), CheckpointError);
  EXPECT_THROW(Deserialize(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(Deserialize(bytes + "x"), CheckpointError);
  auto other = c;
  other.model.head.layers = 2;
  auto smaller = Model<double>::Create(other.model, 3);
  EXPECT_THROW(Restore(smaller, Deserialize(bytes)), CheckpointError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "detrack_ckpt_test.bin").string();
  config::TrainConfig c;
  const auto m = Model<double>::Create(c.model, 4);
  const auto bytes = Serialize(MakeCheckpoint(m, config::ToText(c), 2));
  WriteFile(path, bytes);
  EXPECT_EQ(ReadFile(path), bytes);
  std::filesystem::remove(path);
  EXPECT_THROW(ReadFile(path), CheckpointError);
}

// ---------------------------------------------------------------------------
// Score-map selection.

std::vector<TrackBox> Boxes(const std::vector<std::pair<BBox, double>>& v) {
  std::vector<TrackBox> out;
  for (const auto& [b, s] : v) out.push_back({b, s});
  return out;
}

TEST(SelectQuery, UniformScoresPickTheMostCentralQuery) {
  const GridSpec g{8, 8, 8};
  const auto preds = Boxes({{{0.2, 0.3, 0.1, 0.1}, 0.5},
                            {{0.45, 0.55, 0.1, 0.1}, 0.5},
                            {{0.8, 0.8, 0.1, 0.1}, 0.5},
                            {{0.3, 0.6, 0.1, 0.1}, 0.5}});
  EXPECT_EQ(track::SelectQuery(preds, g), 1);
}

TEST(SelectQuery, FlatWindowIsPlainArgmax) {
  const GridSpec g{8, 8, 8};
  const auto preds = Boxes({{{0.5, 0.5, 0.1, 0.1}, 0.6}, {{0.1, 0.9, 0.1, 0.1}, 0.7}});
  EXPECT_EQ(track::SelectQuery(preds, g, false), 1);
  EXPECT_EQ(track::SelectQuery(preds, g, true), 0);  // the corner cell has zero weight
}

TEST(SelectQuery, SameCellKeepsTheHigherScore) {
  const GridSpec g{8, 8, 8};
  auto preds = Boxes({{{0.51, 0.51, 0.1, 0.1}, 0.4}, {{0.52, 0.53, 0.2, 0.2}, 0.9}, {{0.3, 0.3, 0.1, 0.1}, 0.5}});
  const auto m = track::Reflect(preds, g);
  const auto cell = static_cast<std::size_t>(CellIndex(g, 0.51, 0.51));
  EXPECT_EQ(m.owner[cell], 1);
  EXPECT_DOUBLE_EQ(m.score[cell], 0.9);
  EXPECT_EQ(track::SelectQuery(preds, g), 1);
  // Equal scores in one cell: the earlier query wins.
  preds[0].score = 0.9;
  EXPECT_EQ(track::Reflect(preds, g).owner[cell], 0);
}

TEST(SelectQuery, InvariantToPositiveScaling) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const GridSpec g{8, 8, 8};
  for (int t = 0; t < 200; ++t) {
    std::vector<TrackBox> preds;
    for (int q = 0; q < 10; ++q) preds.push_back({{u(rng), u(rng), 0.1, 0.1}, u(rng)});
    const int base = track::SelectQuery(preds, g);
    for (double k : {0.01, 0.5, 3.0}) {
      auto scaled = preds;
      for (auto& p : scaled) p.score *= k;
      EXPECT_EQ(track::SelectQuery(scaled, g), base);
    }
  }
}

TEST(SelectQuery, EmptyIsAnError) {
  EXPECT_THROW(track::SelectQuery({}, GridSpec{8, 8, 8}), std::invalid_argument);
}

TEST(Track, BoxesAreValidAndPerFrame) {
  config::TrainConfig c;
  const auto m = Model<double>::Create(c.model, 5);
  const auto seq = data::GenerateSequence(3, 4, c.data);
  const auto r = track::Track(m, seq, 3);
  ASSERT_EQ(r.boxes.size(), 4u);
  for (std::size_t i = 0; i < r.boxes.size(); ++i) {
    EXPECT_TRUE(IsValid(r.boxes[i]));
    EXPECT_DOUBLE_EQ(r.iou[i], Iou(r.boxes[i], seq.gt[i]));
  }
}

// ---------------------------------------------------------------------------
// Training.

config::TrainConfig Small() {
  config::TrainConfig c;
  c.epochs = 1;
  c.pairs_per_epoch = 8;
  c.batch_size = 2;
  c.eval_sequences = 2;
  c.eval_frames = 2;
  return c;
}

TEST(Trainer, ZeroStepsGiveTheInitialCheckpoint) {
  auto c = Small();
  c.epochs = 0;
  trainer::Trainer<double> t(c);
  const auto a = t.Run();
  EXPECT_TRUE(a.steps.empty());
  const auto fresh = Model<double>::Create(c.model, c.seed);
  EXPECT_EQ(Serialize(a.checkpoint), Serialize(MakeCheckpoint(fresh, config::ToText(c), 0)));
}

TEST(Trainer, SameSeedSameBytes) {
  for (const char* dn : {"on", "embedding", "off"}) {
    auto c = Small();
    c.dn.mode = train::ParseDnMode(dn);
    trainer::Trainer<double> a(c), b(c);
    const auto ra = a.Run(), rb = b.Run();
    EXPECT_EQ(trainer::StepsCsv(ra), trainer::StepsCsv(rb)) << dn;
    EXPECT_EQ(trainer::EvalCsv(ra), trainer::EvalCsv(rb)) << dn;
    EXPECT_EQ(Serialize(ra.checkpoint), Serialize(rb.checkpoint)) << dn;
  }
}

TEST(Trainer, DifferentSeedsDiffer) {
  auto c = Small();
  trainer::Trainer<double> a(c);
  c.seed = 2;
  trainer::Trainer<double> b(c);
  EXPECT_NE(trainer::StepsCsv(a.Run()), trainer::StepsCsv(b.Run()));
}

TEST(Trainer, EveryAssignmentModeTrains) {
  for (auto mode : {train::AssignMode::kQuality, train::AssignMode::kHard, train::AssignMode::kCenter,
                    train::AssignMode::kHungarian}) {
    auto c = Small();
    c.assignment = mode;
    trainer::Trainer<double> t(c);
    const auto a = t.Run();
    ASSERT_EQ(a.steps.size(), 4u);
    for (const auto& s : a.steps) EXPECT_TRUE(std::isfinite(s.loss));
  }
}

TEST(Trainer, LearningRateDropsForTheLastFifth) {
  auto c = Small();
  c.epochs = 10;  // 40 steps
  trainer::Trainer<double> t(c);
  EXPECT_EQ(t.LrScale(1), 1.0);
  EXPECT_EQ(t.LrScale(32), 1.0);
  EXPECT_EQ(t.LrScale(33), 0.1);
  EXPECT_EQ(t.LrScale(40), 0.1);
}

TEST(Trainer, OnlyEmbeddingModeCreatesTheLabelEmbedding) {
  auto c = Small();
  EXPECT_EQ(trainer::Trainer<double>(c).model().label_embedding, nullptr);
  c.dn.mode = train::DnMode::kEmbedding;
  EXPECT_NE(trainer::Trainer<double>(c).model().label_embedding, nullptr);
}

TEST(Trainer, NonFiniteLossAbortsWithSnapshot) {
  auto c = Small();
  trainer::Trainer<double> t(c);
  t.model().head.score.bias->value.data[0] = std::nan("");
  std::mt19937_64 rng(1);
  try {
    t.StepOn({data::GeneratePair(rng, c.data)});
    FAIL() << "expected a training error";
  } catch (const trainer::TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    EXPECT_NE(e.snapshot().find("head.score.bias"), std::string::npos);
  }
}

TEST(Trainer, OverfitsASinglePair) {
  auto c = Small();
  c.epochs = 500;
  trainer::Trainer<double> t(c);
  std::mt19937_64 rng(5);
  const auto s = data::GeneratePair(rng, c.data);
  double last = 0;
  for (int i = 0; i < 500; ++i) last = t.StepOn({s}).iou;
  EXPECT_GT(last, 0.9);
  const auto preds = Predict(t.model(), s.images, c.model.head.layers);
  std::size_t top = 0;
  for (std::size_t i = 1; i < preds.size(); ++i)
    if (preds[i].score > preds[top].score) top = i;
  EXPECT_GT(Iou(preds[top].box, s.gt), 0.9);
}

TEST(Trainer, WritesArtifacts) {
  const auto dir = (std::filesystem::temp_directory_path() / "detrack_artifacts_test").string();
  std::filesystem::remove_all(dir);
  trainer::Trainer<double> t(Small());
  const auto a = t.Run();
  trainer::WriteArtifacts(dir, a);
  EXPECT_EQ(ReadFile(dir + "/curve.csv"), trainer::StepsCsv(a));
  EXPECT_EQ(Deserialize(ReadFile(dir + "/checkpoint.bin")).step, 4u);
  EXPECT_TRUE(std::filesystem::exists(dir + "/config.txt"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace detrack
