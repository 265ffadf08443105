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

// Inference over sequences: query scores are placed on the search grid at
// their boxes' centers, penalized by a Hanning window, and the winning
// query's box is the frame's estimate.

#ifndef DETRACK_TRACK_HPP_
#define DETRACK_TRACK_HPP_

#include <stdexcept>
#include <vector>

#include "detrack/data.hpp"
#include "detrack/geometry.hpp"
#include "detrack/model.hpp"

namespace detrack::track {

struct ScoreMap {
  std::vector<double> score;  // max query score per cell, 0 when empty
  std::vector<int> owner;     // query that produced it, -1 when empty
};

// Collisions keep the higher score; equal scores keep the earlier query.
inline ScoreMap Reflect(const std::vector<TrackBox>& preds, const GridSpec& grid) {
  ScoreMap m{std::vector<double>(static_cast<std::size_t>(grid.Count()), 0.0),
             std::vector<int>(static_cast<std::size_t>(grid.Count()), -1)};
  for (std::size_t q = 0; q < preds.size(); ++q) {
    const auto cell = static_cast<std::size_t>(CellIndex(grid, preds[q].box.cx, preds[q].box.cy));
    if (m.owner[cell] < 0 || preds[q].score > m.score[cell]) {
      m.score[cell] = preds[q].score;
      m.owner[cell] = static_cast<int>(q);
    }
  }
  return m;
}

// Index of the selected query. Without the window this is the plain
// arg-max over scores.
inline int SelectQuery(const std::vector<TrackBox>& preds, const GridSpec& grid, bool hanning = true) {
  if (preds.empty()) throw std::invalid_argument("track: no queries to select from");
  const ScoreMap m = Reflect(preds, grid);
  const auto window = hanning ? HanningWindow2d(grid.height_tokens, grid.width_tokens)
                              : std::vector<double>(m.score.size(), 1.0);
  int best = -1;
  double best_v = -1.0;
  for (std::size_t c = 0; c < m.score.size(); ++c) {
    if (m.owner[c] < 0) continue;
    const double v = m.score[c] * window[c];
    if (v > best_v) {
      best_v = v;
      best = m.owner[c];
    }
  }
  return best;
}

struct TrackResult {
  std::vector<BBox> boxes;
  std::vector<double> scores;
  std::vector<double> iou;  // against the frame's ground truth

  double MeanIou() const {
    double s = 0;
    for (double v : iou) s += v;
    return iou.empty() ? 0.0 : s / static_cast<double>(iou.size());
  }
};

template <typename T>
TrackResult Track(const Model<T>& model, const data::Sequence& seq, int layers, bool hanning = true) {
  TrackResult r;
  const GridSpec grid = model.cfg.encoder.SearchGrid();
  for (int f = 0; f < seq.size(); ++f) {
    const auto preds = Predict(model, seq.Pair(f), layers);
    const auto& p = preds[static_cast<std::size_t>(SelectQuery(preds, grid, hanning))];
    r.boxes.push_back(p.box);
    r.scores.push_back(p.score);
    r.iou.push_back(Iou(p.box, seq.gt[static_cast<std::size_t>(f)]));
  }
  return r;
}

// Fixed evaluation set: sequence i uses seed + i.
inline std::vector<data::Sequence> EvaluationSet(std::uint64_t seed, int n_sequences, int n_frames,
                                                 const data::GeneratorConfig& cfg) {
  std::vector<data::Sequence> out;
  for (int i = 0; i < n_sequences; ++i) {
    out.push_back(data::GenerateSequence(seed + static_cast<std::uint64_t>(i), n_frames, cfg));
  }
  return out;
}

// Mean IoU over every frame of every sequence.
template <typename T>
double MeanIou(const Model<T>& model, const std::vector<data::Sequence>& set, int layers, bool hanning = true) {
  double s = 0;
  int n = 0;
  for (const auto& seq : set) {
    for (double v : Track(model, seq, layers, hanning).iou) {
      s += v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : s / n;
}

}  // namespace detrack::track

#endif  // DETRACK_TRACK_HPP_
