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

// Ablation studies over assignment mode, denoising variant and decoder
// depth. Each study trains fresh models and reports CSV tables.

#ifndef DETRACK_ABLATION_HPP_
#define DETRACK_ABLATION_HPP_

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrack/config.hpp"
#include "detrack/model.hpp"
#include "detrack/track.hpp"
#include "detrack/trainer.hpp"
#include "detrack/training.hpp"

namespace detrack::ablation {

using config::TrainConfig;

enum class Study { kAssignment, kDenoising, kLayers };

inline const char* StudyName(Study s) {
  switch (s) {
    case Study::kAssignment: return "assignment";
    case Study::kDenoising: return "denoising";
    case Study::kLayers: return "layers";
  }
  return "?";
}

inline Study ParseStudy(const std::string& s) {
  for (Study v : {Study::kAssignment, Study::kDenoising, Study::kLayers})
    if (s == StudyName(v)) return v;
  throw std::invalid_argument("unknown study '" + s + "' (assignment, denoising, layers)");
}

struct AblationConfig {
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {1};
  // Epoch budgets at which the assignment study reads off mean IoU.
  std::vector<int> budgets = {5, 10, 20};
  std::vector<train::AssignMode> assignments = {train::AssignMode::kCenter, train::AssignMode::kHungarian,
                                                train::AssignMode::kHard, train::AssignMode::kQuality};
  std::vector<train::DnMode> denoising = {train::DnMode::kOff, train::DnMode::kEmbedding,
                                          train::DnMode::kCenterCorner, train::DnMode::kCenterOutside};
  std::vector<int> layers_train = {2, 3, 4};
  double threshold = 0.7;  // mean IoU for the steps-to-threshold column

  void Validate() const {
    base.Validate();
    if (seeds.empty()) throw std::invalid_argument("ablation: no seeds");
    if (budgets.empty()) throw std::invalid_argument("ablation: no epoch budgets");
    for (int b : budgets)
      if (b < 1) throw std::invalid_argument("ablation: epoch budgets must be positive");
    for (int l : layers_train)
      if (l < 1) throw std::invalid_argument("ablation: layers_train must be positive");
    if (base.pairs_per_epoch % base.batch_size != 0)
      throw std::invalid_argument("ablation: pairs_per_epoch must be a multiple of batch_size");
  }
};

struct Table {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string Csv() const {
    auto line = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
      return s + "\n";
    };
    std::string s = line(header);
    for (const auto& r : rows) s += line(r);
    return s;
  }
};

using Log = std::function<void(const std::string&)>;

struct ThresholdRun {
  int steps = -1;  // first evaluated step at or above the threshold, -1 if never
  std::vector<trainer::EvalLog> evals;
};

// Trains until the evaluated mean IoU reaches `threshold` or `max_steps`
// optimizer steps have run, evaluating every `eval_every` steps.
template <typename T = double>
ThresholdRun TrainToThreshold(const TrainConfig& cfg, double threshold, int max_steps, int eval_every,
                              const Log& log = {}) {
  if (max_steps < 1 || eval_every < 1) throw std::invalid_argument("threshold run: bad step limits");
  trainer::Trainer<T> t(cfg);
  ThresholdRun r;
  for (int s = 1; s <= max_steps; ++s) {
    t.Step();
    if (s % eval_every != 0 && s != max_steps) continue;
    r.evals.push_back({s, t.Evaluate()});
    if (log) log("  step " + std::to_string(s) + " mean_iou " + trainer::Num(r.evals.back().mean_iou));
    if (r.evals.back().mean_iou >= threshold) {
      r.steps = s;
      break;
    }
  }
  return r;
}

namespace internal {

inline int StepsPerEpoch(const TrainConfig& c) { return c.pairs_per_epoch / c.batch_size; }

inline std::string Label(std::uint64_t seed) { return std::to_string(seed); }

}  // namespace internal

// Table-4 shape: one row per (assignment, seed, budget) plus the mean over
// seeds, and the steps needed to reach the threshold.
template <typename T = double>
std::vector<Table> AssignmentStudy(const AblationConfig& ac, const Log& log = {}) {
  ac.Validate();
  const int spe = internal::StepsPerEpoch(ac.base);
  const int max_epochs = *std::max_element(ac.budgets.begin(), ac.budgets.end());
  Table table{"assignment", {"assignment", "seed", "epochs", "steps", "mean_iou"}, {}};
  Table conv{"assignment_convergence", {"assignment", "seed", "threshold", "steps_to_threshold"}, {}};
  Table curves{"assignment_curves", {"assignment", "seed", "step", "mean_iou"}, {}};
  for (auto mode : ac.assignments) {
    const std::string name = train::AssignModeName(mode);
    std::vector<double> sums(ac.budgets.size(), 0.0);
    for (auto seed : ac.seeds) {
      TrainConfig c = ac.base;
      c.assignment = mode;
      c.seed = seed;
      c.epochs = max_epochs;
      c.eval_every = spe;
      if (log) log(name + " seed " + internal::Label(seed));
      const auto run = trainer::Trainer<T>(c).Run();
      for (const auto& e : run.evals) curves.rows.push_back({name, internal::Label(seed), std::to_string(e.step), trainer::Num(e.mean_iou)});
      for (std::size_t b = 0; b < ac.budgets.size(); ++b) {
        const int step = ac.budgets[b] * spe;
        double iou = 0;
        for (const auto& e : run.evals)
          if (e.step == step) iou = e.mean_iou;
        sums[b] += iou;
        table.rows.push_back({name, internal::Label(seed), std::to_string(ac.budgets[b]), std::to_string(step), trainer::Num(iou)});
      }
      conv.rows.push_back({name, internal::Label(seed), trainer::Num(ac.threshold), std::to_string(run.StepsTo(ac.threshold))});
    }
    for (std::size_t b = 0; b < ac.budgets.size(); ++b) {
      table.rows.push_back({name, "mean", std::to_string(ac.budgets[b]), std::to_string(ac.budgets[b] * spe),
                            trainer::Num(sums[b] / static_cast<double>(ac.seeds.size()))});
    }
  }
  return {table, conv, curves};
}

// Table-6 shape: final mean IoU per denoising variant and seed, plus the
// seed mean.
template <typename T = double>
std::vector<Table> DenoisingStudy(const AblationConfig& ac, const Log& log = {}) {
  ac.Validate();
  Table table{"denoising", {"dn", "seed", "mean_iou"}, {}};
  for (auto mode : ac.denoising) {
    const std::string name = train::DnModeName(mode);
    double sum = 0;
    for (auto seed : ac.seeds) {
      TrainConfig c = ac.base;
      c.dn.mode = mode;
      c.seed = seed;
      if (log) log(name + " seed " + internal::Label(seed));
      const double iou = trainer::Trainer<T>(c).Run().FinalIou();
      sum += iou;
      table.rows.push_back({name, internal::Label(seed), trainer::Num(iou)});
    }
    table.rows.push_back({name, "mean", trainer::Num(sum / static_cast<double>(ac.seeds.size()))});
  }
  return {table};
}

// Table-5 shape: each trained depth evaluated at every truncation.
template <typename T = double>
std::vector<Table> LayersStudy(const AblationConfig& ac, const Log& log = {}) {
  ac.Validate();
  Table table{"layers", {"layers_train", "layers_test", "seed", "mean_iou"}, {}};
  for (int lt : ac.layers_train) {
    for (auto seed : ac.seeds) {
      TrainConfig c = ac.base;
      c.model.head.layers = lt;
      c.layers_test = 0;
      c.seed = seed;
      if (log) log("layers_train " + std::to_string(lt) + " seed " + internal::Label(seed));
      trainer::Trainer<T> t(c);
      t.Run();
      const auto set = track::EvaluationSet(c.eval_seed, c.eval_sequences, c.eval_frames, c.data);
      for (int l = 1; l <= lt; ++l) {
        table.rows.push_back({std::to_string(lt), std::to_string(l), internal::Label(seed),
                              trainer::Num(track::MeanIou(t.model(), set, l, c.hanning))});
      }
    }
  }
  return {table};
}

template <typename T = double>
std::vector<Table> RunAblation(Study which, const AblationConfig& ac, const Log& log = {}) {
  switch (which) {
    case Study::kAssignment: return AssignmentStudy<T>(ac, log);
    case Study::kDenoising: return DenoisingStudy<T>(ac, log);
    case Study::kLayers: return LayersStudy<T>(ac, log);
  }
  return {};
}

// One `<name>.csv` per table under `dir`.
inline void WriteTables(const std::string& dir, const std::vector<Table>& tables) {
  std::filesystem::create_directories(dir);
  for (const auto& t : tables) WriteFile(dir + "/" + t.name + ".csv", t.Csv());
}

}  // namespace detrack::ablation

#endif  // DETRACK_ABLATION_HPP_
