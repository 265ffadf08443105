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

// Training loop: synthetic pairs, forward with the optional denoising
// branch, the layered objective, and AdamW with separate encoder and head
// learning rates.

#ifndef DETRACK_TRAINER_HPP_
#define DETRACK_TRAINER_HPP_

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrack/autodiff.hpp"
#include "detrack/config.hpp"
#include "detrack/data.hpp"
#include "detrack/model.hpp"
#include "detrack/track.hpp"
#include "detrack/training.hpp"

namespace detrack::trainer {

using config::TrainConfig;

struct StepLog {
  int step = 0;      // 1-based optimizer step
  double loss = 0;   // mean over the batch
  double iou = 0;    // mean IoU of the top-score final prediction
};

struct EvalLog {
  int step = 0;
  double mean_iou = 0;
};

struct RunArtifacts {
  std::vector<StepLog> steps;
  std::vector<EvalLog> evals;
  Checkpoint checkpoint;  // final parameters (initial ones after 0 steps)

  // First evaluated step with mean IoU >= threshold, -1 if never.
  int StepsTo(double threshold) const {
    for (const auto& e : evals)
      if (e.mean_iou >= threshold) return e.step;
    return -1;
  }
  double FinalIou() const { return evals.empty() ? 0.0 : evals.back().mean_iou; }
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::string snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

struct PairResult {
  double loss = 0;
  double iou = 0;
  train::LossTerms terms;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_((cfg.Validate(), std::move(cfg))),
        model_(Model<T>::Create(cfg_.model, cfg_.seed, cfg_.dn.mode == train::DnMode::kEmbedding)),
        data_rng_(cfg_.seed * 0x9E3779B97F4A7C15ULL + 1),
        noise_rng_(cfg_.seed * 0xBF58476D1CE4E5B9ULL + 2),
        opt_(ad::AdamWConfig{0.9, 0.999, 1e-8, cfg_.weight_decay}) {
    eval_set_ = track::EvaluationSet(cfg_.eval_seed, cfg_.eval_sequences, cfg_.eval_frames, cfg_.data);
  }

  const TrainConfig& config() const { return cfg_; }
  const Model<T>& model() const { return model_; }
  Model<T>& model() { return model_; }
  int step() const { return step_; }

  // Loss and gradients of one pair; gradients are scaled by `grad_scale` and
  // accumulate into the parameters.
  PairResult Accumulate(const data::Sample& s, double grad_scale) {
    ad::Tape<T> tape;
    const auto tokens = model_.Encode(tape, s.images);
    auto out = head::Select(tape, tokens, model_.head);
    train::DenoisingBatch batch;
    head::DenoisingInput<T> dn;
    if (cfg_.dn.enabled()) {
      batch = train::GenDenoisingBatch(s.gt, out.token_centers, cfg_.dn, noise_rng_);
      dn = train::MakeDenoisingInput(tape, batch, out.projected, out.n_matching(), model_.label_embedding);
    }
    head::Decode(tape, out, tokens, model_.head, cfg_.model.head.layers, cfg_.dn.enabled() ? &dn : nullptr);
    const auto assign = train::AssignLayers(out, s.gt, cfg_.assignment, cfg_.k_loc, cfg_.loss);
    const auto dn_assign = train::AssignDenoising(out, batch, s.gt);
    const auto res = train::TotalLoss(out, assign, dn_assign, s.gt, cfg_.loss);
    PairResult r;
    r.loss = res.terms.total;
    r.terms = res.terms;
    if (std::isfinite(r.loss)) tape.Backward(ad::Scale(res.total, static_cast<T>(grad_scale)));
    const auto m = out.Matching(static_cast<int>(out.layers.size()) - 1);
    const auto scores = train::Column(m.scores, 0, m.size());
    const auto boxes = head::ToBoxes(m.boxes);
    const auto top = head::TopK(scores, 1);
    r.iou = top.empty() ? 0.0 : Iou(boxes[static_cast<std::size_t>(top[0])], s.gt);
    return r;
  }

  double LrScale(int step) const {
    return step > static_cast<int>(cfg_.lr_drop_at * cfg_.steps()) ? cfg_.lr_drop_factor : 1.0;
  }

  // One optimizer step on freshly generated pairs.
  StepLog Step() {
    std::vector<data::Sample> batch;
    for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(data::GeneratePair(data_rng_, cfg_.data));
    return StepOn(batch);
  }

  // One optimizer step on the given pairs.
  StepLog StepOn(const std::vector<data::Sample>& batch) {
    if (batch.empty()) throw std::invalid_argument("training step needs at least one pair");
    ++step_;
    model_.store.ZeroGrad();
    StepLog log;
    log.step = step_;
    const double n = static_cast<double>(batch.size());
    for (const auto& s : batch) {
      const auto r = Accumulate(s, 1.0 / n);
      if (!std::isfinite(r.loss)) throw TrainingError("non-finite loss at step " + std::to_string(step_), Snapshot(r));
      log.loss += r.loss / n;
      log.iou += r.iou / n;
    }
    ClipGradients();
    const double scale = LrScale(step_);
    const auto status = opt_.Step(model_.store.All(), [&](const ad::Parameter<T>& p) {
      return scale * (p.group == "encoder" ? cfg_.lr_encoder : cfg_.lr_decoder);
    });
    if (!status.applied) {
      throw TrainingError("non-finite gradient in " + status.offending + " at step " + std::to_string(step_),
                          Snapshot({log.loss, log.iou, {}}));
    }
    return log;
  }

  double Evaluate() const { return track::MeanIou(model_, eval_set_, cfg_.LayersTest(), cfg_.hanning); }

  // Runs every step; `on_step` sees each log as it is produced.
  RunArtifacts Run(const std::function<void(const StepLog&, const EvalLog*)>& on_step = {}) {
    RunArtifacts a;
    const int total = cfg_.steps();
    while (step_ < total) {
      a.steps.push_back(Step());
      const bool eval = step_ == total || (cfg_.eval_every > 0 && step_ % cfg_.eval_every == 0);
      if (eval) a.evals.push_back({step_, Evaluate()});
      if (on_step) on_step(a.steps.back(), eval ? &a.evals.back() : nullptr);
    }
    if (total == 0) a.evals.push_back({0, Evaluate()});
    a.checkpoint = MakeCheckpoint(model_, config::ToText(cfg_), static_cast<std::uint64_t>(step_));
    return a;
  }

 private:
  void ClipGradients() {
    if (cfg_.grad_clip <= 0) return;
    double sq = 0;
    for (const auto* p : model_.store.All())
      for (T g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (!(norm > cfg_.grad_clip)) return;
    const T f = static_cast<T>(cfg_.grad_clip / norm);
    for (auto* p : model_.store.All())
      for (T& g : p->grad.data) g *= f;
  }

  std::string Snapshot(const PairResult& r) const {
    std::ostringstream os;
    os.precision(17);
    os << "step = " << step_ << "\nloss = " << r.loss << "\n";
    auto list = [&](const char* name, const std::vector<double>& v) {
      os << name << " =";
      for (double x : v) os << " " << x;
      os << "\n";
    };
    list("cls", r.terms.cls);
    list("loc", r.terms.loc);
    list("cls_dn", r.terms.cls_dn);
    list("loc_dn", r.terms.loc_dn);
    for (const auto* p : model_.store.All()) {
      double mx = 0;
      bool finite = true;
      for (T v : p->value.data) {
        finite = finite && std::isfinite(static_cast<double>(v));
        mx = std::max(mx, std::abs(static_cast<double>(v)));
      }
      os << "param " << p->name << " max|v| = " << mx << (finite ? "" : " NON-FINITE") << "\n";
    }
    os << "\n" << config::ToText(cfg_);
    return os.str();
  }

  TrainConfig cfg_;
  Model<T> model_;
  std::mt19937_64 data_rng_;
  std::mt19937_64 noise_rng_;
  ad::AdamW<T> opt_;
  std::vector<data::Sequence> eval_set_;
  int step_ = 0;
};

inline std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string StepsCsv(const RunArtifacts& a) {
  std::string s = "step,loss,iou\n";
  for (const auto& l : a.steps) s += std::to_string(l.step) + "," + Num(l.loss) + "," + Num(l.iou) + "\n";
  return s;
}

inline std::string EvalCsv(const RunArtifacts& a) {
  std::string s = "step,mean_iou\n";
  for (const auto& e : a.evals) s += std::to_string(e.step) + "," + Num(e.mean_iou) + "\n";
  return s;
}

// curve.csv, eval.csv, checkpoint.bin and config.txt under `dir`.
inline void WriteArtifacts(const std::string& dir, const RunArtifacts& a) {
  std::filesystem::create_directories(dir);
  WriteFile(dir + "/curve.csv", StepsCsv(a));
  WriteFile(dir + "/eval.csv", EvalCsv(a));
  WriteFile(dir + "/checkpoint.bin", Serialize(a.checkpoint));
  WriteFile(dir + "/config.txt", a.checkpoint.config_text);
}

}  // namespace detrack::trainer

#endif  // DETRACK_TRAINER_HPP_
