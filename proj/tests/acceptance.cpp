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

// Acceptance suite. Prints one PASS/FAIL line per criterion; with arguments,
// runs only the listed criteria. Exit status is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "detrack/ablation.hpp"
#include "detrack/checks.hpp"
#include "detrack/config.hpp"
#include "detrack/flops.hpp"
#include "detrack/model.hpp"
#include "detrack/track.hpp"
#include "detrack/trainer.hpp"
#include "detrack/training.hpp"

#ifndef DETRACK_CLI
#error "DETRACK_CLI must name the command-line binary"
#endif

namespace detrack::acceptance {
namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// Settings of the desk-scale training experiments.
config::TrainConfig DeskConfig() {
  config::TrainConfig c;  // library defaults: desk model, lr 5e-4 / 5e-3, batch 4
  c.eval_sequences = 8;
  c.eval_frames = 10;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient suite.

Result Gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto suite = checks::GradientSuite(3);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < 120.0;
  double worst = 0;
  std::string worst_name, failed;
  for (const auto& e : suite) {
    if (!e.result.Passed(1e-4)) failed += " " + e.name;
    ok = ok && e.result.Passed(1e-4);
    if (e.result.max_rel_error >= worst) {
      worst = e.result.max_rel_error;
      worst_name = e.name;
    }
  }
  return {ok, std::to_string(suite.size()) + " checks, worst " + worst_name + " " + Fmt("%.2e", worst) +
                  " < 1e-4, " + Fmt("%.1f", secs) + " s" + (failed.empty() ? "" : ", failed:" + failed)};
}

// ---------------------------------------------------------------------------
// 2. Quality focal loss.

// Direct evaluation of -|y - s|^beta ((1 - y) log(1 - s) + y log s).
double DirectQfl(double s, double y, double beta = 2.0) {
  double v = 0;
  if (y < 1) v += (1 - y) * std::log(1 - s);
  if (y > 0) v += y * std::log(s);
  return -std::pow(std::abs(y - s), beta) * v;
}

Result QflOracle() {
  bool ok = true;
  double at_target = 0;
  for (int k = 0; k <= 100; ++k) at_target = std::max(at_target, std::abs(train::Qfl(k / 100.0, k / 100.0)));
  ok = ok && at_target <= 1e-12;
  // Grid minimum over sigma in [0, 1] at step 1e-3 must sit at sigma = y.
  int misplaced = 0;
  for (int k = 0; k <= 20; ++k) {
    const int target = k * 50;
    int best = -1;
    double best_v = std::numeric_limits<double>::infinity();
    for (int j = 0; j <= 1000; ++j) {
      const double v = train::Qfl(j / 1000.0, target / 1000.0);
      if (v < best_v) {
        best_v = v;
        best = j;
      }
    }
    misplaced += best != target;
  }
  ok = ok && misplaced == 0;
  const double quarter_ln2 = 0.25 * std::log(2.0);
  const double e0 = std::abs(train::Qfl(0.5, 0.0) - DirectQfl(0.5, 0.0));
  const double e1 = std::abs(train::Qfl(0.5, 1.0) - DirectQfl(0.5, 1.0));
  const double d0 = std::abs(DirectQfl(0.5, 0.0) - quarter_ln2), d1 = std::abs(DirectQfl(0.5, 1.0) - quarter_ln2);
  ok = ok && e0 < 1e-9 && e1 < 1e-9 && d0 < 1e-9 && d1 < 1e-9;
  return {ok, "max |L(y,y)| " + Fmt("%.1e", at_target) + ", grid minimum misplaced for " + std::to_string(misplaced) +
                  "/21 targets, worked values off by " + Fmt("%.1e", std::max(e0, e1)) + " and " +
                  Fmt("%.1e", std::max(d0, d1)) + " from 0.25 ln 2"};
}

// ---------------------------------------------------------------------------
// 3. Hungarian matching against exhaustive search.

double Cost(const std::vector<std::vector<double>>& c, const std::vector<int>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] >= 0) s += c[i][static_cast<std::size_t>(a[i])];
  return s;
}

// Minimum over all injective maps of the smaller side into the larger one.
double Exhaustive(const std::vector<std::vector<double>>& c) {
  const std::size_t n = c.size(), m = c.front().size();
  const std::size_t big = std::max(n, m), small = std::min(n, m);
  std::vector<int> perm(big);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    // Sum in row order, as Cost does, so equal assignments compare exactly.
    std::vector<int> a(n, -1);
    for (std::size_t i = 0; i < small; ++i) {
      if (n <= m) {
        a[i] = perm[i];
      } else {
        a[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
      }
    }
    best = std::min(best, Cost(c, a));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Result Matching() {
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<int> side(1, 6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int wrong = 0, invalid = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = side(rng), m = side(rng);
    std::vector<std::vector<double>> c(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m)));
    for (auto& row : c)
      for (auto& v : row) v = u(rng);
    const auto a = train::HungarianMatch(c);
    std::vector<int> used;
    for (int j : a)
      if (j >= 0) used.push_back(j);
    std::sort(used.begin(), used.end());
    invalid += a.size() != c.size() || static_cast<int>(used.size()) != std::min(n, m) ||
               std::adjacent_find(used.begin(), used.end()) != used.end();
    wrong += Cost(c, a) != Exhaustive(c);
  }
  return {wrong == 0 && invalid == 0, "1000 random matrices up to 6x6: " + std::to_string(wrong) +
                                          " cost mismatches, " + std::to_string(invalid) + " invalid assignments"};
}

// ---------------------------------------------------------------------------
// 4 and 5. Denoising mask and positive noise.

Result Isolation() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto o = checks::DnIsolation(seed);
    ok = ok && o.pass;
    detail += (detail.empty() ? "" : "; ") + std::string("model ") + std::to_string(seed) + ": " + o.detail;
  }
  return {ok, detail};
}

Result Containment() {
  const auto o = checks::PositiveContainment(10000, 7);
  return {o.pass, "positive centers inside GT, " + o.detail};
}

// ---------------------------------------------------------------------------
// 6. Convergence speed of the assignment modes.

Result Convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const double threshold = 0.70;
  const int eval_every = 250, quality_cap = 2000;
  auto base = DeskConfig();
  base.epochs = 80;  // schedule horizon 4000 steps, shared by every mode
  auto run = [&](train::AssignMode mode, int cap) {
    auto c = base;
    c.assignment = mode;
    const auto r = ablation::TrainToThreshold(c, threshold, cap, eval_every);
    std::string curve;
    for (const auto& e : r.evals) curve += " " + Fmt("%.3f", e.mean_iou);
    std::printf("  %-9s steps to %.2f: %s  (eval every %d:%s)\n", train::AssignModeName(mode), threshold,
                r.steps < 0 ? (">" + std::to_string(cap)).c_str() : std::to_string(r.steps).c_str(), eval_every,
                curve.c_str());
    std::fflush(stdout);
    return r.steps;
  };
  const int q = run(train::AssignMode::kQuality, quality_cap);
  if (q < 0) return {false, "quality mode did not reach 0.70 within " + std::to_string(quality_cap) + " steps"};
  // A mode that has not reached the threshold after 2q steps needs more
  // than twice as many steps as quality mode.
  const int cap = 2 * q;
  const int c = run(train::AssignMode::kCenter, cap);
  const int h = run(train::AssignMode::kHungarian, cap);
  auto ratio = [&](int s) { return s < 0 ? "< " + Fmt("%.2f", q / static_cast<double>(cap)) : Fmt("%.2f", q / static_cast<double>(s)); };
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = (c < 0 || 2 * q <= c) && (h < 0 || 2 * q <= h) && secs < 900.0;
  return {ok, "quality " + std::to_string(q) + " steps; ratio to center " + ratio(c) + ", to Hungarian " + ratio(h) +
                  " (need <= 0.50); " + Fmt("%.0f", secs) + " s of 900"};
}

// ---------------------------------------------------------------------------
// 7. Denoising gain.

constexpr int kTrendEpochs = 20;  // 1000 steps of batch 4

Result Denoising() {
  double on = 0, off = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (auto mode : {train::DnMode::kCenterCorner, train::DnMode::kOff}) {
      auto c = DeskConfig();
      c.epochs = kTrendEpochs;
      c.seed = seed;
      c.dn.mode = mode;
      const double iou = trainer::Trainer<double>(c).Run().FinalIou();
      (mode == train::DnMode::kOff ? off : on) += iou / 3.0;
      per_seed += " " + std::string(train::DnModeName(mode)) + Fmt("=%.3f", iou);
    }
  }
  std::printf("  per seed:%s\n", per_seed.c_str());
  return {on >= off + 0.01, "mean IoU with corner negatives " + Fmt("%.4f", on) + " vs off " + Fmt("%.4f", off) +
                                " (need >= off + 0.01)"};
}

// ---------------------------------------------------------------------------
// 8. Layer truncation.

Result Truncation() {
  auto c = DeskConfig();
  c.epochs = kTrendEpochs;
  c.model.head.layers = 3;
  trainer::Trainer<double> t(c);
  t.Run();
  const auto& model = t.model();
  const auto set = track::EvaluationSet(c.eval_seed, c.eval_sequences, c.eval_frames, c.data);
  int mismatched = 0, compared = 0;
  for (const auto& seq : set) {
    for (int f = 0; f < seq.size(); ++f) {
      ad::Tape<double> tape;
      const auto tokens = model.Encode(tape, seq.Pair(f));
      const auto full = head::Forward(tape, tokens, model.head, 3);
      for (int l = 1; l <= 3; ++l) {
        const auto truncated = Predict(model, seq.Pair(f), l);
        const auto aux = full.Matching(l - 1);
        const auto boxes = head::ToBoxes(aux.boxes);
        for (std::size_t q = 0; q < truncated.size(); ++q) {
          ++compared;
          const auto& b = truncated[q].box;
          mismatched += !(b == boxes[q]) || truncated[q].score != aux.scores.value()[q];
        }
        mismatched += truncated.size() != boxes.size();
      }
    }
  }
  const double l1 = track::MeanIou(model, set, 1, c.hanning), l3 = track::MeanIou(model, set, 3, c.hanning);
  const double l2 = track::MeanIou(model, set, 2, c.hanning);
  return {mismatched == 0 && l3 >= l1 - 0.02,
          std::to_string(mismatched) + "/" + std::to_string(compared) + " truncated predictions differ from the " +
              "full run's auxiliary outputs; mean IoU L1 " + Fmt("%.4f", l1) + ", L2 " + Fmt("%.4f", l2) + ", L3 " +
              Fmt("%.4f", l3) + " (need L3 >= L1 - 0.02)"};
}

// ---------------------------------------------------------------------------
// 9. Cost model.

struct Executed {
  std::uint64_t macs = 0, params = 0;
};

// MACs counted by the tape during one inference pass of the desk model.
Executed Instrumented(const enc::EncoderConfig& ec, const head::HeadConfig& hc, int layers) {
  config::ModelConfig mc{ec, hc};
  const auto m = Model<double>::Create(mc, 3);
  std::mt19937_64 rng(4);
  ad::Tape<double> tape;
  const auto tokens = m.Encode(tape, checks::RandomPair(ec, rng));
  head::Forward(tape, tokens, m.head, layers);
  return {tape.macs(), m.store.ScalarCount()};
}

Result Costs() {
  using flops::ArchSpec;
  using flops::HeadKind;
  using flops::Report;
  const ArchSpec conv = ArchSpec::VitBScale(HeadKind::kConv), dec = ArchSpec::VitBScale(HeadKind::kDecoder);
  config::ModelConfig desk;
  const ArchSpec desk_dec = ArchSpec::FromModel(desk.encoder, desk.Head());
  const ArchSpec desk_conv = desk_dec.WithHead(HeadKind::kConv);

  // (a) conv head independent of the keep ratio, exactly.
  bool a = true;
  for (const ArchSpec* s : {&conv, &desk_conv}) {
    const auto ref = Report(s->WithKeepRatio(1.0)).Of("head");
    for (double keep : {0.7, 0.5, 0.3, 0.1}) {
      const auto h = Report(s->WithKeepRatio(keep)).Of("head");
      a = a && h.macs == ref.macs && h.params == ref.params;
    }
  }
  // (b) decoder pipeline cheaper with elimination.
  bool b = true;
  for (const ArchSpec* s : {&dec, &desk_dec})
    b = b && Report(*s).Total().macs < Report(s->WithKeepRatio(1.0)).Total().macs;
  // (c) ViT-B scale ordering, both sparsity settings.
  const auto rows = flops::Compare(conv, dec);
  bool c = true;
  for (int i = 0; i < 4; i += 2) {
    c = c && rows[i].head == HeadKind::kConv && rows[i + 1].head == HeadKind::kDecoder &&
        rows[i + 1].report.Total().params < rows[i].report.Total().params &&
        rows[i + 1].report.Total().macs < rows[i].report.Total().macs;
  }
  // (d) analytic vs executed at desk scale.
  bool d = true;
  double worst = 0;
  for (double keep : {1.0, 0.5, 0.3}) {
    for (int lt : {1, 3}) {
      auto ec = desk.encoder;
      ec.keep_ratio = keep;
      const auto hc = desk.Head();
      const auto rep = Report(ArchSpec::FromModel(ec, hc, lt));
      const auto e = Instrumented(ec, hc, lt);
      const double rel = std::abs(static_cast<double>(rep.Total().macs) - static_cast<double>(e.macs)) /
                         static_cast<double>(e.macs);
      worst = std::max(worst, rel);
      d = d && rel <= 0.01 && rep.Total().params == e.params;
    }
  }
  auto g = [](const flops::ComparisonRow& r) { return Fmt("%.2f", r.report.Total().macs / 1e9); };
  auto p = [](const flops::ComparisonRow& r) { return Fmt("%.1f", r.report.Total().params / 1e6); };
  return {a && b && c && d,
          std::string("(a) ") + (a ? "ok" : "FAIL") + " (b) " + (b ? "ok" : "FAIL") + " (c) " + (c ? "ok" : "FAIL") +
              " [params " + p(rows[1]) + " < " + p(rows[0]) + " M, GMACs " + g(rows[1]) + " < " + g(rows[0]) +
              " dense, " + g(rows[3]) + " < " + g(rows[2]) + " CE] (d) " + (d ? "ok" : "FAIL") +
              " [worst deviation " + Fmt("%.2e", worst) + "]"};
}

// ---------------------------------------------------------------------------
// 10. Determinism of the `train` command.

std::string Slurp(const std::filesystem::path& p) { return std::filesystem::exists(p) ? ReadFile(p.string()) : ""; }

Result Determinism() {
  const auto root = std::filesystem::temp_directory_path() / ("detrack_acceptance_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  const std::string args =
      " train --seed 11 --epochs 2 --dn on --set pairs_per_epoch=16 --set eval_every=4 --set eval_sequences=2"
      " --log-every 0 --out ";
  bool ran = true;
  for (const char* run : {"a", "b"}) {
    const std::string cmd = std::string("\"") + DETRACK_CLI + "\"" + args + "\"" + (root / run).string() + "\" > /dev/null";
    ran = ran && std::system(cmd.c_str()) == 0;
  }
  bool same = ran;
  std::string detail;
  for (const char* f : {"curve.csv", "eval.csv", "checkpoint.bin"}) {
    const auto x = Slurp(root / "a" / f), y = Slurp(root / "b" / f);
    const bool eq = !x.empty() && x == y;
    same = same && eq;
    detail += std::string(detail.empty() ? "" : ", ") + f + (eq ? " identical" : " DIFFERENT") + " (" +
              std::to_string(x.size()) + " bytes)";
  }
  std::filesystem::remove_all(root);
  return {same, ran ? detail : "train command failed"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Result()> run;
};

}  // namespace
}  // namespace detrack::acceptance

int main(int argc, char** argv) {
  using namespace detrack::acceptance;  // NOLINT(build/namespaces)
  const std::vector<Criterion> all = {
      {1, "gradient suite", Gradients},     {2, "QFL oracle", QflOracle},
      {3, "matching oracle", Matching},     {4, "DN mask isolation", Isolation},
      {5, "positive-noise containment", Containment}, {6, "convergence trend", Convergence},
      {7, "denoising trend", Denoising},    {8, "layer truncation", Truncation},
      {9, "FLOPs model", Costs},            {10, "determinism", Determinism},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", c.id, r.pass ? "PASS" : "FAIL", c.name, r.detail.c_str(), secs);
    std::fflush(stdout);
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}
