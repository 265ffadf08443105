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

// Command-line front end: training, tracking, ablations, cost reports and
// self-checks.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "detrack/ablation.hpp"
#include "detrack/checks.hpp"
#include "detrack/config.hpp"
#include "detrack/flops.hpp"
#include "detrack/model.hpp"
#include "detrack/track.hpp"
#include "detrack/trainer.hpp"

namespace {

using namespace detrack;  // NOLINT(build/namespaces)

// Flags shared by `train` and `ablate`; each one overrides the config key of
// the same meaning.
struct TrainFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, layers_train, layers_test;
  std::optional<std::string> assignment, dn;

  void Register(CLI::App* app) {
    app->add_option("--config", config_file, "config file of 'key = value' lines")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one config key, as key=value (repeatable)");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--epochs", epochs, "epochs of pairs_per_epoch synthetic pairs");
    app->add_option("--assignment", assignment, "label assignment")
        ->check(CLI::IsMember({"quality", "hard", "center", "hungarian"}));
    app->add_option("--dn", dn, "denoising branch")->check(CLI::IsMember({"on", "off", "embedding", "outside"}));
    app->add_option("--layers-train", layers_train, "decoder layers trained");
    app->add_option("--layers-test", layers_test, "decoder layers run at test time, 0 = all");
  }

  config::TrainConfig Build() const {
    config::TrainConfig c;
    if (!config_file.empty()) config::Apply(c, ReadFile(config_file));
    for (const auto& kv : sets) {
      if (kv.find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      config::Apply(c, kv);
    }
    if (seed) c.seed = *seed;
    if (epochs) c.epochs = *epochs;
    if (assignment) config::Set(c, "assignment", *assignment);
    if (dn) config::Set(c, "dn", *dn);
    if (layers_train) c.model.head.layers = *layers_train;
    if (layers_test) c.layers_test = *layers_test;
    c.Validate();
    return c;
  }
};

int Train(const TrainFlags& flags, const std::string& out, int log_every) {
  const auto cfg = flags.Build();
  std::printf("training %d steps (%s assignment, dn %s) -> %s\n", cfg.steps(),
              train::AssignModeName(cfg.assignment), train::DnModeName(cfg.dn.mode), out.c_str());
  trainer::Trainer<double> t(cfg);
  const auto a = t.Run([&](const trainer::StepLog& s, const trainer::EvalLog* e) {
    if (log_every > 0 && s.step % log_every == 0)
      std::printf("step %6d  loss %.4f  iou %.3f\n", s.step, s.loss, s.iou);
    if (e != nullptr) std::printf("step %6d  eval mean IoU %.4f\n", e->step, e->mean_iou);
    std::fflush(stdout);
  });
  trainer::WriteArtifacts(out, a);
  const auto rows = flops::Compare(flops::ArchSpec::FromModel(cfg.model.encoder, cfg.model.Head(), cfg.LayersTest())
                                       .WithHead(flops::HeadKind::kConv),
                                   flops::ArchSpec::FromModel(cfg.model.encoder, cfg.model.Head(), cfg.LayersTest()));
  WriteFile(out + "/flops.txt", flops::FormatTable(rows));
  WriteFile(out + "/flops.json", flops::ToJson(rows).dump(2) + "\n");
  std::printf("final mean IoU %.4f\n", a.FinalIou());
  return 0;
}

int TrackCommand(const std::string& checkpoint, int sequences, int frames, std::optional<std::uint64_t> seed,
                 std::optional<int> layers_test, bool no_hanning, const std::string& out) {
  const auto ckpt = Deserialize(ReadFile(checkpoint));
  auto cfg = config::FromText(ckpt.config_text);
  if (layers_test) cfg.layers_test = *layers_test;
  cfg.Validate();
  const auto model = LoadModel<double>(ckpt);
  const auto set = track::EvaluationSet(seed.value_or(cfg.eval_seed), sequences, frames, cfg.data);
  std::string csv = "sequence,frame,cx,cy,w,h,score,iou\n";
  double sum = 0;
  for (std::size_t s = 0; s < set.size(); ++s) {
    const auto r = track::Track(model, set[s], cfg.LayersTest(), !no_hanning);
    for (std::size_t f = 0; f < r.boxes.size(); ++f) {
      const auto& b = r.boxes[f];
      csv += std::to_string(s) + "," + std::to_string(f) + "," + trainer::Num(b.cx) + "," + trainer::Num(b.cy) +
             "," + trainer::Num(b.w) + "," + trainer::Num(b.h) + "," + trainer::Num(r.scores[f]) + "," +
             trainer::Num(r.iou[f]) + "\n";
    }
    std::printf("sequence %zu  mean IoU %.4f\n", s, r.MeanIou());
    sum += r.MeanIou();
  }
  if (!out.empty()) WriteFile(out, csv);
  std::printf("mean IoU over %zu sequences, %d decoder layers: %.4f\n", set.size(), cfg.LayersTest(),
              sum / static_cast<double>(set.size()));
  return 0;
}

template <typename V>
std::vector<V> ParseList(const std::string& text) {
  std::vector<V> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    v.push_back(static_cast<V>(std::stoll(item)));
  }
  if (v.empty()) throw std::invalid_argument("empty list '" + text + "'");
  return v;
}

int Ablate(const std::string& study, const TrainFlags& flags, const std::string& seeds, const std::string& budgets,
           const std::string& out) {
  ablation::AblationConfig ac;
  ac.base = flags.Build();
  ac.seeds = ParseList<std::uint64_t>(seeds);
  ac.budgets = ParseList<int>(budgets);
  const auto tables = ablation::RunAblation(ablation::ParseStudy(study), ac, [](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  });
  ablation::WriteTables(out, tables);
  for (const auto& t : tables) std::printf("\n%s.csv\n%s", t.name.c_str(), t.Csv().c_str());
  return 0;
}

int Flops(bool desk, const std::string& config_file, const std::string& format, const std::string& out) {
  std::vector<flops::ComparisonRow> rows;
  if (desk) {
    config::TrainConfig c;
    if (!config_file.empty()) c = config::FromText(ReadFile(config_file));
    const auto spec = flops::ArchSpec::FromModel(c.model.encoder, c.model.Head(), c.LayersTest());
    rows = flops::Compare(spec.WithHead(flops::HeadKind::kConv), spec);
  } else {
    rows = flops::Compare(flops::ArchSpec::VitBScale(flops::HeadKind::kConv),
                          flops::ArchSpec::VitBScale(flops::HeadKind::kDecoder));
  }
  const std::string text = format == "json" ? flops::ToJson(rows).dump(2) + "\n" : flops::FormatTable(rows);
  if (out.empty()) {
    std::cout << text;
  } else {
    WriteFile(out, text);
  }
  return 0;
}

int GradCheck(int trials, double tol) {
  bool ok = true;
  for (const auto& e : checks::GradientSuite(trials)) {
    const bool pass = e.result.Passed(tol);
    ok = ok && pass;
    std::printf("%-4s %-28s max rel error %.3e  (%zu entries)\n", pass ? "ok" : "FAIL", e.name.c_str(),
                e.result.max_rel_error, e.result.checked);
  }
  std::printf("%s\n", ok ? "all gradients match" : "gradient mismatch");
  return ok ? 0 : 1;
}

int SelfTest() {
  bool ok = true;
  auto report = [&](const std::string& name, bool pass, const std::string& detail) {
    ok = ok && pass;
    std::printf("%-4s %-22s %s\n", pass ? "ok" : "FAIL", name.c_str(), detail.c_str());
  };
  double worst = 0;
  bool grads = true;
  for (const auto& e : checks::GradientSuite(1)) {
    grads = grads && e.result.Passed(1e-4);
    worst = std::max(worst, e.result.max_rel_error);
  }
  report("gradients", grads, "max rel error " + std::to_string(worst));
  const auto iso = checks::DnIsolation();
  report("denoising mask", iso.pass, iso.detail);
  const auto inside = checks::PositiveContainment(1000);
  report("positive noise", inside.pass, inside.detail);

  const auto rows = flops::Compare(flops::ArchSpec::VitBScale(flops::HeadKind::kConv),
                                   flops::ArchSpec::VitBScale(flops::HeadKind::kDecoder));
  bool fewer = true;
  for (int i = 0; i < 4; i += 2) {
    fewer = fewer && rows[i + 1].report.Total().macs < rows[i].report.Total().macs &&
            rows[i + 1].report.Total().params < rows[i].report.Total().params;
  }
  report("cost ordering", fewer, "decoder head cheaper than conv head at ViT-B scale");

  config::TrainConfig c;
  c.epochs = 1;
  c.pairs_per_epoch = 4;
  c.batch_size = 2;
  c.eval_sequences = 1;
  c.eval_frames = 2;
  const auto a = trainer::Trainer<double>(c).Run();
  const auto b = trainer::Trainer<double>(c).Run();
  report("determinism", trainer::StepsCsv(a) == trainer::StepsCsv(b) && Serialize(a.checkpoint) == Serialize(b.checkpoint),
         "two short runs with one seed");
  std::printf("%s\n", ok ? "self-test passed" : "self-test FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detrack: transformer tracker with a sparse decoder head, on synthetic data"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and write curves and a checkpoint");
  TrainFlags train_flags;
  train_flags.Register(train);
  std::string train_out = "run";
  int log_every = 50;
  train->add_option("--out", train_out, "output directory");
  train->add_option("--log-every", log_every, "steps between progress lines, 0 = evaluations only");

  auto* track_cmd = app.add_subcommand("track", "track synthetic sequences with a checkpoint");
  std::string checkpoint, track_out;
  int sequences = 8, frames = 10;
  std::optional<std::uint64_t> track_seed;
  std::optional<int> track_layers;
  bool no_hanning = false;
  track_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  track_cmd->add_option("--sequences", sequences, "number of sequences")->check(CLI::PositiveNumber);
  track_cmd->add_option("--frames", frames, "frames per sequence")->check(CLI::PositiveNumber);
  track_cmd->add_option("--seed", track_seed, "seed of the first sequence (default: the evaluation seed)");
  track_cmd->add_option("--layers-test", track_layers, "decoder layers run, 0 = all trained");
  track_cmd->add_flag("--no-hanning", no_hanning, "pure score argmax without the window");
  track_cmd->add_option("--out", track_out, "per-frame CSV file");

  auto* ablate = app.add_subcommand("ablate", "run an ablation study and write CSV tables");
  TrainFlags ablate_flags;
  ablate_flags.Register(ablate);
  std::string study, seeds = "1", budgets = "5,10,20", ablate_out = "ablation";
  ablate->add_option("study", study, "assignment, denoising or layers")
      ->required()
      ->check(CLI::IsMember({"assignment", "denoising", "layers"}));
  ablate->add_option("--seeds", seeds, "comma-separated seeds");
  ablate->add_option("--budgets", budgets, "comma-separated epoch budgets (assignment study)");
  ablate->add_option("--out", ablate_out, "output directory");

  auto* flops_cmd = app.add_subcommand("flops", "parameter and MAC counts, conv head vs decoder head");
  bool desk = false;
  std::string flops_config, format = "text", flops_out;
  flops_cmd->add_flag("--desk", desk, "use the desk model instead of the ViT-B scale spec");
  flops_cmd->add_option("--config", flops_config, "config file for --desk")->check(CLI::ExistingFile);
  flops_cmd->add_option("--format", format, "text or json")->check(CLI::IsMember({"text", "json"}));
  flops_cmd->add_option("--out", flops_out, "output file (default: stdout)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  int trials = 3;
  double tol = 1e-4;
  grad->add_option("--trials", trials, "random inputs per check")->check(CLI::PositiveNumber);
  grad->add_option("--tol", tol, "max relative error");

  auto* self = app.add_subcommand("selftest", "quick checks of gradients, masks, costs and determinism");

  auto* keys = app.add_subcommand("config-keys", "list the config file keys");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return Train(train_flags, train_out, log_every);
    if (*track_cmd) return TrackCommand(checkpoint, sequences, frames, track_seed, track_layers, no_hanning, track_out);
    if (*ablate) return Ablate(study, ablate_flags, seeds, budgets, ablate_out);
    if (*flops_cmd) return Flops(desk, flops_config, format, flops_out);
    if (*grad) return GradCheck(trials, tol);
    if (*self) return SelfTest();
    if (*keys) {
      std::cout << config::Documentation();
      return 0;
    }
  } catch (const trainer::TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n" << e.snapshot() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
