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

// Model and training configuration, read from line-oriented `key = value`
// text. Every key is listed in ConfigKeys() with its documentation.

#ifndef DETRACK_CONFIG_HPP_
#define DETRACK_CONFIG_HPP_

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "detrack/data.hpp"
#include "detrack/encoder.hpp"
#include "detrack/geometry.hpp"
#include "detrack/head.hpp"
#include "detrack/training.hpp"

namespace detrack::config {

struct ModelConfig {
  enc::EncoderConfig encoder;
  head::HeadConfig head;

  void Validate() const {
    encoder.Validate();
    head::HeadConfig h = head;
    h.enc_dim = encoder.dim;
    h.Validate();
  }
  head::HeadConfig Head() const {
    head::HeadConfig h = head;
    h.enc_dim = encoder.dim;
    return h;
  }
};

struct TrainConfig {
  ModelConfig model;
  std::uint64_t seed = 1;
  int epochs = 10;
  int pairs_per_epoch = 200;
  int batch_size = 4;
  double lr_encoder = 5e-4;
  double lr_decoder = 5e-3;
  double weight_decay = 1e-4;
  double lr_drop_at = 0.8;  // fraction of the steps after which the rate drops
  double lr_drop_factor = 0.1;
  double grad_clip = 1.0;   // global gradient norm, 0 disables
  train::AssignMode assignment = train::AssignMode::kQuality;
  int k_loc = 8;
  train::DenoisingConfig dn;
  train::LossWeights loss;
  int layers_test = 0;  // 0 = every trained layer
  data::GeneratorConfig data;
  int eval_every = 0;   // steps between evaluations, 0 = final only
  int eval_sequences = 8;
  int eval_frames = 10;
  std::uint64_t eval_seed = 1000003;
  bool hanning = true;

  int steps() const { return epochs * pairs_per_epoch / batch_size; }
  int LayersTest() const { return layers_test == 0 ? model.head.layers : layers_test; }

  void Validate() const {
    model.Validate();
    dn.Validate();
    data.Validate();
    if (data.template_size != model.encoder.template_size || data.search_size != model.encoder.search_size) {
      throw ConfigError("data crop sizes must match the encoder input sizes");
    }
    if (model.encoder.channels != 3) throw ConfigError("synthetic images have 3 channels");
    if (epochs < 0 || pairs_per_epoch < 1 || batch_size < 1) throw ConfigError("epochs/pairs/batch out of range");
    if (!(lr_encoder >= 0) || !(lr_decoder >= 0) || !(weight_decay >= 0)) {
      throw ConfigError("learning rates and weight decay must be nonnegative");
    }
    if (!(lr_drop_at >= 0 && lr_drop_at <= 1) || !(lr_drop_factor > 0)) throw ConfigError("bad lr drop");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be nonnegative");
    if (k_loc < 1) throw ConfigError("k_loc must be at least 1");
    if (layers_test < 0 || layers_test > model.head.layers) {
      throw ConfigError("layers_test must lie in [0, layers_train]");
    }
    if (eval_every < 0 || eval_sequences < 1 || eval_frames < 1) throw ConfigError("bad evaluation settings");
  }
};

struct Key {
  std::string name;
  std::string doc;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

namespace internal {

inline std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V ParseNumber(const std::string& key, const std::string& text) {
  V v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return v;
}

inline bool ParseBool(const std::string& key, const std::string& t) {
  if (t == "true" || t == "1" || t == "on") return true;
  if (t == "false" || t == "0" || t == "off") return false;
  throw ConfigError("bad value for " + key + ": '" + t + "' (true|false)");
}

inline std::string Format(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::vector<int> ParseIntList(const std::string& key, const std::string& text) {
  std::vector<int> out;
  if (Trim(text).empty() || Trim(text) == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(ParseNumber<int>(key, Trim(item)));
  return out;
}

inline std::string FormatIntList(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename V>
Key Number(std::string name, std::string doc, std::function<V&(TrainConfig&)> field) {
  Key k;
  k.name = name;
  k.doc = std::move(doc);
  k.set = [field, name](TrainConfig& c, const std::string& v) { field(c) = ParseNumber<V>(name, v); };
  k.get = [field](const TrainConfig& c) {
    const V v = field(const_cast<TrainConfig&>(c));
    if constexpr (std::is_floating_point_v<V>) {
      return Format(v);
    } else {
      return std::to_string(v);
    }
  };
  return k;
}

}  // namespace internal

inline const std::vector<Key>& ConfigKeys() {
  using internal::Number;
  using C = TrainConfig;
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back(Number<std::uint64_t>("seed", "training seed (init, data, noise)", [](C& c) -> auto& { return c.seed; }));
    k.push_back(Number<int>("epochs", "training epochs", [](C& c) -> auto& { return c.epochs; }));
    k.push_back(Number<int>("pairs_per_epoch", "image pairs per epoch", [](C& c) -> auto& { return c.pairs_per_epoch; }));
    k.push_back(Number<int>("batch_size", "pairs per optimizer step", [](C& c) -> auto& { return c.batch_size; }));
    k.push_back(Number<double>("lr_encoder", "encoder learning rate", [](C& c) -> auto& { return c.lr_encoder; }));
    k.push_back(Number<double>("lr_decoder", "head learning rate", [](C& c) -> auto& { return c.lr_decoder; }));
    k.push_back(Number<double>("weight_decay", "AdamW decoupled weight decay", [](C& c) -> auto& { return c.weight_decay; }));
    k.push_back(Number<double>("lr_drop_at", "fraction of steps before the rate drop", [](C& c) -> auto& { return c.lr_drop_at; }));
    k.push_back(Number<double>("lr_drop_factor", "rate multiplier after the drop", [](C& c) -> auto& { return c.lr_drop_factor; }));
    k.push_back(Number<double>("grad_clip", "global gradient-norm clip, 0 = off", [](C& c) -> auto& { return c.grad_clip; }));
    k.push_back({"assignment", "label assignment: quality|hard|center|hungarian",
                 [](C& c, const std::string& v) { c.assignment = train::ParseAssignMode(v); },
                 [](const C& c) { return std::string(train::AssignModeName(c.assignment)); }});
    k.push_back(Number<int>("k_loc", "top-scoring positives given the localization loss", [](C& c) -> auto& { return c.k_loc; }));
    k.push_back({"dn", "denoising: off|on|embedding|outside (on = center positive, corner negative)",
                 [](C& c, const std::string& v) { c.dn.mode = train::ParseDnMode(v); },
                 [](const C& c) { return std::string(train::DnModeName(c.dn.mode)); }});
    k.push_back(Number<int>("dn_groups", "denoising groups", [](C& c) -> auto& { return c.dn.groups; }));
    k.push_back(Number<double>("dn_lambda1", "positive center noise", [](C& c) -> auto& { return c.dn.lambda1; }));
    k.push_back(Number<double>("dn_lambda2", "positive scale noise", [](C& c) -> auto& { return c.dn.lambda2; }));
    k.push_back(Number<double>("dn_lambda1_neg", "negative center noise", [](C& c) -> auto& { return c.dn.lambda1_neg; }));
    k.push_back(Number<double>("dn_lambda2_neg", "negative scale noise", [](C& c) -> auto& { return c.dn.lambda2_neg; }));
    k.push_back(Number<double>("loss_cls", "classification loss weight", [](C& c) -> auto& { return c.loss.cls; }));
    k.push_back(Number<double>("loss_loc", "localization loss weight", [](C& c) -> auto& { return c.loss.loc; }));
    k.push_back(Number<double>("loss_giou", "GIoU weight inside the localization loss", [](C& c) -> auto& { return c.loss.giou; }));
    k.push_back(Number<double>("loss_l1", "L1 weight inside the localization loss", [](C& c) -> auto& { return c.loss.l1; }));
    k.push_back(Number<double>("qfl_beta", "quality focal loss exponent", [](C& c) -> auto& { return c.loss.beta; }));
    k.push_back(Number<int>("layers_train", "decoder layers trained", [](C& c) -> auto& { return c.model.head.layers; }));
    k.push_back(Number<int>("layers_test", "decoder layers run at inference, 0 = all", [](C& c) -> auto& { return c.layers_test; }));
    k.push_back(Number<int>("difficulty", "synthetic difficulty 0|1|2", [](C& c) -> auto& { return c.data.difficulty; }));
    k.push_back(Number<int>("eval_every", "steps between evaluations, 0 = final only", [](C& c) -> auto& { return c.eval_every; }));
    k.push_back(Number<int>("eval_sequences", "evaluation sequences", [](C& c) -> auto& { return c.eval_sequences; }));
    k.push_back(Number<int>("eval_frames", "frames per evaluation sequence", [](C& c) -> auto& { return c.eval_frames; }));
    k.push_back(Number<std::uint64_t>("eval_seed", "seed of the evaluation sequences", [](C& c) -> auto& { return c.eval_seed; }));
    k.push_back({"hanning", "apply the Hanning window at inference",
                 [](C& c, const std::string& v) { c.hanning = internal::ParseBool("hanning", v); },
                 [](const C& c) { return std::string(c.hanning ? "true" : "false"); }});
    k.push_back(Number<int>("enc_dim", "encoder width", [](C& c) -> auto& { return c.model.encoder.dim; }));
    k.push_back(Number<int>("enc_heads", "encoder attention heads", [](C& c) -> auto& { return c.model.encoder.heads; }));
    k.push_back(Number<int>("enc_layers", "encoder layers", [](C& c) -> auto& { return c.model.encoder.layers; }));
    k.push_back(Number<int>("mlp_ratio", "encoder MLP expansion", [](C& c) -> auto& { return c.model.encoder.mlp_ratio; }));
    k.push_back(Number<int>("patch", "patch side in pixels", [](C& c) -> auto& { return c.model.encoder.patch; }));
    k.push_back({"template_size", "template crop side in pixels",
                 [](C& c, const std::string& v) {
                   c.model.encoder.template_size = c.data.template_size = internal::ParseNumber<int>("template_size", v);
                 },
                 [](const C& c) { return std::to_string(c.model.encoder.template_size); }});
    k.push_back({"search_size", "search crop side in pixels",
                 [](C& c, const std::string& v) {
                   c.model.encoder.search_size = c.data.search_size = internal::ParseNumber<int>("search_size", v);
                 },
                 [](const C& c) { return std::to_string(c.model.encoder.search_size); }});
    k.push_back({"ce_layers", "0-based encoder layers that eliminate tokens, comma list or none",
                 [](C& c, const std::string& v) { c.model.encoder.ce_layers = internal::ParseIntList("ce_layers", v); },
                 [](const C& c) { return internal::FormatIntList(c.model.encoder.ce_layers); }});
    k.push_back(Number<double>("keep_ratio", "fraction of search tokens kept per elimination", [](C& c) -> auto& { return c.model.encoder.keep_ratio; }));
    k.push_back(Number<int>("dec_dim", "decoder width", [](C& c) -> auto& { return c.model.head.dim; }));
    k.push_back(Number<int>("dec_heads", "decoder attention heads", [](C& c) -> auto& { return c.model.head.heads; }));
    k.push_back(Number<int>("dec_points", "deformable sampling points per head", [](C& c) -> auto& { return c.model.head.points; }));
    k.push_back(Number<int>("queries", "decoder queries", [](C& c) -> auto& { return c.model.head.queries; }));
    k.push_back(Number<int>("dec_ffn", "decoder feed-forward width", [](C& c) -> auto& { return c.model.head.ffn; }));
    k.push_back(Number<double>("anchor_size", "side of the query-selection anchor boxes", [](C& c) -> auto& { return c.model.head.anchor_size; }));
    k.push_back({"detach_refs", "stop gradients through reference boxes between layers",
                 [](C& c, const std::string& v) { c.model.head.detach_refs = internal::ParseBool("detach_refs", v); },
                 [](const C& c) { return std::string(c.model.head.detach_refs ? "true" : "false"); }});
    return k;
  }();
  return keys;
}

// `key = value` lines; '#' starts a comment. Duplicate keys: last wins.
inline std::vector<std::pair<std::string, std::string>> ParseLines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = internal::Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const std::string key = internal::Trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    out.emplace_back(key, internal::Trim(line.substr(eq + 1)));
  }
  return out;
}

inline void Set(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : ConfigKeys()) {
    if (k.name == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void Apply(TrainConfig& c, const std::string& text) {
  for (const auto& [k, v] : ParseLines(text)) Set(c, k, v);
}

inline TrainConfig FromText(const std::string& text) {
  TrainConfig c;
  Apply(c, text);
  c.Validate();
  return c;
}

inline std::string ToText(const TrainConfig& c) {
  std::string s;
  for (const auto& k : ConfigKeys()) s += k.name + " = " + k.get(c) + "\n";
  return s;
}

inline std::string Documentation() {
  std::string s;
  for (const auto& k : ConfigKeys()) s += k.name + "\n    " + k.doc + " (default " + k.get(TrainConfig{}) + ")\n";
  return s;
}

}  // namespace detrack::config

#endif  // DETRACK_CONFIG_HPP_
