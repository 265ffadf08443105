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

// Analytic parameter and multiply-accumulate (MAC) counts for the tracker
// with either a dense convolutional head or the sparse decoder head.
// Linear, attention and convolution products are counted; norms,
// activations, softmax and sampling-location arithmetic are not.

#ifndef DETRACK_FLOPS_HPP_
#define DETRACK_FLOPS_HPP_

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "detrack/encoder.hpp"
#include "detrack/geometry.hpp"
#include "detrack/head.hpp"

namespace detrack::flops {

enum class HeadKind { kConv, kDecoder };

inline std::string HeadKindName(HeadKind k) { return k == HeadKind::kConv ? "conv" : "decoder"; }

struct ArchSpec {
  // Encoder.
  int enc_layers = 12;
  int enc_dim = 768;
  int enc_heads = 12;
  int mlp_ratio = 4;
  int patch = 16;
  int channels = 3;
  int template_size = 128;
  int search_size = 256;
  std::vector<int> ce_layers = {3, 6, 9};
  double keep_ratio = 0.7;

  HeadKind head = HeadKind::kDecoder;

  // Decoder head.
  int dec_layers = 3;
  int dec_layers_test = 0;  // layers run at inference, 0 = all
  int dec_dim = 256;
  int dec_heads = 8;
  int dec_points = 4;
  int queries = 64;
  int dec_ffn = 2048;

  // Convolutional head: each branch is a stack of k x k convolutions with
  // batch norm over `conv_channels`, then a 1 x 1 convolution to its outputs.
  std::vector<int> conv_channels = {256, 128, 64, 32};
  int conv_kernel = 3;
  std::vector<int> conv_branch_outputs = {1, 2, 2};  // center, offset, size

  int TemplateTokens() const { return (template_size / patch) * (template_size / patch); }
  int SearchSide() const { return search_size / patch; }
  int SearchTokens() const { return SearchSide() * SearchSide(); }
  int DecoderLayersRun() const { return dec_layers_test == 0 ? dec_layers : dec_layers_test; }
  bool Sparse() const { return keep_ratio < 1.0 && !ce_layers.empty(); }

  ArchSpec WithHead(HeadKind k) const {
    ArchSpec s = *this;
    s.head = k;
    return s;
  }
  ArchSpec WithKeepRatio(double r) const {
    ArchSpec s = *this;
    s.keep_ratio = r;
    return s;
  }

  void Validate() const {
    const bool positive = enc_layers > 0 && enc_dim > 0 && enc_heads > 0 && mlp_ratio > 0 && patch > 0 &&
                          channels > 0 && template_size > 0 && search_size > 0 && dec_layers > 0 &&
                          dec_dim > 0 && dec_heads > 0 && dec_points > 0 && queries > 0 && dec_ffn > 0 &&
                          conv_kernel > 0 && !conv_channels.empty() && !conv_branch_outputs.empty();
    if (!positive) throw ConfigError("architecture counts must be positive");
    if (template_size % patch != 0 || search_size % patch != 0) {
      throw ConfigError("image sides must be multiples of the patch size");
    }
    if (enc_dim % enc_heads != 0 || dec_dim % dec_heads != 0) {
      throw ConfigError("attention widths must be divisible by their head counts");
    }
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("keep ratio must lie in (0, 1]");
    for (int l : ce_layers)
      if (l < 0 || l >= enc_layers) throw ConfigError("elimination layer outside the encoder");
    if (dec_layers_test < 0 || dec_layers_test > dec_layers) {
      throw ConfigError("decoder test layers must lie in [0, " + std::to_string(dec_layers) + "]");
    }
    for (int c : conv_channels)
      if (c <= 0) throw ConfigError("conv channels must be positive");
    for (int c : conv_branch_outputs)
      if (c <= 0) throw ConfigError("conv branch outputs must be positive");
  }

  // ViT-B encoder with 128/256 inputs and elimination as in OSTrack.
  static ArchSpec VitBScale(HeadKind head) {
    ArchSpec s;
    s.head = head;
    return s;
  }

  // Mirrors a trainable model configuration.
  static ArchSpec FromModel(const enc::EncoderConfig& e, const head::HeadConfig& h, int layers_test = 0) {
    ArchSpec s;
    s.enc_layers = e.layers;
    s.enc_dim = e.dim;
    s.enc_heads = e.heads;
    s.mlp_ratio = e.mlp_ratio;
    s.patch = e.patch;
    s.channels = e.channels;
    s.template_size = e.template_size;
    s.search_size = e.search_size;
    s.ce_layers = e.ce_layers;
    s.keep_ratio = e.keep_ratio;
    s.head = HeadKind::kDecoder;
    s.dec_layers = h.layers;
    s.dec_layers_test = layers_test;
    s.dec_dim = h.dim;
    s.dec_heads = h.heads;
    s.dec_points = h.points;
    s.queries = h.queries;
    s.dec_ffn = h.ffn;
    s.conv_channels = {2 * h.dim, h.dim, h.dim / 2, h.dim / 4};
    return s;
  }
};

struct Cost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  friend Cost operator+(Cost a, const Cost& b) { return a += b; }
  friend Cost operator*(std::uint64_t k, const Cost& c) { return {k * c.params, k * c.macs}; }
  friend bool operator==(const Cost&, const Cost&) = default;
};

struct Stage {
  std::string name;
  Cost cost;
};

struct CostReport {
  std::vector<Stage> stages;  // encoder, projection, query_selection, head

  Cost Total() const {
    Cost t;
    for (const auto& s : stages) t += s.cost;
    return t;
  }
  const Cost& Of(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return s.cost;
    throw std::out_of_range("no stage named " + name);
  }
};

using U = std::uint64_t;

inline Cost CostLinear(U n_tokens, U d_in, U d_out, bool bias = true) {
  return {d_in * d_out + (bias ? d_out : 0), n_tokens * d_in * d_out};
}

inline Cost CostLayerNorm(U dim) { return {2 * dim, 0}; }

// Multi-head attention of nq queries over nk keys; keys carry no bias.
inline Cost CostMhsa(U nq, U nk, U dim) {
  Cost c = CostLinear(nq, dim, dim) + CostLinear(nk, dim, dim, false) + CostLinear(nk, dim, dim) +
           CostLinear(nq, dim, dim);
  c.macs += 2 * nq * nk * dim;  // scores and weighted values over all heads
  return c;
}

// Search tokens left after each encoder layer.
inline std::vector<int> SearchTokensPerLayer(const ArchSpec& s) {
  std::vector<int> out;
  int n = s.SearchTokens();
  for (int l = 0; l < s.enc_layers; ++l) {
    if (s.keep_ratio < 1.0 && std::find(s.ce_layers.begin(), s.ce_layers.end(), l) != s.ce_layers.end()) {
      n = enc::KeepCount(n, s.keep_ratio);
    }
    out.push_back(n);
  }
  return out;
}

inline int KeptSearchTokens(const ArchSpec& s) { return SearchTokensPerLayer(s).back(); }

// Attention runs on the tokens entering a layer; elimination follows the
// attention residual, so the MLP sees the kept tokens only.
inline Cost CostEncoder(const ArchSpec& s) {
  s.Validate();
  const U d = static_cast<U>(s.enc_dim), nt = static_cast<U>(s.TemplateTokens());
  Cost c = CostLinear(nt + static_cast<U>(s.SearchTokens()), static_cast<U>(s.channels * s.patch * s.patch), d);
  c.params += (nt + static_cast<U>(s.SearchTokens())) * d;  // positional embeddings
  const auto kept = SearchTokensPerLayer(s);
  U n = nt + static_cast<U>(s.SearchTokens());
  for (int l = 0; l < s.enc_layers; ++l) {
    const U after = nt + static_cast<U>(kept[static_cast<std::size_t>(l)]);
    const U hidden = static_cast<U>(s.mlp_ratio) * d;
    c += CostLayerNorm(d) + CostMhsa(n, n, d) + CostLayerNorm(d);
    c += CostLinear(after, d, hidden) + CostLinear(after, hidden, d);
    n = after;
  }
  c += CostLayerNorm(d);
  return c;
}

// Dense head over the full search grid: dropped tokens are padded back, so
// the cost ignores elimination.
inline Cost CostConvHead(const ArchSpec& s) {
  s.Validate();
  const U hw = static_cast<U>(s.SearchTokens()), k2 = static_cast<U>(s.conv_kernel * s.conv_kernel);
  Cost branch;
  U cin = static_cast<U>(s.enc_dim);
  for (int ch : s.conv_channels) {
    const U cout = static_cast<U>(ch);
    branch += Cost{cin * cout * k2 + cout + 2 * cout, hw * cin * cout * k2};  // conv + bias + norm
    cin = cout;
  }
  Cost c;
  for (int out : s.conv_branch_outputs) {
    c += branch + Cost{cin * static_cast<U>(out) + static_cast<U>(out), hw * cin * static_cast<U>(out)};
  }
  return c;
}

inline Cost CostBoxMlp(U n, U d) { return CostLinear(n, d, d) + CostLinear(n, d, d) + CostLinear(n, d, 4); }

inline Cost CostProjection(const ArchSpec& s) {
  return CostLinear(static_cast<U>(KeptSearchTokens(s)), static_cast<U>(s.enc_dim), static_cast<U>(s.dec_dim));
}

inline Cost CostQuerySelection(const ArchSpec& s) {
  const U n = static_cast<U>(KeptSearchTokens(s)), d = static_cast<U>(s.dec_dim);
  return CostLinear(n, d, 1) + CostBoxMlp(n, d);
}

// Decoder layers plus the shared box and score heads. Deformable
// attention gathers a fixed number of points per query; only the value
// projection touches every kept token.
inline Cost CostDecoderLayers(const ArchSpec& s) {
  s.Validate();
  const U nk = static_cast<U>(KeptSearchTokens(s));
  const U q = static_cast<U>(std::min(s.queries, KeptSearchTokens(s)));
  const U d = static_cast<U>(s.dec_dim), f = static_cast<U>(s.dec_ffn);
  const U mk = static_cast<U>(s.dec_heads * s.dec_points);
  Cost layer = CostMhsa(q, q, d) + CostLayerNorm(d);
  layer += CostLinear(nk, d, d);      // value
  layer += CostLinear(q, d, 2 * mk);  // offsets
  layer += CostLinear(q, d, mk);      // point weights
  layer.macs += 5 * q * mk * (d / static_cast<U>(s.dec_heads));  // bilinear taps and weighting
  layer += CostLinear(q, d, d) + CostLayerNorm(d);               // output
  layer += CostLinear(q, d, f) + CostLinear(q, f, d) + CostLayerNorm(d);
  const Cost shared_per_layer = CostBoxMlp(q, d) + CostLinear(q, d, 1);

  const U run = static_cast<U>(s.DecoderLayersRun()), trained = static_cast<U>(s.dec_layers);
  Cost c;
  c.params = trained * layer.params + shared_per_layer.params;
  c.macs = run * (layer.macs + shared_per_layer.macs);
  return c;
}

inline CostReport Report(const ArchSpec& s) {
  s.Validate();
  CostReport r;
  r.stages.push_back({"encoder", CostEncoder(s)});
  if (s.head == HeadKind::kConv) {
    r.stages.push_back({"projection", {}});
    r.stages.push_back({"query_selection", {}});
    r.stages.push_back({"head", CostConvHead(s)});
  } else {
    r.stages.push_back({"projection", CostProjection(s)});
    r.stages.push_back({"query_selection", CostQuerySelection(s)});
    r.stages.push_back({"head", CostDecoderLayers(s)});
  }
  return r;
}

struct ComparisonRow {
  bool sparse = false;
  HeadKind head = HeadKind::kConv;
  CostReport report;
};

// Four rows: {no elimination, elimination} x {conv head, decoder head}.
// The keep ratio of each spec applies to its elimination rows.
inline std::vector<ComparisonRow> Compare(const ArchSpec& conv, const ArchSpec& dec) {
  std::vector<ComparisonRow> rows;
  for (bool sparse : {false, true}) {
    for (const ArchSpec* s : {&conv, &dec}) {
      const HeadKind kind = s == &conv ? HeadKind::kConv : HeadKind::kDecoder;
      ArchSpec a = s->WithHead(kind);
      if (!sparse) a = a.WithKeepRatio(1.0);
      rows.push_back({sparse && a.Sparse(), kind, Report(a)});
    }
  }
  return rows;
}

inline std::string FormatTable(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "# MACs of linear, attention and convolution products; norms and activations excluded\n";
  os << std::left << std::setw(10) << "sparsity" << std::setw(9) << "head" << std::right << std::setw(12)
     << "params(M)" << std::setw(11) << "GMACs" << std::setw(11) << "encoder" << std::setw(11) << "proj"
     << std::setw(11) << "select" << std::setw(11) << "head" << "\n";
  os << std::fixed;
  for (const auto& r : rows) {
    const Cost t = r.report.Total();
    os << std::left << std::setw(10) << (r.sparse ? "CE" : "-") << std::setw(9) << HeadKindName(r.head)
       << std::right << std::setprecision(3) << std::setw(12) << static_cast<double>(t.params) / 1e6
       << std::setprecision(4) << std::setw(11) << static_cast<double>(t.macs) / 1e9;
    for (const auto& st : r.report.stages) os << std::setw(11) << static_cast<double>(st.cost.macs) / 1e9;
    os << "\n";
  }
  return os.str();
}

// {"unit": "mac", "rows": [{"sparsity", "head", "params", "macs",
//   "stages": {name: {"params", "macs"}}}]}
inline nlohmann::json ToJson(const std::vector<ComparisonRow>& rows) {
  nlohmann::json out;
  out["unit"] = "mac";
  out["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["sparsity"] = r.sparse ? "CE" : "none";
    row["head"] = HeadKindName(r.head);
    row["params"] = r.report.Total().params;
    row["macs"] = r.report.Total().macs;
    for (const auto& st : r.report.stages) row["stages"][st.name] = {{"params", st.cost.params}, {"macs", st.cost.macs}};
    out["rows"].push_back(row);
  }
  return out;
}

}  // namespace detrack::flops

#endif  // DETRACK_FLOPS_HPP_
