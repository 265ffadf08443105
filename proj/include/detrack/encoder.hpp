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

// Joint ViT encoder over template and search patches with candidate
// elimination of search tokens.

#ifndef DETRACK_ENCODER_HPP_
#define DETRACK_ENCODER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "detrack/attention.hpp"
#include "detrack/autodiff.hpp"
#include "detrack/geometry.hpp"
#include "detrack/nn.hpp"

namespace detrack::enc {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// Channel-major image with values roughly in [0, 1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // (channels, height, width)

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct ImagePair {
  Image z;  // template
  Image x;  // search
};

struct EncoderConfig {
  int dim = 64;
  int heads = 4;
  int layers = 2;
  int mlp_ratio = 4;
  int patch = 8;
  int channels = 3;
  int template_size = 32;
  int search_size = 64;
  std::vector<int> ce_layers = {1};  // 0-based layer indices
  double keep_ratio = 0.5;

  GridSpec TemplateGrid() const { return {template_size / patch, template_size / patch, patch}; }
  GridSpec SearchGrid() const { return {search_size / patch, search_size / patch, patch}; }
  int TemplateTokens() const { return TemplateGrid().Count(); }
  int SearchTokens() const { return SearchGrid().Count(); }
  bool EliminatesAt(int layer) const {
    return keep_ratio < 1.0 && std::find(ce_layers.begin(), ce_layers.end(), layer) != ce_layers.end();
  }

  void Validate() const {
    if (dim < 1 || heads < 1 || dim % heads != 0) {
      throw ConfigError("encoder dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (layers < 1 || mlp_ratio < 1 || channels < 1) throw ConfigError("encoder sizes must be positive");
    if (patch < 1 || template_size < patch || search_size < patch || template_size % patch != 0 ||
        search_size % patch != 0) {
      throw ConfigError("image sides (" + std::to_string(template_size) + ", " +
                        std::to_string(search_size) + ") must be positive multiples of patch size " +
                        std::to_string(patch));
    }
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
      throw ConfigError("keep ratio must lie in (0, 1], got " + std::to_string(keep_ratio));
    }
    for (int l : ce_layers) {
      if (l < 0 || l >= layers) {
        throw ConfigError("elimination layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(layers) + ")");
      }
    }
  }
};

// Token sequence [template ; kept search]. `search_cells[i]` is the grid cell
// of the i-th kept search token; cells stay in increasing order.
template <typename T>
struct TokenSet {
  Var<T> features;
  int n_template = 0;
  GridSpec grid;
  std::vector<int> search_cells;

  int n_kept() const { return static_cast<int>(search_cells.size()); }
  int n_search() const { return grid.Count(); }

  std::vector<std::uint8_t> KeptMask() const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n_search()), 0);
    for (int c : search_cells) m[static_cast<std::size_t>(c)] = 1;
    return m;
  }

  std::vector<Point2> KeptCenters() const {
    const auto all = TokenCenters(grid);
    std::vector<Point2> out;
    out.reserve(search_cells.size());
    for (int c : search_cells) out.push_back(all[static_cast<std::size_t>(c)]);
    return out;
  }

  Var<T> SearchFeatures() const {
    return ad::SliceRows(features, n_template, n_template + n_kept());
  }
};

// Rows of 2-D sine/cosine features for grid cells: the first half of the
// channels encode x, the second half y.
template <typename T>
Tensor<T> SinCosGrid(const GridSpec& g, int dim, double temperature = 10000.0) {
  if (dim % 4 != 0) throw ConfigError("positional dim must be a multiple of 4");
  const int nf = dim / 4;
  const auto centers = TokenCenters(g);
  Tensor<T> out({g.Count(), dim});
  for (int i = 0; i < g.Count(); ++i) {
    const double coords[2] = {centers[static_cast<std::size_t>(i)].x,
                              centers[static_cast<std::size_t>(i)].y};
    for (int a = 0; a < 2; ++a) {
      for (int f = 0; f < nf; ++f) {
        const double arg = coords[a] * 2.0 * std::numbers::pi /
                           std::pow(temperature, static_cast<double>(f) / nf);
        out.at(i, a * 2 * nf + f) = static_cast<T>(std::sin(arg));
        out.at(i, a * 2 * nf + nf + f) = static_cast<T>(std::cos(arg));
      }
    }
  }
  return out;
}

template <typename T>
struct EncoderLayer {
  nn::LayerNormLayer<T> ln1, ln2;
  attn::MhsaWeights<T> attn;
  nn::Mlp<T> mlp;
};

template <typename T>
struct EncoderWeights {
  EncoderConfig cfg;
  nn::LinearLayer<T> patch_embed;
  ad::Parameter<T>* pos_template = nullptr;
  ad::Parameter<T>* pos_search = nullptr;
  std::vector<EncoderLayer<T>> layers;
  nn::LayerNormLayer<T> final_norm;

  static EncoderWeights Create(nn::ParameterStore<T>& store, const EncoderConfig& cfg,
                               std::mt19937_64& rng, const std::string& group = "encoder") {
    cfg.Validate();
    EncoderWeights w;
    w.cfg = cfg;
    const int d = cfg.dim;
    w.patch_embed = nn::LinearLayer<T>::Create(store, "encoder.patch_embed", group,
                                               cfg.channels * cfg.patch * cfg.patch, d, rng);
    w.pos_template = &store.Create("encoder.pos_template", group,
                                   SinCosGrid<T>(cfg.TemplateGrid(), d), false);
    w.pos_search = &store.Create("encoder.pos_search", group, SinCosGrid<T>(cfg.SearchGrid(), d), false);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l);
      EncoderLayer<T> layer;
      layer.ln1 = nn::LayerNormLayer<T>::Create(store, p + ".ln1", group, d);
      layer.attn = attn::MhsaWeights<T>::Create(store, p + ".attn", group, d, cfg.heads, rng);
      layer.ln2 = nn::LayerNormLayer<T>::Create(store, p + ".ln2", group, d);
      layer.mlp = nn::Mlp<T>::Create(store, p + ".mlp", group, {d, cfg.mlp_ratio * d, d}, rng,
                                     nn::Activation::kGelu);
      w.layers.push_back(std::move(layer));
    }
    w.final_norm = nn::LayerNormLayer<T>::Create(store, "encoder.norm", group, d);
    return w;
  }
};

// Non-overlapping p x p patches, one row per patch in row-major patch order;
// each row is channel-major, then patch row, then patch column.
template <typename T>
Tensor<T> Patchify(const Image& img, int patch) {
  if (patch < 1 || img.height % patch != 0 || img.width % patch != 0) {
    throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  const int gh = img.height / patch, gw = img.width / patch;
  const int len = img.channels * patch * patch;
  Tensor<T> out({gh * gw, len});
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      T* row = &out.data[static_cast<std::size_t>(r * gw + c) * len];
      for (int ch = 0; ch < img.channels; ++ch)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            *row++ = static_cast<T>(img.at(ch, r * patch + y, c * patch + x));
    }
  }
  return out;
}

// Linear patch embedding plus positional embeddings, concatenated as
// [template ; search] with every search token kept.
template <typename T>
TokenSet<T> PatchifyAndEmbed(Tape<T>& tape, const ImagePair& pair, const EncoderWeights<T>& w) {
  const auto& cfg = w.cfg;
  auto check = [&](const Image& img, int side, const char* what) {
    if (img.channels != cfg.channels || img.height != side || img.width != side) {
      throw ConfigError(std::string(what) + " image is " + std::to_string(img.channels) + "x" +
                        std::to_string(img.height) + "x" + std::to_string(img.width) +
                        ", expected " + std::to_string(cfg.channels) + "x" + std::to_string(side) +
                        "x" + std::to_string(side));
    }
  };
  check(pair.z, cfg.template_size, "template");
  check(pair.x, cfg.search_size, "search");
  const Var<T> hz = ad::Add(w.patch_embed(tape, tape.Constant(Patchify<T>(pair.z, cfg.patch))),
                            tape.Param(*w.pos_template));
  const Var<T> hx = ad::Add(w.patch_embed(tape, tape.Constant(Patchify<T>(pair.x, cfg.patch))),
                            tape.Param(*w.pos_search));
  TokenSet<T> out;
  out.features = ad::ConcatRows<T>({hz, hx});
  out.n_template = hz.rows();
  out.grid = cfg.SearchGrid();
  out.search_cells.resize(static_cast<std::size_t>(hx.rows()));
  std::iota(out.search_cells.begin(), out.search_cells.end(), 0);
  return out;
}

// Per-search-token score: attention received from the template tokens,
// averaged over template queries and heads. `probs` is head-major
// (heads, N, N) over the current sequence.
inline std::vector<double> CandidateScores(const std::vector<double>& probs, int heads, int n,
                                           int n_template) {
  if (probs.size() != static_cast<std::size_t>(heads) * n * n) {
    throw ad::ShapeError("candidate scores: attention has " + std::to_string(probs.size()) +
                         " entries, expected " + std::to_string(heads) + "x" + std::to_string(n) +
                         "x" + std::to_string(n));
  }
  const int ns = n - n_template;
  std::vector<double> s(static_cast<std::size_t>(ns), 0.0);
  if (n_template == 0) return s;
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n_template; ++i) {
      const double* row = &probs[(static_cast<std::size_t>(h) * n + i) * n + n_template];
      for (int j = 0; j < ns; ++j) s[static_cast<std::size_t>(j)] += row[j];
    }
  const double norm = 1.0 / (static_cast<double>(heads) * n_template);
  for (double& v : s) v *= norm;
  return s;
}

inline int KeepCount(int n, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw ConfigError("keep ratio must lie in (0, 1], got " + std::to_string(keep_ratio));
  }
  // Guard against 0.5 * 64 evaluating to 32.000000000000004.
  return std::clamp(static_cast<int>(std::ceil(keep_ratio * n - 1e-9)), n > 0 ? 1 : 0, n);
}

// Positions (into `scores`) of the top ceil(rho * n) scores, ties broken by
// lower position, returned in increasing position order.
inline std::vector<int> SelectCandidates(const std::vector<double>& scores, double keep_ratio) {
  const int n = static_cast<int>(scores.size());
  const int keep = KeepCount(n, keep_ratio);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  return order;
}

// Removes the low-scoring search tokens from the sequence. `probs` is the
// current layer's head-major attention over `tokens`.
template <typename T>
TokenSet<T> CandidateEliminate(const TokenSet<T>& tokens, const std::vector<T>& probs, int heads,
                               double keep_ratio) {
  const int n = tokens.features.rows();
  const std::vector<double> p(probs.begin(), probs.end());
  const auto keep = SelectCandidates(CandidateScores(p, heads, n, tokens.n_template), keep_ratio);
  std::vector<int> rows(static_cast<std::size_t>(tokens.n_template));
  std::iota(rows.begin(), rows.end(), 0);
  TokenSet<T> out;
  out.n_template = tokens.n_template;
  out.grid = tokens.grid;
  for (int k : keep) {
    rows.push_back(tokens.n_template + k);
    out.search_cells.push_back(tokens.search_cells[static_cast<std::size_t>(k)]);
  }
  out.features = ad::GatherRows(tokens.features, rows);
  return out;
}

// Pre-norm transformer layers. Elimination happens after the attention
// residual of a listed layer, so its MLP already runs on the kept tokens.
template <typename T>
TokenSet<T> Encode(Tape<T>& tape, TokenSet<T> tokens, const EncoderWeights<T>& w) {
  const auto& cfg = w.cfg;
  for (int l = 0; l < static_cast<int>(w.layers.size()); ++l) {
    const auto& layer = w.layers[static_cast<std::size_t>(l)];
    const bool eliminate = cfg.EliminatesAt(l);
    std::vector<T> probs;
    const Var<T> h = layer.ln1(tape, tokens.features);
    tokens.features = ad::Add(tokens.features,
                              attn::Mhsa<T>(tape, h, h, h, layer.attn, nullptr, eliminate ? &probs : nullptr));
    if (eliminate) tokens = CandidateEliminate(tokens, probs, layer.attn.n_heads, cfg.keep_ratio);
    tokens.features = ad::Add(tokens.features, layer.mlp(tape, layer.ln2(tape, tokens.features)));
  }
  tokens.features = w.final_norm(tape, tokens.features);
  return tokens;
}

}  // namespace detrack::enc

#endif  // DETRACK_ENCODER_HPP_
