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

// The tracker: encoder, decoder head and the optional denoising label
// embedding, sharing one parameter store. Checkpoints are binary:
//
//   "DTRKCKPT" | u32 version | u64 step | u32 len, config text |
//   u32 count | count x (u32 len, name | u32 rank | rank x i32 dims | f64 data)
//
// in host byte order (little endian on every supported platform).

#ifndef DETRACK_MODEL_HPP_
#define DETRACK_MODEL_HPP_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrack/autodiff.hpp"
#include "detrack/config.hpp"
#include "detrack/encoder.hpp"
#include "detrack/head.hpp"
#include "detrack/nn.hpp"
#include "detrack/training.hpp"

namespace detrack {

template <typename T>
struct Model {
  config::ModelConfig cfg;
  nn::ParameterStore<T> store;
  enc::EncoderWeights<T> encoder;
  head::HeadWeights<T> head;
  ad::Parameter<T>* label_embedding = nullptr;  // (2, dec_dim), embedding denoising only

  static Model Create(const config::ModelConfig& cfg, std::uint64_t seed, bool with_label_embedding = false) {
    cfg.Validate();
    Model m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    m.encoder = enc::EncoderWeights<T>::Create(m.store, cfg.encoder, rng);
    m.head = head::HeadWeights<T>::Create(m.store, cfg.Head(), rng);
    if (with_label_embedding) {
      std::normal_distribution<double> g(0.0, 1.0);
      ad::Tensor<T> e({2, cfg.head.dim});
      for (auto& v : e.data) v = static_cast<T>(g(rng));
      m.label_embedding = &m.store.Create("head.dn_label_embedding", "decoder", std::move(e), false);
    }
    return m;
  }

  enc::TokenSet<T> Encode(ad::Tape<T>& tape, const enc::ImagePair& pair) const {
    return enc::Encode(tape, enc::PatchifyAndEmbed(tape, pair, encoder), encoder);
  }
};

struct TrackBox {
  BBox box;
  double score = 0;
};

// Final-layer matching predictions of a forward pass with `layers` decoder
// layers, in query order.
template <typename T>
std::vector<TrackBox> Predict(const Model<T>& m, const enc::ImagePair& pair, int layers) {
  ad::Tape<T> tape;
  const auto tokens = m.Encode(tape, pair);
  const auto out = head::Forward(tape, tokens, m.head, layers);
  const auto boxes = head::ToBoxes(out.Final().boxes);
  std::vector<TrackBox> r(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    r[i] = {boxes[i], static_cast<double>(out.Final().scores.value()[i])};
  }
  return r;
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'T', 'R', 'K', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_text;
  struct Array {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
  };
  std::vector<Array> arrays;
};

namespace internal {

template <typename V>
void Put(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

inline void PutString(std::string& out, const std::string& s) {
  Put(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  template <typename V>
  V Get() {
    Need(sizeof(V));
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string GetString() {
    const auto n = Get<std::uint32_t>();
    Need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void Need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace internal

inline std::string Serialize(const Checkpoint& c) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  internal::Put(out, kCheckpointVersion);
  internal::Put(out, c.step);
  internal::PutString(out, c.config_text);
  internal::Put(out, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    internal::PutString(out, a.name);
    internal::Put(out, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) internal::Put(out, static_cast<std::int32_t>(d));
    for (double v : a.data) internal::Put(out, v);
  }
  return out;
}

inline Checkpoint Deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const std::string rest = bytes.substr(sizeof(kCheckpointMagic));
  internal::Reader in(rest);
  const auto version = in.Get<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.step = in.Get<std::uint64_t>();
  c.config_text = in.GetString();
  const auto n = in.Get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    Checkpoint::Array a;
    a.name = in.GetString();
    const auto rank = in.Get<std::uint32_t>();
    std::size_t size = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const int d = in.Get<std::int32_t>();
      if (d < 0) throw CheckpointError("negative dimension in " + a.name);
      a.shape.push_back(d);
      size *= static_cast<std::size_t>(d);
    }
    a.data.resize(size);
    for (auto& v : a.data) v = in.Get<double>();
    c.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

template <typename T>
Checkpoint MakeCheckpoint(const Model<T>& m, const std::string& config_text, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  c.config_text = config_text;
  for (const auto* p : m.store.All()) {
    c.arrays.push_back({p->name, p->value.shape,
                        std::vector<double>(p->value.data.begin(), p->value.data.end())});
  }
  return c;
}

// Copies checkpoint arrays into a model built from the same configuration.
template <typename T>
void Restore(Model<T>& m, const Checkpoint& c) {
  const auto params = m.store.All();
  if (params.size() != c.arrays.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(c.arrays.size()) + " arrays, model has " +
                          std::to_string(params.size()));
  }
  for (const auto& a : c.arrays) {
    auto* p = m.store.Find(a.name);
    if (p == nullptr) throw CheckpointError("model has no parameter " + a.name);
    if (p->value.shape != a.shape) throw CheckpointError("shape mismatch for " + a.name);
    for (std::size_t i = 0; i < a.data.size(); ++i) p->value.data[i] = static_cast<T>(a.data[i]);
  }
}

inline void WriteFile(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path);
}

inline std::string ReadFile(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Rebuilds the model described by a checkpoint's configuration.
template <typename T>
Model<T> LoadModel(const Checkpoint& c) {
  const auto cfg = config::FromText(c.config_text);
  bool embedding = false;
  for (const auto& a : c.arrays) embedding = embedding || a.name == "head.dn_label_embedding";
  Model<T> m = Model<T>::Create(cfg.model, cfg.seed, embedding);
  Restore(m, c);
  return m;
}

}  // namespace detrack

#endif  // DETRACK_MODEL_HPP_
