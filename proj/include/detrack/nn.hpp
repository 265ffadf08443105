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

// Parameter ownership and the small layer building blocks shared by the
// encoder and the decoder head.

#ifndef DETRACK_NN_HPP_
#define DETRACK_NN_HPP_

#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrack/autodiff.hpp"

namespace detrack::nn {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// Owns parameters at stable addresses, in creation order.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter<T>& Create(const std::string& name, const std::string& group, Tensor<T> init,
                       bool decay = true) {
    if (Find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter<T>>(name, group, std::move(init), decay));
    return *params_.back();
  }

  Parameter<T>* Find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::vector<Parameter<T>*> All() const {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t ScalarCount() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void ZeroGrad() {
    for (auto& p : params_) p->ZeroGrad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <typename T>
Tensor<T> XavierUniform(int fan_in, int fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t({fan_in, fan_out});
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct LinearLayer {
  Parameter<T>* weight = nullptr;  // (in, out)
  Parameter<T>* bias = nullptr;    // (out), absent for bias-free layers

  static LinearLayer Create(ParameterStore<T>& store, const std::string& name,
                            const std::string& group, int in, int out, std::mt19937_64& rng,
                            double gain = 1.0, bool with_bias = true) {
    LinearLayer l;
    l.weight = &store.Create(name + ".weight", group, XavierUniform<T>(in, out, rng, gain));
    if (with_bias) l.bias = &store.Create(name + ".bias", group, Tensor<T>({out}), false);
    return l;
  }

  int in() const { return weight->value.shape[0]; }
  int out() const { return weight->value.shape[1]; }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    if (bias == nullptr) return ad::Matmul(x, tape.Param(*weight));
    return ad::Linear(x, tape.Param(*weight), tape.Param(*bias));
  }

  void SetZero() {
    std::fill(weight->value.data.begin(), weight->value.data.end(), T(0));
    if (bias != nullptr) std::fill(bias->value.data.begin(), bias->value.data.end(), T(0));
  }
};

template <typename T>
struct LayerNormLayer {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  static LayerNormLayer Create(ParameterStore<T>& store, const std::string& name,
                               const std::string& group, int dim) {
    LayerNormLayer l;
    l.gamma = &store.Create(name + ".gamma", group, Tensor<T>({dim}, T(1)), false);
    l.beta = &store.Create(name + ".beta", group, Tensor<T>({dim}), false);
    return l;
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return ad::LayerNorm(x, tape.Param(*gamma), tape.Param(*beta));
  }
};

enum class Activation { kRelu, kGelu };

template <typename T>
Var<T> Activate(const Var<T>& x, Activation a) {
  return a == Activation::kRelu ? ad::Relu(x) : ad::Gelu(x);
}

// Stack of linear layers with an activation between consecutive layers.
template <typename T>
struct Mlp {
  std::vector<LinearLayer<T>> layers;
  Activation activation = Activation::kRelu;

  static Mlp Create(ParameterStore<T>& store, const std::string& name, const std::string& group,
                    const std::vector<int>& dims, std::mt19937_64& rng,
                    Activation act = Activation::kRelu) {
    if (dims.size() < 2) throw std::invalid_argument("mlp needs at least input and output dims");
    Mlp m;
    m.activation = act;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      m.layers.push_back(LinearLayer<T>::Create(store, name + "." + std::to_string(i), group,
                                                dims[i], dims[i + 1], rng));
    }
    return m;
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size()) x = Activate(x, activation);
    }
    return x;
  }
};

}  // namespace detrack::nn

#endif  // DETRACK_NN_HPP_
