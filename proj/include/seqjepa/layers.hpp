// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks shared by the model and the evaluation heads.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "seqjepa/autodiff.hpp"

namespace seqjepa {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParameter {
  std::string name;
  ad::Var<T> var;
  bool decay = true;  // weight decay applies
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
ad::Matrix<T> fan_in_uniform(ad::Index rows, ad::Index cols, ad::Index fan_in, Rng& rng);

/// y = x W (+ b). W is in x out.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ad::Index in, ad::Index out, bool bias, Rng& rng);

  ad::Var<T> forward(const ad::Var<T>& x) const { return ad::affine(x, weight_, bias_); }

  ad::Index in_features() const { return weight_.rows(); }
  ad::Index out_features() const { return weight_.cols(); }
  bool has_bias() const { return bias_.defined(); }

  ad::Var<T>& weight() { return weight_; }
  ad::Var<T>& bias() { return bias_; }
  const ad::Var<T>& weight() const { return weight_; }
  const ad::Var<T>& bias() const { return bias_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const;

 private:
  ad::Var<T> weight_;
  ad::Var<T> bias_;
};

/// Learned gain and shift for row-wise layer normalization.
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(ad::Index width);

  ad::Var<T> forward(const ad::Var<T>& x) const { return ad::layer_norm(x, gain_, shift_); }
  void collect(const std::string& prefix, ParameterList<T>& out) const;

 private:
  ad::Var<T> gain_;
  ad::Var<T> shift_;
};

/// Two-layer perceptron with a rectifier between the layers.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng);

  ad::Var<T> forward(const ad::Var<T>& x) const { return output_.forward(ad::relu(hidden_.forward(x))); }
  void collect(const std::string& prefix, ParameterList<T>& out) const;

  Linear<T>& hidden() { return hidden_; }
  Linear<T>& output() { return output_; }

 private:
  Linear<T> hidden_;
  Linear<T> output_;
};

/// Post-normalization transformer encoder layer: x = LN(x + MHA(x)),
/// x = LN(x + FFN(x)), feed-forward width 4x token width.
template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ad::Index width, ad::Index heads, Rng& rng);

  /// `x` holds `batch` sequences of `seq` tokens, sequence-major.
  ad::Var<T> forward(const ad::Var<T>& x, ad::Index batch, ad::Index seq) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

 private:
  ad::Index heads_ = 1;
  Linear<T> qkv_;
  Linear<T> proj_;
  LayerNorm<T> norm1_;
  Linear<T> ff1_;
  Linear<T> ff2_;
  LayerNorm<T> norm2_;
};

/// Copies values between two parameter lists of identical layout.
template <typename T>
void copy_parameter_values(const ParameterList<T>& from, const ParameterList<T>& to);

template <typename T>
void zero_grads(const ParameterList<T>& params) {
  for (const auto& p : params) {
    auto v = p.var;
    v.zero_grad();
  }
}

}  // namespace seqjepa
