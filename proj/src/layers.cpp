// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/layers.hpp"

#include <cmath>

namespace seqjepa {

template <typename T>
ad::Matrix<T> fan_in_uniform(ad::Index rows, ad::Index cols, ad::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Matrix<T> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
Linear<T>::Linear(ad::Index in, ad::Index out, bool bias, Rng& rng)
    : weight_(ad::Var<T>::parameter(fan_in_uniform<T>(in, out, in, rng))) {
  if (bias) bias_ = ad::Var<T>::parameter(ad::Matrix<T>::Zero(1, out));
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".weight", weight_, true});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_, false});
}

template <typename T>
LayerNorm<T>::LayerNorm(ad::Index width)
    : gain_(ad::Var<T>::parameter(ad::Matrix<T>::Ones(1, width))),
      shift_(ad::Var<T>::parameter(ad::Matrix<T>::Zero(1, width))) {}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".gain", gain_, false});
  out.push_back({prefix + ".shift", shift_, false});
}

template <typename T>
Mlp<T>::Mlp(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng)
    : hidden_(in, hidden, true, rng), output_(hidden, out, true, rng) {}

template <typename T>
void Mlp<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  hidden_.collect(prefix + ".hidden", out);
  output_.collect(prefix + ".output", out);
}

template <typename T>
TransformerLayer<T>::TransformerLayer(ad::Index width, ad::Index heads, Rng& rng)
    : heads_(heads),
      qkv_(width, 3 * width, true, rng),
      proj_(width, width, true, rng),
      norm1_(width),
      ff1_(width, 4 * width, true, rng),
      ff2_(4 * width, width, true, rng),
      norm2_(width) {}

template <typename T>
ad::Var<T> TransformerLayer<T>::forward(const ad::Var<T>& x, ad::Index batch, ad::Index seq) const {
  auto attended = proj_.forward(ad::self_attention(qkv_.forward(x), batch, seq, heads_));
  auto h = norm1_.forward(ad::add(x, attended));
  auto ff = ff2_.forward(ad::relu(ff1_.forward(h)));
  return norm2_.forward(ad::add(h, ff));
}

template <typename T>
void TransformerLayer<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  qkv_.collect(prefix + ".attn.qkv", out);
  proj_.collect(prefix + ".attn.proj", out);
  norm1_.collect(prefix + ".norm1", out);
  ff1_.collect(prefix + ".ff1", out);
  ff2_.collect(prefix + ".ff2", out);
  norm2_.collect(prefix + ".norm2", out);
}

template <typename T>
void copy_parameter_values(const ParameterList<T>& from, const ParameterList<T>& to) {
  if (from.size() != to.size()) throw ShapeError("parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    const auto& src = from[i].var.value();
    auto dst = to[i].var;
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
      throw ShapeError("parameter shape mismatch for " + to[i].name);
    }
    dst.mutable_value() = src;
  }
}

#define SEQJEPA_INSTANTIATE(T)                                                                  \
  template ad::Matrix<T> fan_in_uniform<T>(ad::Index, ad::Index, ad::Index, Rng&);              \
  template class Linear<T>;                                                                     \
  template class LayerNorm<T>;                                                                  \
  template class Mlp<T>;                                                                        \
  template class TransformerLayer<T>;                                                           \
  template void copy_parameter_values<T>(const ParameterList<T>&, const ParameterList<T>&);

SEQJEPA_INSTANTIATE(float)
SEQJEPA_INSTANTIATE(double)

#undef SEQJEPA_INSTANTIATE

}  // namespace seqjepa
