// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-free reverse-mode automatic differentiation over dense
// row-major matrices. Every value is a 2-D matrix; operations are coarse
// (GEMM, convolution, attention, layer norm) so node bookkeeping stays
// negligible next to the arithmetic.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seqjepa/errors.hpp"

namespace seqjepa::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Matrix<T>& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix<T>::Zero(value.rows(), value.cols());
    }
    return grad;
  }
};

/// Handle to a node in the computation graph. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Matrix<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Matrix<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Accumulated gradient; zeros when nothing has been accumulated.
  Matrix<T> grad() const {
    if (node_->grad.size() == 0) return Matrix<T>::Zero(rows(), cols());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  T scalar() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("scalar() on non 1x1 value");
    return node_->value(0, 0);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_result(Matrix<T> value, std::vector<Var<T>> const& inputs,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (const auto& in : inputs) n->inputs.push_back(in.shared());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

inline void check(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

/// Runs reverse accumulation from a 1x1 value. Gradients accumulate into
/// every reachable node that requires them.
template <typename T>
void backward(const Var<T>& root) {
  detail::check(root.rows() == 1 && root.cols() == 1, "backward: root must be 1x1");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()(0, 0) += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->grad_buffer().noalias() += self.grad * b.value().transpose();
    if (b.requires_grad()) b.node()->grad_buffer().noalias() += a.value().transpose() * self.grad;
  });
}

/// x * weight + bias, bias broadcast over rows. `bias` may be undefined.
template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::check(x.cols() == weight.rows(), "affine: input width does not match weight rows");
  Matrix<T> out;
  out.noalias() = x.value() * weight.value();
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) {
    detail::check(bias.rows() == 1 && bias.cols() == weight.cols(), "affine: bad bias shape");
    out.rowwise() += bias.value().row(0);
    inputs.push_back(bias);
  }
  return detail::make_result<T>(std::move(out), inputs, [x, weight, bias](Node<T>& self) {
    if (x.requires_grad()) x.node()->grad_buffer().noalias() += self.grad * weight.value().transpose();
    if (weight.requires_grad()) weight.node()->grad_buffer().noalias() += x.value().transpose() * self.grad;
    if (bias.defined() && bias.requires_grad()) bias.node()->grad_buffer() += self.grad.colwise().sum();
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return detail::make_result<T>(a.value() + b.value(), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad;
    if (b.requires_grad()) b.node()->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return detail::make_result<T>(a.value() - b.value(), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad;
    if (b.requires_grad()) b.node()->grad_buffer() -= self.grad;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  return detail::make_result<T>(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad.cwiseProduct(b.value());
    if (b.requires_grad()) b.node()->grad_buffer() += self.grad.cwiseProduct(a.value());
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::make_result<T>(a.value() * s, {a}, [a, s](Node<T>& self) {
    a.node()->grad_buffer() += self.grad * s;
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.node()->grad_buffer();
    const auto& v = a.value();
    for (Index i = 0; i < v.size(); ++i) {
      if (v.data()[i] > T(0)) g.data()[i] += self.grad.data()[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    a.node()->grad_buffer().array() += self.grad(0, 0);
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_result<T>(std::move(out), parts, [parts](Node<T>& self) {
    Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->grad_buffer() += self.grad.middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  detail::check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Matrix<T> out = a.value().middleCols(start, count);
  return detail::make_result<T>(std::move(out), {a}, [a, start, count](Node<T>& self) {
    a.node()->grad_buffer().middleCols(start, count) += self.grad;
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<Index> rows) {
  Matrix<T> out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::check(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return detail::make_result<T>(std::move(out), {a}, [a, rows = std::move(rows)](Node<T>& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += self.grad.row(static_cast<Index>(i));
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention

/// Row-wise layer normalization with learned gain and shift (both 1 x cols).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5)) {
  const Index n = x.rows();
  const Index d = x.cols();
  detail::check(gain.rows() == 1 && gain.cols() == d && shift.rows() == 1 && shift.cols() == d,
                "layer_norm: parameter width mismatch");
  Matrix<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const T mu = x.value().row(r).mean();
    const T var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix<T> out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  return detail::make_result<T>(
      std::move(out), {x, gain, shift},
      [x, gain, shift, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const Index n = xhat.rows();
        const Index d = xhat.cols();
        if (gain.requires_grad()) {
          gain.node()->grad_buffer().row(0) += (self.grad.array() * xhat.array()).colwise().sum().matrix();
        }
        if (shift.requires_grad()) shift.node()->grad_buffer().row(0) += self.grad.colwise().sum();
        if (x.requires_grad()) {
          auto& gx = x.node()->grad_buffer();
          Eigen::Array<T, 1, Eigen::Dynamic> dxhat(d);
          for (Index r = 0; r < n; ++r) {
            dxhat = self.grad.row(r).array() * gain.value().row(0).array();
            const T m1 = dxhat.mean();
            const T m2 = (dxhat * xhat.row(r).array()).mean();
            gx.row(r).array() += inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
          }
        }
      });
}

/// x * scale + shift with 1 x cols `scale` and `shift` broadcast over rows.
template <typename T>
Var<T> column_affine(const Var<T>& x, const Var<T>& scale, const Var<T>& shift) {
  detail::check(scale.rows() == 1 && scale.cols() == x.cols() && shift.rows() == 1 && shift.cols() == x.cols(),
                "column_affine: parameter width mismatch");
  Matrix<T> out = x.value();
  out.array().rowwise() *= scale.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  return detail::make_result<T>(std::move(out), {x, scale, shift}, [x, scale, shift](Node<T>& self) {
    if (x.requires_grad()) {
      x.node()->grad_buffer().array() += self.grad.array().rowwise() * scale.value().row(0).array();
    }
    if (scale.requires_grad()) {
      scale.node()->grad_buffer().row(0) += (self.grad.array() * x.value().array()).colwise().sum().matrix();
    }
    if (shift.requires_grad()) shift.node()->grad_buffer().row(0) += self.grad.colwise().sum();
  });
}

/// Subtracts the column means over the batch (rows); the means are written
/// to `mean_out` when given.
template <typename T>
Var<T> center_columns(const Var<T>& x, Matrix<T>* mean_out = nullptr) {
  detail::check(x.rows() > 0, "center_columns: empty batch");
  const Matrix<T> mu = x.value().colwise().mean();
  if (mean_out) *mean_out = mu;
  Matrix<T> out = x.value().rowwise() - mu.row(0);
  return detail::make_result<T>(std::move(out), {x}, [x](Node<T>& self) {
    if (x.requires_grad()) x.node()->grad_buffer() += self.grad.rowwise() - self.grad.colwise().mean();
  });
}

/// Column-wise normalization over the batch (rows) with learned gain and
/// shift. Biased batch variance, as in training-mode batch norm. The batch
/// mean and variance are written to `mean_out` / `var_out` when given.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5),
                  Matrix<T>* mean_out = nullptr, Matrix<T>* var_out = nullptr) {
  const Index n = x.rows();
  const Index d = x.cols();
  detail::check(n > 0, "batch_norm: empty batch");
  detail::check(gain.rows() == 1 && gain.cols() == d && shift.rows() == 1 && shift.cols() == d,
                "batch_norm: parameter width mismatch");
  const Eigen::Array<T, 1, Eigen::Dynamic> mu = x.value().colwise().mean().array();
  const Eigen::Array<T, 1, Eigen::Dynamic> var =
      (x.value().array().rowwise() - mu).square().colwise().mean();
  const Eigen::Array<T, 1, Eigen::Dynamic> inv_std = (var + eps).rsqrt();
  if (mean_out) *mean_out = mu.matrix();
  if (var_out) *var_out = var.matrix();
  Matrix<T> xhat = ((x.value().array().rowwise() - mu).rowwise() * inv_std).matrix();
  Matrix<T> out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  return detail::make_result<T>(
      std::move(out), {x, gain, shift},
      [x, gain, shift, xhat = std::move(xhat), inv_std](Node<T>& self) {
        if (gain.requires_grad()) {
          gain.node()->grad_buffer().row(0) += (self.grad.array() * xhat.array()).colwise().sum().matrix();
        }
        if (shift.requires_grad()) shift.node()->grad_buffer().row(0) += self.grad.colwise().sum();
        if (x.requires_grad()) {
          const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic> dxhat =
              self.grad.array().rowwise() * gain.value().row(0).array();
          const Eigen::Array<T, 1, Eigen::Dynamic> m1 = dxhat.colwise().mean();
          const Eigen::Array<T, 1, Eigen::Dynamic> m2 = (dxhat * xhat.array()).colwise().mean();
          x.node()->grad_buffer().array() +=
              ((dxhat.rowwise() - m1) - xhat.array().rowwise() * m2).rowwise() * inv_std;
        }
      });
}

/// Multi-head scaled dot-product self-attention over `batch` independent
/// sequences of `seq` tokens. `qkv` is (batch*seq) x (3*width), laid out as
/// [queries | keys | values]; output is (batch*seq) x width.
template <typename T>
Var<T> self_attention(const Var<T>& qkv, Index batch, Index seq, Index heads) {
  detail::check(qkv.rows() == batch * seq, "self_attention: rows != batch*seq");
  detail::check(qkv.cols() % 3 == 0, "self_attention: qkv width not divisible by 3");
  const Index width = qkv.cols() / 3;
  detail::check(heads > 0 && width % heads == 0, "self_attention: width not divisible by heads");
  const Index dh = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> out(batch * seq, width);
  // Attention weights per (batch, head), stacked: (batch*heads*seq) x seq.
  Matrix<T> probs(batch * heads * seq, seq);
  const auto& v = qkv.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto q = v.block(b * seq, h * dh, seq, dh);
      auto k = v.block(b * seq, width + h * dh, seq, dh);
      auto val = v.block(b * seq, 2 * width + h * dh, seq, dh);
      auto p = probs.block((b * heads + h) * seq, 0, seq, seq);
      p.noalias() = (q * k.transpose()) * inv_sqrt;
      for (Index r = 0; r < seq; ++r) {
        const T mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      out.block(b * seq, h * dh, seq, dh).noalias() = p * val;
    }
  }
  return detail::make_result<T>(
      std::move(out), {qkv},
      [qkv, batch, seq, heads, width, dh, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
        auto& g = qkv.node()->grad_buffer();
        const auto& v = qkv.value();
        Matrix<T> dp(seq, seq);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            auto q = v.block(b * seq, h * dh, seq, dh);
            auto k = v.block(b * seq, width + h * dh, seq, dh);
            auto val = v.block(b * seq, 2 * width + h * dh, seq, dh);
            auto p = probs.block((b * heads + h) * seq, 0, seq, seq);
            auto dout = self.grad.block(b * seq, h * dh, seq, dh);
            g.block(b * seq, 2 * width + h * dh, seq, dh).noalias() += p.transpose() * dout;
            dp.noalias() = dout * val.transpose();
            for (Index r = 0; r < seq; ++r) {
              const T dot = p.row(r).dot(dp.row(r));
              dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
            }
            g.block(b * seq, h * dh, seq, dh).noalias() += (dp * k) * inv_sqrt;
            g.block(b * seq, width + h * dh, seq, dh).noalias() += (dp.transpose() * q) * inv_sqrt;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution over images stored one per row, channel-major (C, H, W).

struct ConvGeometry {
  Index in_channels = 0;
  Index in_height = 0;
  Index in_width = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 0;

  Index out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
  Index patch_size() const { return in_channels * kernel * kernel; }
};

namespace detail {

template <typename T>
void im2col(const Matrix<T>& x, const ConvGeometry& g, Matrix<T>& cols) {
  const Index batch = x.rows();
  const Index oh = g.out_height();
  const Index ow = g.out_width();
  const Index pixels = oh * ow;
  cols.setZero(g.patch_size(), batch * pixels);
  for (Index b = 0; b < batch; ++b) {
    const T* img = x.data() + b * x.cols();
    for (Index c = 0; c < g.in_channels; ++c) {
      for (Index ky = 0; ky < g.kernel; ++ky) {
        for (Index kx = 0; kx < g.kernel; ++kx) {
          T* dst = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * cols.cols() + b * pixels;
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * g.stride - g.padding + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            const T* src = img + (c * g.in_height + iy) * g.in_width;
            for (Index ox = 0; ox < ow; ++ox) {
              const Index ix = ox * g.stride - g.padding + kx;
              if (ix >= 0 && ix < g.in_width) dst[oy * ow + ox] = src[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Matrix<T>& cols, const ConvGeometry& g, Matrix<T>& dx) {
  const Index batch = dx.rows();
  const Index oh = g.out_height();
  const Index ow = g.out_width();
  const Index pixels = oh * ow;
  for (Index b = 0; b < batch; ++b) {
    T* img = dx.data() + b * dx.cols();
    for (Index c = 0; c < g.in_channels; ++c) {
      for (Index ky = 0; ky < g.kernel; ++ky) {
        for (Index kx = 0; kx < g.kernel; ++kx) {
          const T* src = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * cols.cols() + b * pixels;
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * g.stride - g.padding + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            T* dst = img + (c * g.in_height + iy) * g.in_width;
            for (Index ox = 0; ox < ow; ++ox) {
              const Index ix = ox * g.stride - g.padding + kx;
              if (ix >= 0 && ix < g.in_width) dst[ix] += src[oy * ow + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution. `weight` is out_channels x (in_channels*k*k), `bias`
/// is 1 x out_channels (may be undefined).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom) {
  detail::check(x.cols() == geom.in_channels * geom.in_height * geom.in_width,
                "conv2d: input width does not match geometry");
  detail::check(weight.rows() == geom.out_channels && weight.cols() == geom.patch_size(),
                "conv2d: weight shape does not match geometry");
  const Index batch = x.rows();
  const Index pixels = geom.out_height() * geom.out_width();
  Matrix<T> cols;
  detail::im2col(x.value(), geom, cols);
  Matrix<T> prod;
  prod.noalias() = weight.value() * cols;  // out_c x (batch*pixels)
  Matrix<T> out(batch, geom.out_channels * pixels);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < geom.out_channels; ++c) {
      auto dst = out.row(b).segment(c * pixels, pixels);
      dst = prod.row(c).segment(b * pixels, pixels);
      if (bias.defined()) dst.array() += bias.value()(0, c);
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      std::move(out), inputs, [x, weight, bias, geom, cols = std::move(cols)](Node<T>& self) {
        const Index batch = x.rows();
        const Index pixels = geom.out_height() * geom.out_width();
        Matrix<T> gmat(geom.out_channels, batch * pixels);
        for (Index b = 0; b < batch; ++b) {
          for (Index c = 0; c < geom.out_channels; ++c) {
            gmat.row(c).segment(b * pixels, pixels) = self.grad.row(b).segment(c * pixels, pixels);
          }
        }
        if (weight.requires_grad()) weight.node()->grad_buffer().noalias() += gmat * cols.transpose();
        if (bias.defined() && bias.requires_grad()) {
          bias.node()->grad_buffer().row(0) += gmat.rowwise().sum().transpose();
        }
        if (x.requires_grad()) {
          Matrix<T> dcols;
          dcols.noalias() = weight.value().transpose() * gmat;
          detail::col2im_add(dcols, geom, x.node()->grad_buffer());
        }
      });
}

/// Batch normalization of conv activations: statistics per channel over
/// the batch and all pixels, with learned per-channel gain and shift (both
/// 1 x channels). Batch mean and biased variance go to the optional outputs.
template <typename T>
Var<T> channel_batch_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, Index channels,
                          T eps = T(1e-5), Matrix<T>* mean_out = nullptr, Matrix<T>* var_out = nullptr) {
  detail::check(channels > 0 && x.cols() % channels == 0, "channel_batch_norm: width not divisible");
  detail::check(gain.rows() == 1 && gain.cols() == channels && shift.rows() == 1 && shift.cols() == channels,
                "channel_batch_norm: parameter width mismatch");
  detail::check(x.rows() > 0, "channel_batch_norm: empty batch");
  const Index pixels = x.cols() / channels;
  const T count = static_cast<T>(x.rows() * pixels);
  Eigen::Array<T, 1, Eigen::Dynamic> mu(channels), inv_std(channels), var(channels);
  for (Index c = 0; c < channels; ++c) {
    const auto block = x.value().middleCols(c * pixels, pixels).array();
    mu(c) = block.sum() / count;
    var(c) = (block - mu(c)).square().sum() / count;
    inv_std(c) = T(1) / std::sqrt(var(c) + eps);
  }
  if (mean_out) *mean_out = mu.matrix();
  if (var_out) *var_out = var.matrix();
  Matrix<T> xhat(x.rows(), x.cols());
  Matrix<T> out(x.rows(), x.cols());
  for (Index c = 0; c < channels; ++c) {
    xhat.middleCols(c * pixels, pixels) = ((x.value().middleCols(c * pixels, pixels).array() - mu(c)) * inv_std(c)).matrix();
    out.middleCols(c * pixels, pixels) =
        (xhat.middleCols(c * pixels, pixels).array() * gain.value()(0, c) + shift.value()(0, c)).matrix();
  }
  return detail::make_result<T>(
      std::move(out), {x, gain, shift},
      [x, gain, shift, channels, pixels, count, xhat = std::move(xhat), inv_std](Node<T>& self) {
        for (Index c = 0; c < channels; ++c) {
          const auto g = self.grad.middleCols(c * pixels, pixels).array();
          const auto xh = xhat.middleCols(c * pixels, pixels).array();
          const T sum_g = g.sum();
          const T sum_gx = (g * xh).sum();
          if (gain.requires_grad()) gain.node()->grad_buffer()(0, c) += sum_gx;
          if (shift.requires_grad()) shift.node()->grad_buffer()(0, c) += sum_g;
          if (x.requires_grad()) {
            const T k = gain.value()(0, c) * inv_std(c);
            x.node()->grad_buffer().middleCols(c * pixels, pixels).array() +=
                k * (g - sum_g / count - xh * (sum_gx / count));
          }
        }
      });
}

/// Per-channel x * scale + shift over conv activations (1 x channels each).
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, Index channels) {
  detail::check(channels > 0 && x.cols() % channels == 0, "channel_affine: width not divisible");
  detail::check(scale.rows() == 1 && scale.cols() == channels && shift.rows() == 1 && shift.cols() == channels,
                "channel_affine: parameter width mismatch");
  const Index pixels = x.cols() / channels;
  Matrix<T> out(x.rows(), x.cols());
  for (Index c = 0; c < channels; ++c) {
    out.middleCols(c * pixels, pixels) =
        (x.value().middleCols(c * pixels, pixels).array() * scale.value()(0, c) + shift.value()(0, c)).matrix();
  }
  return detail::make_result<T>(std::move(out), {x, scale, shift}, [x, scale, shift, channels, pixels](Node<T>& self) {
    for (Index c = 0; c < channels; ++c) {
      const auto g = self.grad.middleCols(c * pixels, pixels).array();
      if (x.requires_grad()) x.node()->grad_buffer().middleCols(c * pixels, pixels).array() += g * scale.value()(0, c);
      if (scale.requires_grad()) {
        scale.node()->grad_buffer()(0, c) += (g * x.value().middleCols(c * pixels, pixels).array()).sum();
      }
      if (shift.requires_grad()) shift.node()->grad_buffer()(0, c) += g.sum();
    }
  });
}

/// Mean over spatial positions: (batch, C*pixels) -> (batch, C).
template <typename T>
Var<T> global_avg_pool(const Var<T>& x, Index channels) {
  detail::check(channels > 0 && x.cols() % channels == 0, "global_avg_pool: width not divisible");
  const Index pixels = x.cols() / channels;
  Matrix<T> out(x.rows(), channels);
  for (Index b = 0; b < x.rows(); ++b) {
    for (Index c = 0; c < channels; ++c) out(b, c) = x.value().row(b).segment(c * pixels, pixels).mean();
  }
  return detail::make_result<T>(std::move(out), {x}, [x, channels, pixels](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    const T inv = T(1) / static_cast<T>(pixels);
    for (Index b = 0; b < x.rows(); ++b) {
      for (Index c = 0; c < channels; ++c) g.row(b).segment(c * pixels, pixels).array() += self.grad(b, c) * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses (all return 1x1)

/// Mean over rows of 1 - cos(pred_r, target_r). Throws NumericDegeneracyError
/// when any row norm falls below `min_norm`. Gradients flow into `target`
/// only when it requires them.
template <typename T>
Var<T> mean_cosine_distance(const Var<T>& pred, const Var<T>& target, T min_norm = T(1e-12)) {
  detail::check(pred.rows() == target.rows() && pred.cols() == target.cols(),
                "mean_cosine_distance: shape mismatch");
  const Index n = pred.rows();
  Eigen::Matrix<T, Eigen::Dynamic, 1> pn(n), tn(n), cosv(n);
  for (Index r = 0; r < n; ++r) {
    pn(r) = pred.value().row(r).norm();
    tn(r) = target.value().row(r).norm();
    if (!(pn(r) >= min_norm) || !(tn(r) >= min_norm)) {
      throw NumericDegeneracyError("representation norm below " + std::to_string(double(min_norm)) +
                                   " in row " + std::to_string(r));
    }
    cosv(r) = pred.value().row(r).dot(target.value().row(r)) / (pn(r) * tn(r));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = T(1) - cosv.mean();
  return detail::make_result<T>(std::move(out), {pred, target}, [pred, target, pn, tn, cosv](Node<T>& self) {
    const Index n = pred.rows();
    const T g = self.grad(0, 0) / static_cast<T>(n);
    for (Index r = 0; r < n; ++r) {
      const auto p = pred.value().row(r);
      const auto t = target.value().row(r);
      if (pred.requires_grad()) {
        pred.node()->grad_buffer().row(r) -= g * (t / (pn(r) * tn(r)) - cosv(r) * p / (pn(r) * pn(r)));
      }
      if (target.requires_grad()) {
        target.node()->grad_buffer().row(r) -= g * (p / (pn(r) * tn(r)) - cosv(r) * t / (tn(r) * tn(r)));
      }
    }
  });
}

/// Mean softmax cross-entropy of `logits` rows against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::check(static_cast<Index>(labels.size()) == logits.rows(), "softmax_cross_entropy: label count");
  const Index n = logits.rows();
  Matrix<T> probs(n, logits.cols());
  T total = 0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    detail::check(y >= 0 && y < logits.cols(), "softmax_cross_entropy: label out of range");
    const T mx = logits.value().row(r).maxCoeff();
    probs.row(r) = (logits.value().row(r).array() - mx).exp();
    const T z = probs.row(r).sum();
    probs.row(r) /= z;
    total -= logits.value()(r, y) - mx - std::log(z);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::make_result<T>(std::move(out), {logits},
                                [logits, probs = std::move(probs), ys = std::move(ys)](Node<T>& self) {
                                  const T g = self.grad(0, 0) / static_cast<T>(probs.rows());
                                  auto& gl = logits.node()->grad_buffer();
                                  gl += probs * g;
                                  for (std::size_t r = 0; r < ys.size(); ++r) gl(static_cast<Index>(r), ys[r]) -= g;
                                });
}

/// Mean over all entries of (pred - target)^2; target is constant.
template <typename T>
Var<T> mean_squared_error(const Var<T>& pred, const Matrix<T>& target) {
  detail::check(pred.rows() == target.rows() && pred.cols() == target.cols(), "mean_squared_error: shape");
  Matrix<T> diff = pred.value() - target;
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<T>(diff.size());
  return detail::make_result<T>(std::move(out), {pred}, [pred, diff = std::move(diff)](Node<T>& self) {
    pred.node()->grad_buffer() += diff * (T(2) * self.grad(0, 0) / static_cast<T>(diff.size()));
  });
}

}  // namespace seqjepa::ad
