#pragma once

// Tape-free reverse-mode differentiation over NCHW tensors. Every op builds a
// node holding its value and a closure that pushes the node's gradient into
// its inputs; backward() walks the graph in reverse topological order.

#include "hsds/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hsds::ad {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const typename Tensor<Scalar>::Array& g) {
    if (grad.empty()) {
      grad = Tensor<Scalar>(value.shape(), g);
    } else {
      grad.array() += g;
    }
  }
};

/// Handle to a graph node. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading; only meaningful on leaves.
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Scalar item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  Tensor<Scalar> grad() const { return has_grad() ? node_->grad : Tensor<Scalar>(shape()); }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> t) {
  return Var<Scalar>(std::move(t), false);
}

template <typename Scalar>
Var<Scalar> parameter(Tensor<Scalar> t) {
  return Var<Scalar>(std::move(t), true);
}

namespace detail {

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

/// Creates an op node; the backward closure is dropped when no input needs gradients.
template <typename Scalar>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<NodePtr<Scalar>> inputs,
                    std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* where) {
  auto dim = [&](Index x, Index y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeMismatch(where, a, b);
  };
  return Shape{dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
}

/// Materializes t broadcast to `to`.
template <typename Scalar>
Tensor<Scalar> expand(const Tensor<Scalar>& t, const Shape& to) {
  const Shape& s = t.shape();
  if (s == to) return t;
  if (s.size() == 1) return Tensor<Scalar>(to, t[0]);
  Tensor<Scalar> out(to);
  for (Index n = 0; n < to.n; ++n)
    for (Index c = 0; c < to.c; ++c)
      for (Index h = 0; h < to.h; ++h)
        for (Index w = 0; w < to.w; ++w)
          out(n, c, h, w) = t(s.n == 1 ? 0 : n, s.c == 1 ? 0 : c, s.h == 1 ? 0 : h, s.w == 1 ? 0 : w);
  return out;
}

/// Sums t over the dimensions along which `to` was broadcast.
template <typename Scalar>
typename Tensor<Scalar>::Array reduce_to(const Tensor<Scalar>& t, const Shape& to) {
  const Shape& s = t.shape();
  if (s == to) return t.array();
  if (to.size() == 1) return Tensor<Scalar>::Array::Constant(1, t.array().sum());
  Tensor<Scalar> out(to);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w)
          out(to.n == 1 ? 0 : n, to.c == 1 ? 0 : c, to.h == 1 ? 0 : h, to.w == 1 ? 0 : w) += t(n, c, h, w);
  return out.array();
}

template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> unary(const Var<Scalar>& a, Fwd fwd, Deriv deriv) {
  Tensor<Scalar> out(a.shape(), fwd(a.value().array()));
  return make_op<Scalar>(std::move(out), {a.node()}, [deriv](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.accumulate(self.grad.array() * deriv(in.value.array(), self.value.array()));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with NCHW broadcasting.

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out = detail::expand(a.value(), out_shape);
  out.array() += detail::expand(b.value(), out_shape).array();
  return detail::make_op<Scalar>(std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->accumulate(detail::reduce_to(self.grad, in->value.shape()));
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out = detail::expand(a.value(), out_shape);
  out.array() -= detail::expand(b.value(), out_shape).array();
  return detail::make_op<Scalar>(std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) x.accumulate(detail::reduce_to(self.grad, x.value.shape()));
    if (y.requires_grad) y.accumulate(-detail::reduce_to(self.grad, y.value.shape()));
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out = detail::expand(a.value(), out_shape);
  out.array() *= detail::expand(b.value(), out_shape).array();
  return detail::make_op<Scalar>(std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    const Shape& s = self.value.shape();
    if (x.requires_grad) {
      Tensor<Scalar> g(s, self.grad.array() * detail::expand(y.value, s).array());
      x.accumulate(detail::reduce_to(g, x.value.shape()));
    }
    if (y.requires_grad) {
      Tensor<Scalar> g(s, self.grad.array() * detail::expand(x.value, s).array());
      y.accumulate(detail::reduce_to(g, y.value.shape()));
    }
  });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "div");
  Tensor<Scalar> out = detail::expand(a.value(), out_shape);
  out.array() /= detail::expand(b.value(), out_shape).array();
  return detail::make_op<Scalar>(std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    const Shape& s = self.value.shape();
    const auto yb = detail::expand(y.value, s);
    if (x.requires_grad) {
      Tensor<Scalar> g(s, self.grad.array() / yb.array());
      x.accumulate(detail::reduce_to(g, x.value.shape()));
    }
    if (y.requires_grad) {
      Tensor<Scalar> g(s, -self.grad.array() * self.value.array() / yb.array());
      y.accumulate(detail::reduce_to(g, y.value.shape()));
    }
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }

/// a * s + t for scalar constants.
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& a, Scalar s, Scalar t = Scalar(0)) {
  Tensor<Scalar> out(a.shape(), a.value().array() * s + t);
  return detail::make_op<Scalar>(std::move(out), {a.node()}, [s](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.accumulate(self.grad.array() * s);
  });
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) { return affine(a, s); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return affine(a, s); }
template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, Scalar t) { return affine(a, Scalar(1), t); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) { return affine(a, Scalar(-1)); }

/// a - r for a constant tensor r of the same shape.
template <typename Scalar>
Var<Scalar> sub_const(const Var<Scalar>& a, const Tensor<Scalar>& r) {
  if (!(a.shape() == r.shape())) throw ShapeMismatch("sub_const", a.shape(), r.shape());
  Tensor<Scalar> out(a.shape(), a.value().array() - r.array());
  return detail::make_op<Scalar>(std::move(out), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.accumulate(self.grad.array());
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return detail::unary(
      a, [](const auto& x) { return x.square(); }, [](const auto& x, const auto&) { return Scalar(2) * x; });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  return detail::unary(
      a, [](const auto& x) { return x.sqrt(); }, [](const auto&, const auto& y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return detail::unary(
      a, [](const auto& x) { return x.log(); }, [](const auto& x, const auto&) { return x.inverse(); });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  return detail::unary(
      a, [](const auto& x) { return x.abs(); },
      [](const auto& x, const auto&) {
        return (x > Scalar(0)).template cast<Scalar>() - (x < Scalar(0)).template cast<Scalar>();
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  return detail::unary(
      a, [](const auto& x) { return (Scalar(1) + (-x).exp()).inverse(); },
      [](const auto&, const auto& y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  return detail::unary(
      a, [slope](const auto& x) { return (x > Scalar(0)).select(x, slope * x); },
      [slope](const auto& x, const auto&) {
        using A = typename Tensor<Scalar>::Array;
        return (x > Scalar(0)).select(A::Ones(x.size()), A::Constant(x.size(), slope));
      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return leaky_relu(a, Scalar(0));
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  return detail::make_op<Scalar>(Tensor<Scalar>::scalar(a.value().array().sum()), {a.node()},
                                 [](Node<Scalar>& self) {
                                   auto& in = *self.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.accumulate(Tensor<Scalar>::Array::Constant(in.value.size(), self.grad[0]));
                                 });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return affine(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Sums each sample to shape (N,1,1,1).
template <typename Scalar>
Var<Scalar> sum_per_sample(const Var<Scalar>& a) {
  const Shape& s = a.shape();
  Tensor<Scalar> out(Shape{s.n, 1, 1, 1});
  for (Index n = 0; n < s.n; ++n) out[n] = a.value().array().segment(n * s.sample(), s.sample()).sum();
  return detail::make_op<Scalar>(std::move(out), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const Shape& s = in.value.shape();
    typename Tensor<Scalar>::Array g(s.size());
    for (Index n = 0; n < s.n; ++n) g.segment(n * s.sample(), s.sample()).setConstant(self.grad[n]);
    in.accumulate(g);
  });
}

/// Sums over channels to shape (N,1,H,W).
template <typename Scalar>
Var<Scalar> sum_channels(const Var<Scalar>& a) {
  const Shape& s = a.shape();
  Tensor<Scalar> out(Shape{s.n, 1, s.h, s.w});
  for (Index n = 0; n < s.n; ++n)
    out.sample_matrix(n) = a.value().sample_matrix(n).colwise().sum();
  return detail::make_op<Scalar>(std::move(out), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const Shape& s = in.value.shape();
    Tensor<Scalar> g(s);
    for (Index n = 0; n < s.n; ++n) g.sample_matrix(n).rowwise() = self.grad.sample_matrix(n).row(0);
    in.accumulate(g.array());
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, const Shape& to) {
  if (to.size() != a.value().size()) throw ShapeMismatch("reshape", a.shape(), to);
  return detail::make_op<Scalar>(a.value().reshaped(to), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.accumulate(self.grad.array());
  });
}

/// Samples [start, start + count) along the batch axis.
template <typename Scalar>
Var<Scalar> slice_batch(const Var<Scalar>& a, Index start, Index count) {
  const Shape& s = a.shape();
  if (start < 0 || count < 1 || start + count > s.n) throw ShapeMismatch("slice_batch: range out of bounds");
  Shape o = s;
  o.n = count;
  Tensor<Scalar> out(o, a.value().array().segment(start * s.sample(), count * s.sample()));
  return detail::make_op<Scalar>(std::move(out), {a.node()}, [start](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    typename Tensor<Scalar>::Array g = Tensor<Scalar>::Array::Zero(in.value.size());
    g.segment(start * in.value.shape().sample(), self.grad.size()) = self.grad.array();
    in.accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> concat_batch(const Var<Scalar>& a, const Var<Scalar>& b) {
  Shape sa = a.shape();
  Shape sb = b.shape();
  sa.n = sb.n = 1;
  if (!(sa == sb)) throw ShapeMismatch("concat_batch", a.shape(), b.shape());
  Shape o = a.shape();
  o.n += b.shape().n;
  typename Tensor<Scalar>::Array data(o.size());
  data << a.value().array(), b.value().array();
  return detail::make_op<Scalar>(Tensor<Scalar>(o, std::move(data)), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) x.accumulate(self.grad.array().head(x.value.size()));
    if (y.requires_grad) y.accumulate(self.grad.array().tail(y.value.size()));
  });
}

/// Element i of a flattened tensor, as a scalar Var.
template <typename Scalar>
Var<Scalar> pick(const Var<Scalar>& a, Index i) {
  return detail::make_op<Scalar>(Tensor<Scalar>::scalar(a.value()[i]), {a.node()}, [i](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    typename Tensor<Scalar>::Array g = Tensor<Scalar>::Array::Zero(in.value.size());
    g[i] = self.grad[0];
    in.accumulate(g);
  });
}

/// Softmax over the flattened entries of a where mask is true; masked entries are 0.
/// An empty mask means all entries participate.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, const std::vector<bool>& mask = {}) {
  const auto& x = a.value().array();
  const Index k = x.size();
  auto on = [&](Index i) { return mask.empty() || mask[static_cast<std::size_t>(i)]; };
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (Index i = 0; i < k; ++i)
    if (on(i)) mx = std::max(mx, x[i]);
  typename Tensor<Scalar>::Array y = Tensor<Scalar>::Array::Zero(k);
  Scalar z = 0;
  for (Index i = 0; i < k; ++i)
    if (on(i)) z += (y[i] = std::exp(x[i] - mx));
  y /= z;
  return detail::make_op<Scalar>(Tensor<Scalar>(a.shape(), std::move(y)), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const auto& yv = self.value.array();
    const Scalar dot = (yv * self.grad.array()).sum();
    in.accumulate(yv * (self.grad.array() - dot));
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling.

struct ConvGeometry {
  Index dilation = 1;
  Index pad_h = 0;
  Index pad_w = 0;
};

namespace detail {

template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, Index kh, Index kw, const ConvGeometry& g, Index oh, Index ow,
            typename Tensor<Scalar>::Matrix& cols) {
  const Shape& s = x.shape();
  cols.setZero(s.c * kh * kw, oh * ow);
  for (Index c = 0; c < s.c; ++c) {
    const auto plane = x.plane(n, c);
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (c * kh + ki) * kw + kj;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy - g.pad_h + ki * g.dilation;
          if (iy < 0 || iy >= s.h) continue;
          const Index ox0 = std::max<Index>(0, g.pad_w - kj * g.dilation);
          const Index ox1 = std::min<Index>(ow, s.w + g.pad_w - kj * g.dilation);
          for (Index ox = ox0; ox < ox1; ++ox) cols(row, oy * ow + ox) = plane(iy, ox - g.pad_w + kj * g.dilation);
        }
      }
  }
}

template <typename Scalar>
void col2im_add(const typename Tensor<Scalar>::Matrix& cols, Index n, Index kh, Index kw, const ConvGeometry& g,
                Index oh, Index ow, Tensor<Scalar>& dx) {
  const Shape& s = dx.shape();
  for (Index c = 0; c < s.c; ++c) {
    auto plane = dx.plane(n, c);
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (c * kh + ki) * kw + kj;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy - g.pad_h + ki * g.dilation;
          if (iy < 0 || iy >= s.h) continue;
          const Index ox0 = std::max<Index>(0, g.pad_w - kj * g.dilation);
          const Index ox1 = std::min<Index>(ow, s.w + g.pad_w - kj * g.dilation);
          for (Index ox = ox0; ox < ox1; ++ox) plane(iy, ox - g.pad_w + kj * g.dilation) += cols(row, oy * ow + ox);
        }
      }
  }
}

}  // namespace detail

/// 2-D cross-correlation. weight is (Cout, Cin, kh, kw); bias, when defined, is (Cout,1,1,1).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, ConvGeometry g) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.c != xs.c) throw ShapeMismatch("conv2d: input channels", xs, ws);
  const Index kh = ws.h, kw = ws.w;
  const Index oh = xs.h + 2 * g.pad_h - g.dilation * (kh - 1);
  const Index ow = xs.w + 2 * g.pad_w - g.dilation * (kw - 1);
  if (oh < 1 || ow < 1) throw ShapeMismatch("conv2d: kernel larger than padded input " + xs.str());
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != ws.n) throw ShapeMismatch("conv2d: bias", bias.shape(), ws);

  const typename Tensor<Scalar>::ConstMatrixMap wm(weight.value().data(), ws.n, ws.c * kh * kw);
  Tensor<Scalar> out(Shape{xs.n, ws.n, oh, ow});
  Matrix cols;
  for (Index n = 0; n < xs.n; ++n) {
    detail::im2col(x.value(), n, kh, kw, g, oh, ow, cols);
    auto om = out.sample_matrix(n);
    om.noalias() = wm * cols;
    if (has_bias) om.colwise() += bias.value().array().matrix();
  }

  std::vector<detail::NodePtr<Scalar>> inputs{x.node(), weight.node()};
  if (has_bias) inputs.push_back(bias.node());
  return detail::make_op<Scalar>(std::move(out), std::move(inputs), [g, kh, kw, oh, ow](Node<Scalar>& self) {
    auto& xin = *self.inputs[0];
    auto& win = *self.inputs[1];
    Node<Scalar>* bin = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    const Shape& xs = xin.value.shape();
    const Shape& ws = win.value.shape();
    const typename Tensor<Scalar>::ConstMatrixMap wm(win.value.data(), ws.n, ws.c * kh * kw);
    Matrix dw = Matrix::Zero(ws.n, ws.c * kh * kw);
    typename Tensor<Scalar>::Array db = Tensor<Scalar>::Array::Zero(ws.n);
    Tensor<Scalar> dx(xs);
    Matrix cols, dcols;
    for (Index n = 0; n < xs.n; ++n) {
      const auto gm = self.grad.sample_matrix(n);
      if (win.requires_grad) {
        detail::im2col(xin.value, n, kh, kw, g, oh, ow, cols);
        dw.noalias() += gm * cols.transpose();
      }
      if (bin && bin->requires_grad) db += gm.rowwise().sum().array();
      if (xin.requires_grad) {
        dcols.noalias() = wm.transpose() * gm;
        detail::col2im_add(dcols, n, kh, kw, g, oh, ow, dx);
      }
    }
    if (xin.requires_grad) xin.accumulate(dx.array());
    if (win.requires_grad) win.accumulate(Eigen::Map<typename Tensor<Scalar>::Array>(dw.data(), dw.size()));
    if (bin && bin->requires_grad) bin->accumulate(db);
  });
}

/// Same-size convolution padding for an odd kernel.
inline ConvGeometry same_padding(Index kh, Index kw, Index dilation = 1) {
  return ConvGeometry{dilation, dilation * (kh - 1) / 2, dilation * (kw - 1) / 2};
}

/// Applies one fixed (kh, kw) kernel to every channel independently without padding.
template <typename Scalar>
Var<Scalar> filter_valid(const Var<Scalar>& x, const Tensor<Scalar>& kernel) {
  const Shape& s = x.shape();
  auto flat = reshape(x, Shape{s.n * s.c, 1, s.h, s.w});
  auto y = conv2d(flat, constant(kernel.reshaped(Shape{1, 1, kernel.shape().h, kernel.shape().w})), Var<Scalar>(),
                  ConvGeometry{});
  const Shape& ys = y.shape();
  return reshape(y, Shape{s.n, s.c, ys.h, ys.w});
}

/// Pads every plane by p pixels on each side, repeating the border pixel.
template <typename Scalar>
Var<Scalar> pad_replicate(const Var<Scalar>& x, Index p) {
  const Shape& s = x.shape();
  const Shape o{s.n, s.c, s.h + 2 * p, s.w + 2 * p};
  auto src = [p](Index i, Index len) { return std::clamp<Index>(i - p, 0, len - 1); };
  Tensor<Scalar> out(o);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < o.h; ++h)
        for (Index w = 0; w < o.w; ++w) out(n, c, h, w) = x.value()(n, c, src(h, s.h), src(w, s.w));
  return detail::make_op<Scalar>(std::move(out), {x.node()}, [p, s, o, src](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<Scalar> g(s);
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c)
        for (Index h = 0; h < o.h; ++h)
          for (Index w = 0; w < o.w; ++w) g(n, c, src(h, s.h), src(w, s.w)) += self.grad(n, c, h, w);
    in.accumulate(g.array());
  });
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols are dropped).
template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  const Shape o{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<Scalar> out(o);
  const auto& v = x.value();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < o.h; ++i)
        for (Index j = 0; j < o.w; ++j)
          out(n, c, i, j) = Scalar(0.25) * (v(n, c, 2 * i, 2 * j) + v(n, c, 2 * i + 1, 2 * j) +
                                            v(n, c, 2 * i, 2 * j + 1) + v(n, c, 2 * i + 1, 2 * j + 1));
  return detail::make_op<Scalar>(std::move(out), {x.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<Scalar> g(in.value.shape());
    const Shape& o = self.value.shape();
    for (Index n = 0; n < o.n; ++n)
      for (Index c = 0; c < o.c; ++c)
        for (Index i = 0; i < o.h; ++i)
          for (Index j = 0; j < o.w; ++j) {
            const Scalar d = Scalar(0.25) * self.grad(n, c, i, j);
            g(n, c, 2 * i, 2 * j) += d;
            g(n, c, 2 * i + 1, 2 * j) += d;
            g(n, c, 2 * i, 2 * j + 1) += d;
            g(n, c, 2 * i + 1, 2 * j + 1) += d;
          }
    in.accumulate(g.array());
  });
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first maximum.
template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  const Shape o{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<Scalar> out(o);
  std::vector<Index> argmax(static_cast<std::size_t>(o.size()));
  const auto& v = x.value();
  Index k = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < o.h; ++i)
        for (Index j = 0; j < o.w; ++j, ++k) {
          Index best = ((n * s.c + c) * s.h + 2 * i) * s.w + 2 * j;
          for (Index di = 0; di < 2; ++di)
            for (Index dj = 0; dj < 2; ++dj) {
              const Index idx = ((n * s.c + c) * s.h + 2 * i + di) * s.w + 2 * j + dj;
              if (v[idx] > v[best]) best = idx;
            }
          argmax[static_cast<std::size_t>(k)] = best;
          out[k] = v[best];
        }
  return detail::make_op<Scalar>(std::move(out), {x.node()}, [argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    typename Tensor<Scalar>::Array g = Tensor<Scalar>::Array::Zero(in.value.size());
    for (std::size_t k = 0; k < argmax.size(); ++k) g[argmax[k]] += self.grad[static_cast<Index>(k)];
    in.accumulate(g);
  });
}

// ---------------------------------------------------------------------------

/// Accumulates d(root)/d(leaf) into every leaf that requires gradients.
/// root must hold a single element.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.value().size() != 1) throw ShapeMismatch("backward: root must be scalar, got " + root.shape().str());
  if (!root.requires_grad()) return;

  using NodeT = Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Tensor<Scalar>::Array::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && !node->grad.empty()) {
      node->backward(*node);
      node->grad = Tensor<Scalar>();
    }
  }
}

}  // namespace hsds::ad
