#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Var is a shared handle to a graph node. Feature maps use the Grid layout
// (channels x pixels) and carry their raster size so spatial ops can recover
// it. Nodes only record a backward closure when some input requires a
// gradient and recording is enabled, so frozen and inference paths build no
// graph.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "t2icount/tensor.hpp"

namespace t2i::ad {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  Mat<Scalar> value;
  Mat<Scalar> grad;
  int height = 0;
  int width = 0;
  bool requires_grad = false;
  bool retain_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

template <typename Scalar>
class Var {
 public:
  using NodeT = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Var constant(Mat<Scalar> value, int h = 0, int w = 0) { return leaf(std::move(value), false, h, w); }

  static Var leaf(Mat<Scalar> value, bool requires_grad, int h = 0, int w = 0) {
    auto n = std::make_shared<NodeT>();
    n->value = std::move(value);
    n->height = h;
    n->width = w;
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var from_grid(const Grid<Scalar>& g, bool requires_grad = false) {
    return leaf(g.data, requires_grad, g.height, g.width);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat<Scalar>& value() const { return node_->value; }
  Mat<Scalar>& mutable_value() { return node_->value; }
  const Mat<Scalar>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  void retain_grad() { node_->retain_grad = true; }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  int height() const { return node_->height; }
  int width() const { return node_->width; }

  Grid<Scalar> grid() const { return Grid<Scalar>(node_->value, node_->height, node_->width); }
  Scalar item() const { return node_->value(0, 0); }

  NodeT* node() const { return node_.get(); }
  const std::shared_ptr<NodeT>& shared() const { return node_; }

  // Drop the recorded history; the value is kept.
  Var detach() const { return constant(node_->value, node_->height, node_->width); }

 private:
  std::shared_ptr<NodeT> node_;
};

// Builds a result node. `backward` reads self.grad and pushes into
// self.parents[i]->accumulate(...); it is discarded when no parent needs it.
template <typename Scalar, typename Fn>
Var<Scalar> make_result(Mat<Scalar> value, int h, int w, std::vector<Var<Scalar>> parents, Fn&& backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->height = h;
  n->width = w;
  if (grad_mode()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (const auto& p : parents) n->parents.push_back(p.shared());
      n->backward = std::forward<Fn>(backward);
    }
  }
  return Var<Scalar>(std::move(n));
}

// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
template <typename Scalar>
void backward(const Var<Scalar>& root, Scalar seed = Scalar(1)) {
  using NodeT = Node<Scalar>;
  if (!root.requires_grad()) return;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  NodeT* r = root.node();
  r->accumulate(Mat<Scalar>::Constant(r->value.rows(), r->value.cols(), seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->is_leaf() || n->grad.size() == 0) continue;
    n->backward(*n);
    if (!n->retain_grad) n->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------- algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Mat<Scalar> y = a.value() * b.value();
  return make_result<Scalar>(std::move(y), 0, 0, {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

// a^T b
template <typename Scalar>
Var<Scalar> matmul_tn(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_tn: inner dimensions differ");
  Mat<Scalar> y = a.value().transpose() * b.value();
  return make_result<Scalar>(std::move(y), 0, 0, {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(pb->value * self.grad.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value * self.grad);
  });
}

// a b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions differ");
  Mat<Scalar> y = a.value() * b.value().transpose();
  return make_result<Scalar>(std::move(y), 0, 0, {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value);
    if (pb->requires_grad) pb->accumulate(self.grad.transpose() * pa->value);
  });
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  return make_result<Scalar>(a.value() + b.value(), a.height(), a.width(), {a, b}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  return make_result<Scalar>(a.value() - b.value(), a.height(), a.width(), {a, b}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  Mat<Scalar> y = a.value().cwiseProduct(b.value());
  return make_result<Scalar>(std::move(y), a.height(), a.width(), {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return make_result<Scalar>(a.value() * s, a.height(), a.width(), {a},
                             [s](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad * s); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  Mat<Scalar> y = a.value().array() + s;
  return make_result<Scalar>(std::move(y), a.height(), a.width(), {a},
                             [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad); });
}

// x[C, N] + b[C, 1] broadcast over columns.
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& b) {
  if (b.cols() != 1 || b.rows() != x.rows()) throw DimensionError("add_bias: bias must be a column of x.rows()");
  Mat<Scalar> y = x.value().colwise() + b.value().col(0);
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x, b}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.rowwise().sum());
  });
}

// x[C, N] scaled per column by s[1, N] (a map broadcast over channels).
template <typename Scalar>
Var<Scalar> mul_rows(const Var<Scalar>& x, const Var<Scalar>& s) {
  if (s.rows() != 1 || s.cols() != x.cols()) throw DimensionError("mul_rows: mask must be 1 x pixels");
  Mat<Scalar> y = x.value() * s.value().row(0).asDiagonal();
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x, s}, [](Node<Scalar>& self) {
    auto& px = self.parents[0];
    auto& ps = self.parents[1];
    if (px->requires_grad) px->accumulate(self.grad * ps->value.row(0).asDiagonal());
    if (ps->requires_grad) ps->accumulate(self.grad.cwiseProduct(px->value).colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  return make_result<Scalar>(x.value().transpose(), 0, 0, {x},
                             [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

// ---------------------------------------------------------------- pointwise

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Mat<Scalar> y = x.value().cwiseMax(Scalar(0));
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x}, [](Node<Scalar>& self) {
    auto& p = self.parents[0];
    p->accumulate((p->value.array() > Scalar(0)).select(self.grad, Scalar(0)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  Mat<Scalar> sig = (Scalar(1) + (-x.value().array()).exp()).inverse().matrix();
  Mat<Scalar> y = x.value().cwiseProduct(sig);
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x}, [sig](Node<Scalar>& self) {
    auto& p = self.parents[0];
    auto s = sig.array();
    p->accumulate((self.grad.array() * (s * (Scalar(1) + p->value.array() * (Scalar(1) - s)))).matrix());
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  Mat<Scalar> y = x.value().array().tanh().matrix();
  return make_result<Scalar>(y, x.height(), x.width(), {x}, [y](Node<Scalar>& self) {
    self.parents[0]->accumulate((self.grad.array() * (Scalar(1) - y.array().square())).matrix());
  });
}

// Subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  Mat<Scalar> y = x.value().cwiseAbs();
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x}, [](Node<Scalar>& self) {
    auto& p = self.parents[0];
    auto sign = (p->value.array() > Scalar(0)).template cast<Scalar>() - (p->value.array() < Scalar(0)).template cast<Scalar>();
    p->accumulate((self.grad.array() * sign).matrix());
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  Mat<Scalar> y = x.value().array().square().matrix();
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x}, [](Node<Scalar>& self) {
    auto& p = self.parents[0];
    p->accumulate((Scalar(2) * self.grad.array() * p->value.array()).matrix());
  });
}

// a / b for 1x1 operands.
template <typename Scalar>
Var<Scalar> divide_scalar(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.value().size() != 1 || b.value().size() != 1) throw DimensionError("divide_scalar: operands must be 1x1");
  Mat<Scalar> y(1, 1);
  y(0, 0) = a.item() / b.item();
  return make_result<Scalar>(std::move(y), 0, 0, {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const Scalar g = self.grad(0, 0);
    const Scalar bv = pb->value(0, 0);
    if (pa->requires_grad) pa->accumulate(Mat<Scalar>::Constant(1, 1, g / bv));
    if (pb->requires_grad) pb->accumulate(Mat<Scalar>::Constant(1, 1, -g * pa->value(0, 0) / (bv * bv)));
  });
}

// ---------------------------------------------------------------- reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Mat<Scalar> y = Mat<Scalar>::Constant(1, 1, x.value().sum());
  return make_result<Scalar>(std::move(y), 0, 0, {x}, [](Node<Scalar>& self) {
    auto& p = self.parents[0];
    p->accumulate(Mat<Scalar>::Constant(p->value.rows(), p->value.cols(), self.grad(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const Scalar n = static_cast<Scalar>(x.value().size());
  return scale(sum(x), Scalar(1) / n);
}

// Mean over columns: [C, N] -> [C, 1].
template <typename Scalar>
Var<Scalar> mean_cols(const Var<Scalar>& x) {
  const Scalar n = static_cast<Scalar>(x.cols());
  Mat<Scalar> y = x.value().rowwise().mean();
  return make_result<Scalar>(std::move(y), 0, 0, {x}, [n](Node<Scalar>& self) {
    auto& p = self.parents[0];
    p->accumulate(self.grad.col(0).replicate(1, p->value.cols()) / n);
  });
}

// ---------------------------------------------------------------- structure

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat<Scalar> y(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result<Scalar>(std::move(y), parts.front().height(), parts.front().width(), parts,
                             [](Node<Scalar>& self) {
                               Eigen::Index r0 = 0;
                               for (auto& p : self.parents) {
                                 const Eigen::Index n = p->value.rows();
                                 if (p->requires_grad) p->accumulate(self.grad.middleRows(r0, n));
                                 r0 += n;
                               }
                             });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.rows()) throw DimensionError("slice_rows: out of range");
  Mat<Scalar> y = x.value().middleRows(start, count);
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x}, [start, count](Node<Scalar>& self) {
    auto& p = self.parents[0];
    Mat<Scalar> g = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
    g.middleRows(start, count) = self.grad;
    p->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.cols()) throw DimensionError("slice_cols: out of range");
  Mat<Scalar> y = x.value().middleCols(start, count);
  return make_result<Scalar>(std::move(y), 0, 0, {x}, [start, count](Node<Scalar>& self) {
    auto& p = self.parents[0];
    Mat<Scalar> g = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
    g.middleCols(start, count) = self.grad;
    p->accumulate(g);
  });
}

// Attach a raster size to a matrix whose columns are pixels.
template <typename Scalar>
Var<Scalar> with_raster(const Var<Scalar>& x, int h, int w) {
  if (x.cols() != static_cast<Eigen::Index>(h) * w) throw DimensionError("with_raster: pixel count mismatch");
  return make_result<Scalar>(x.value(), h, w, {x}, [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad); });
}

// ---------------------------------------------------------------- neural ops

// Softmax along each row.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  Mat<Scalar> y = (x.value().colwise() - x.value().rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return make_result<Scalar>(y, 0, 0, {x}, [y](Node<Scalar>& self) {
    Vec<Scalar> dot = self.grad.cwiseProduct(y).rowwise().sum();
    self.parents[0]->accumulate(((self.grad.colwise() - dot).cwiseProduct(y)));
  });
}

// Normalizes every column over its rows, then applies per-row gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  const Eigen::Index d = x.rows();
  if (gain.rows() != d || bias.rows() != d) throw DimensionError("layer_norm: parameter width mismatch");
  RowVec<Scalar> mu = x.value().colwise().mean();
  Mat<Scalar> centered = x.value().rowwise() - mu;
  RowVec<Scalar> inv = ((centered.array().square().colwise().sum() / static_cast<Scalar>(d)) + eps).rsqrt().matrix();
  Mat<Scalar> xhat = centered * inv.asDiagonal();
  Mat<Scalar> y = (xhat.array().colwise() * gain.value().col(0).array()).matrix();
  y.colwise() += bias.value().col(0);
  return make_result<Scalar>(std::move(y), x.height(), x.width(), {x, gain, bias},
                             [xhat, inv, d](Node<Scalar>& self) {
                               auto& px = self.parents[0];
                               auto& pg = self.parents[1];
                               auto& pb = self.parents[2];
                               if (pg->requires_grad) pg->accumulate(self.grad.cwiseProduct(xhat).rowwise().sum());
                               if (pb->requires_grad) pb->accumulate(self.grad.rowwise().sum());
                               if (px->requires_grad) {
                                 Mat<Scalar> dxhat = (self.grad.array().colwise() * pg->value.col(0).array()).matrix();
                                 RowVec<Scalar> s1 = dxhat.colwise().sum();
                                 RowVec<Scalar> s2 = dxhat.cwiseProduct(xhat).colwise().sum();
                                 const Scalar n = static_cast<Scalar>(d);
                                 Mat<Scalar> dx = (dxhat * n).rowwise() - s1;
                                 dx -= xhat * s2.asDiagonal();
                                 px->accumulate(dx * (inv / n).asDiagonal());
                               }
                             });
}

struct ConvGeometry {
  int in_h, in_w, out_h, out_w, kernel, stride, pad;
};

inline ConvGeometry conv_geometry(int h, int w, int kernel, int stride, int pad) {
  ConvGeometry g{h, w, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1, kernel, stride, pad};
  if (g.out_h <= 0 || g.out_w <= 0) throw DimensionError("conv2d: input raster too small for kernel");
  return g;
}

// Rows of the patch matrix are ordered (ky, kx, channel).
template <typename Scalar>
Mat<Scalar> im2col(const Mat<Scalar>& x, const ConvGeometry& g) {
  const Eigen::Index c = x.rows();
  const int k = g.kernel;
  Mat<Scalar> cols = Mat<Scalar>::Zero(c * k * k, static_cast<Eigen::Index>(g.out_h) * g.out_w);
  for (int oy = 0; oy < g.out_h; ++oy)
    for (int ox = 0; ox < g.out_w; ++ox) {
      const Eigen::Index q = static_cast<Eigen::Index>(oy) * g.out_w + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.in_w) continue;
          cols.col(q).segment((ky * k + kx) * c, c) = x.col(static_cast<Eigen::Index>(iy) * g.in_w + ix);
        }
      }
    }
  return cols;
}

template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& cols, Eigen::Index channels, const ConvGeometry& g) {
  const int k = g.kernel;
  Mat<Scalar> x = Mat<Scalar>::Zero(channels, static_cast<Eigen::Index>(g.in_h) * g.in_w);
  for (int oy = 0; oy < g.out_h; ++oy)
    for (int ox = 0; ox < g.out_w; ++ox) {
      const Eigen::Index q = static_cast<Eigen::Index>(oy) * g.out_w + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.in_w) continue;
          x.col(static_cast<Eigen::Index>(iy) * g.in_w + ix) += cols.col(q).segment((ky * k + kx) * channels, channels);
        }
      }
    }
  return x;
}

// weight: [C_out, k*k*C_in]; bias: [C_out, 1].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int kernel, int stride,
                   int pad) {
  if (x.height() * x.width() != x.cols()) throw DimensionError("conv2d: input has no raster");
  if (weight.cols() != x.rows() * kernel * kernel)
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.cols() / (kernel * kernel)) +
                         " input channels, got " + std::to_string(x.rows()));
  const ConvGeometry g = conv_geometry(x.height(), x.width(), kernel, stride, pad);
  const bool pointwise = kernel == 1 && stride == 1 && pad == 0;
  Mat<Scalar> cols = pointwise ? Mat<Scalar>() : im2col(x.value(), g);
  const Mat<Scalar>& patches = pointwise ? x.value() : cols;
  Mat<Scalar> y = weight.value() * patches;
  y.colwise() += bias.value().col(0);
  const Eigen::Index in_c = x.rows();
  return make_result<Scalar>(std::move(y), g.out_h, g.out_w, {x, weight, bias},
                             [cols = std::move(cols), g, in_c, pointwise](Node<Scalar>& self) {
                               auto& px = self.parents[0];
                               auto& pw = self.parents[1];
                               auto& pb = self.parents[2];
                               const Mat<Scalar>& patches = pointwise ? px->value : cols;
                               if (pw->requires_grad) pw->accumulate(self.grad * patches.transpose());
                               if (pb->requires_grad) pb->accumulate(self.grad.rowwise().sum());
                               if (px->requires_grad) {
                                 Mat<Scalar> dcols = pw->value.transpose() * self.grad;
                                 if (pointwise)
                                   px->accumulate(dcols);
                                 else
                                   px->accumulate(col2im(dcols, in_c, g));
                               }
                             });
}

// y = x * op^T for a fixed sparse operator mapping input pixels to output pixels.
template <typename Scalar>
struct PixelOperator {
  Eigen::SparseMatrix<Scalar> forward_t;  // [in_pixels, out_pixels]
  Eigen::SparseMatrix<Scalar> forward;    // [out_pixels, in_pixels]
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
};

template <typename Scalar>
Var<Scalar> apply_pixel_operator(const Var<Scalar>& x, std::shared_ptr<const PixelOperator<Scalar>> op) {
  if (x.height() != op->in_h || x.width() != op->in_w || x.cols() != static_cast<Eigen::Index>(op->in_h) * op->in_w)
    throw DimensionError("resample: input raster " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                         " does not match operator " + std::to_string(op->in_h) + "x" + std::to_string(op->in_w));
  Mat<Scalar> y = x.value() * op->forward_t;
  return make_result<Scalar>(std::move(y), op->out_h, op->out_w, {x},
                             [op](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad * op->forward); });
}

// Per-column cosine similarity against one vector: [C, N] x [C, 1] -> [1, N].
// A zero-norm column or vector yields 0 with zero gradient.
template <typename Scalar>
Var<Scalar> cosine_columns(const Var<Scalar>& v, const Var<Scalar>& c) {
  if (c.cols() != 1 || c.rows() != v.rows()) throw DimensionError("cosine: vector width must match feature channels");
  const Eigen::Index n = v.cols();
  RowVec<Scalar> vnorm = v.value().colwise().norm();
  const Scalar cnorm = c.value().norm();
  RowVec<Scalar> dots = c.value().col(0).transpose() * v.value();
  RowVec<Scalar> s(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Scalar denom = vnorm(j) * cnorm;
    s(j) = denom > Scalar(0) ? std::clamp(dots(j) / denom, Scalar(-1), Scalar(1)) : Scalar(0);
  }
  Mat<Scalar> y = s;
  return make_result<Scalar>(std::move(y), v.height(), v.width(), {v, c}, [vnorm, cnorm, s](Node<Scalar>& self) {
    auto& pv = self.parents[0];
    auto& pc = self.parents[1];
    const Eigen::Index n = pv->value.cols();
    Mat<Scalar> dv = Mat<Scalar>::Zero(pv->value.rows(), n);
    Vec<Scalar> dc = Vec<Scalar>::Zero(pc->value.rows());
    const auto cval = pc->value.col(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (vnorm(j) <= Scalar(0) || cnorm <= Scalar(0)) continue;
      const Scalar g = self.grad(0, j);
      const auto vj = pv->value.col(j);
      // d cos / d v = c/(|v||c|) - cos * v/|v|^2, symmetric for c.
      if (pv->requires_grad) dv.col(j) = g * (cval / (vnorm(j) * cnorm) - s(j) * vj / (vnorm(j) * vnorm(j)));
      if (pc->requires_grad) dc += g * (vj / (vnorm(j) * cnorm) - s(j) * cval / (cnorm * cnorm));
    }
    if (pv->requires_grad) pv->accumulate(dv);
    if (pc->requires_grad) pc->accumulate(dc);
  });
}

}  // namespace t2i::ad
