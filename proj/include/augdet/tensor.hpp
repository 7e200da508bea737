// Minimal reverse-mode autodiff over dense 64-bit float tensors (row-major,
// NCHW for images). Exactly the primitives the rest of the project needs:
// conv2d, transposed conv2d, linear, layer norm, softmax, elementwise ops,
// a handful of structural ops, and SGD with momentum.
//
// GEMM inner kernels are delegated to single-threaded OpenBLAS; everything
// else is plain loops with a fixed accumulation order, so outputs are
// bitwise reproducible run to run on one platform.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "augdet/rng.hpp"

extern "C" void openblas_set_num_threads(int);

namespace augdet {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void pin_blas_threads() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

inline std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily; same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls grad from this node into parents
};

inline std::vector<double>& grad_buf(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

// Order-independent summation: each term is quantized to a fixed 2^-80 grid
// and accumulated in a 128-bit integer, so the sum of a multiset of doubles
// does not depend on the order terms arrive in. Used for the reductions that
// must be exactly invariant under token permutations (softmax denominators
// and attention-weighted value sums).
class OrderFreeSum {
 public:
  void add(double v) { acc_ += static_cast<__int128>(v * 0x1.0p80); }
  double get() const { return static_cast<double>(acc_) * 0x1.0p-80; }

 private:
  __int128 acc_ = 0;
};

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<int> shape, double fill, bool requires_grad = false) {
    validate(shape);
    n_ = std::make_shared<detail::Node>();
    n_->shape = std::move(shape);
    n_->value.assign(detail::numel(n_->shape), fill);
    n_->requires_grad = requires_grad;
  }

  Tensor(std::vector<int> shape, std::vector<double> data,
         bool requires_grad = false) {
    validate(shape);
    if (detail::numel(shape) != data.size())
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + detail::shape_str(shape));
    n_ = std::make_shared<detail::Node>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  const std::vector<double>& value() const { return n_->value; }
  // In-place access; only meaningful on leaves (parameters, inputs).
  std::vector<double>& value_mut() { return n_->value; }
  const std::vector<double>& grad() const { return n_->grad; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor is not scalar");
    return n_->value[0];
  }

  void set_requires_grad(bool b) { n_->requires_grad = b; }

  void zero_grad() {
    if (n_) n_->grad.assign(n_->value.size(), 0.0);
  }

  bool all_finite() const {
    for (double v : n_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Reverse pass from a scalar. Gradients accumulate into every node that
  // requires grad; parameter grads are added to (not overwritten), matching
  // multi-loss accumulation semantics.
  void backward() const {
    if (!n_ || size() != 1) throw ShapeError("backward: loss must be scalar");
    if (!n_->requires_grad)
      throw std::runtime_error("backward: tensor does not require grad");
    std::vector<detail::Node*> order;
    topo_sort(n_.get(), order);
    detail::grad_buf(*n_)[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backprop) node->backprop(*node);
    }
  }

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  static void validate(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank-0 shapes not supported");
    for (int d : shape)
      if (d <= 0)
        throw ShapeError("tensor: nonpositive dim in " +
                         detail::shape_str(shape));
  }

  static void topo_sort(detail::Node* root, std::vector<detail::Node*>& out) {
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        detail::Node* p = node->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) {
          detail::grad_buf(*p);
          stack.emplace_back(p, 0);
        }
      } else {
        out.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline std::shared_ptr<Node> make_node(
    std::vector<int> shape, std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(numel(n->shape));
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto n = detail::make_node(a.shape(), {a.node(), b.node()});
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + bv[i];
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      for (int p = 0; p < 2; ++p) {
        if (!self.parents[p]->requires_grad) continue;
        auto& g = detail::grad_buf(*self.parents[p]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto n = detail::make_node(a.shape(), {a.node(), b.node()});
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] - bv[i];
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      if (self.parents[0]->requires_grad) {
        auto& g = detail::grad_buf(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (self.parents[1]->requires_grad) {
        auto& g = detail::grad_buf(*self.parents[1]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  auto n = detail::make_node(a.shape(), {a.node(), b.node()});
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * bv[i];
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      const auto &av = self.parents[0]->value, &bv = self.parents[1]->value;
      if (self.parents[0]->requires_grad) {
        auto& g = detail::grad_buf(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (self.parents[1]->requires_grad) {
        auto& g = detail::grad_buf(*self.parents[1]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    };
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, double s) {
  auto n = detail::make_node(a.shape(), {a.node()});
  const auto& av = a.value();
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * s;
  if (n->requires_grad)
    n->backprop = [s](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    };
  return Tensor(n);
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
  auto n = detail::make_node(a.shape(), {a.node()});
  const auto& av = a.value();
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = av[i] > 0.0 ? av[i] : slope * av[i];
  if (n->requires_grad)
    n->backprop = [slope](detail::Node& self) {
      const auto& av = self.parents[0]->value;
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * (av[i] > 0.0 ? 1.0 : slope);
    };
  return Tensor(n);
}

inline Tensor sigmoid(const Tensor& a) {
  auto n = detail::make_node(a.shape(), {a.node()});
  const auto& av = a.value();
  for (std::size_t i = 0; i < n->value.size(); ++i) {
    const double x = av[i];
    n->value[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                           : std::exp(x) / (1.0 + std::exp(x));
  }
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = self.value[i];
        g[i] += self.grad[i] * y * (1.0 - y);
      }
    };
  return Tensor(n);
}

// out = (1 - t) * a + t * b. t == 0 short-circuits to a copy of a so the
// degenerate blend is bitwise exact.
inline Tensor lerp(const Tensor& a, const Tensor& b, double t) {
  if (t == 0.0) {
    auto n = detail::make_node(a.shape(), {a.node()});
    n->value = a.value();
    if (n->requires_grad)
      n->backprop = [](detail::Node& self) {
        auto& g = detail::grad_buf(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      };
    return Tensor(n);
  }
  return add(scale(a, 1.0 - t), scale(b, t));
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (detail::numel(shape) != a.size())
    throw ShapeError("reshape: element count mismatch " +
                     detail::shape_str(a.shape()) + " -> " +
                     detail::shape_str(shape));
  auto n = detail::make_node(std::move(shape), {a.node()});
  n->value = a.value();
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  return Tensor(n);
}

// y[i] = x[perm[i]] where perm is a bijection on the flat index space.
// Covers the channel-fold / patchify family; round-trips are bitwise since
// the op is a pure copy.
inline Tensor gather_bijection(const Tensor& a,
                               std::shared_ptr<std::vector<std::size_t>> perm,
                               std::vector<int> out_shape) {
  if (perm->size() != a.size() || detail::numel(out_shape) != a.size())
    throw ShapeError("gather_bijection: index map size mismatch");
  auto n = detail::make_node(std::move(out_shape), {a.node()});
  const auto& av = a.value();
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = av[(*perm)[i]];
  if (n->requires_grad)
    n->backprop = [perm](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[(*perm)[i]] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  if (a.rank() != 2) throw ShapeError("slice_rows: rank-2 tensor required");
  const int rows = a.dim(0), cols = a.dim(1);
  if (r0 < 0 || r1 > rows || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") for " +
                     detail::shape_str(a.shape()));
  auto n = detail::make_node({r1 - r0, cols}, {a.node()});
  std::memcpy(n->value.data(), a.value().data() + std::size_t(r0) * cols,
              n->value.size() * sizeof(double));
  if (n->requires_grad)
    n->backprop = [r0, cols](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[std::size_t(r0) * cols + i] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (a.rank() != 2) throw ShapeError("slice_cols: rank-2 tensor required");
  const int rows = a.dim(0), cols = a.dim(1);
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw ShapeError("slice_cols: bad range");
  const int w = c1 - c0;
  auto n = detail::make_node({rows, w}, {a.node()});
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c)
      n->value[std::size_t(r) * w + c] = av[std::size_t(r) * cols + c0 + c];
  if (n->requires_grad)
    n->backprop = [c0, cols, w, rows](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
          g[std::size_t(r) * cols + c0 + c] +=
              self.grad[std::size_t(r) * w + c];
    };
  return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const int rows = parts[0].dim(0);
  int total = 0;
  std::vector<std::shared_ptr<detail::Node>> pn;
  std::vector<int> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    pn.push_back(p.node());
  }
  auto n = detail::make_node({rows, total}, std::move(pn));
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    const int w = widths[k];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        n->value[std::size_t(r) * total + off + c] = pv[std::size_t(r) * w + c];
    off += w;
  }
  if (n->requires_grad)
    n->backprop = [widths, rows, total](detail::Node& self) {
      int off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        const int w = widths[k];
        if (self.parents[k]->requires_grad) {
          auto& g = detail::grad_buf(*self.parents[k]);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c)
              g[std::size_t(r) * w + c] +=
                  self.grad[std::size_t(r) * total + off + c];
        }
        off += w;
      }
    };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible " + detail::shape_str(a.shape()) +
                     " x " + detail::shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
  auto n = detail::make_node({m, n2}, {a.node(), b.node()});
  detail::gemm(false, false, m, n2, k, 1.0, a.value().data(), k,
               b.value().data(), n2, 0.0, n->value.data(), n2);
  if (n->requires_grad)
    n->backprop = [m, k, n2](detail::Node& self) {
      const double* dv = self.grad.data();
      if (self.parents[0]->requires_grad)
        detail::gemm(false, true, m, k, n2, 1.0, dv, n2,
                     self.parents[1]->value.data(), n2, 1.0,
                     detail::grad_buf(*self.parents[0]).data(), k);
      if (self.parents[1]->requires_grad)
        detail::gemm(true, false, k, n2, m, 1.0,
                     self.parents[0]->value.data(), k, dv, n2, 1.0,
                     detail::grad_buf(*self.parents[1]).data(), n2);
    };
  return Tensor(n);
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: rank-2 tensor required");
  const int rows = a.dim(0), cols = a.dim(1);
  auto n = detail::make_node({cols, rows}, {a.node()});
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      n->value[std::size_t(c) * rows + r] = av[std::size_t(r) * cols + c];
  if (n->requires_grad)
    n->backprop = [rows, cols](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          g[std::size_t(r) * cols + c] += self.grad[std::size_t(c) * rows + r];
    };
  return Tensor(n);
}

// out[t] = weight . in[t] + bias
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw ShapeError("linear: rank-2 input and weight required");
  const int t = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (w.dim(1) != din)
    throw ShapeError("linear: weight in-dim " + std::to_string(w.dim(1)) +
                     " != input dim " + std::to_string(din));
  if (b.rank() != 1 || b.dim(0) != dout)
    throw ShapeError("linear: bias dim mismatch");
  auto n = detail::make_node({t, dout}, {x.node(), w.node(), b.node()});
  detail::gemm(false, true, t, dout, din, 1.0, x.value().data(), din,
               w.value().data(), din, 0.0, n->value.data(), dout);
  const auto& bv = b.value();
  for (int r = 0; r < t; ++r)
    for (int c = 0; c < dout; ++c) n->value[std::size_t(r) * dout + c] += bv[c];
  if (n->requires_grad)
    n->backprop = [t, din, dout](detail::Node& self) {
      const double* dv = self.grad.data();
      if (self.parents[0]->requires_grad)
        detail::gemm(false, false, t, din, dout, 1.0, dv, dout,
                     self.parents[1]->value.data(), din, 1.0,
                     detail::grad_buf(*self.parents[0]).data(), din);
      if (self.parents[1]->requires_grad)
        detail::gemm(true, false, dout, din, t, 1.0, dv, dout,
                     self.parents[0]->value.data(), din, 1.0,
                     detail::grad_buf(*self.parents[1]).data(), din);
      if (self.parents[2]->requires_grad) {
        auto& g = detail::grad_buf(*self.parents[2]);
        for (int r = 0; r < t; ++r)
          for (int c = 0; c < dout; ++c) g[c] += dv[std::size_t(r) * dout + c];
      }
    };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

// image (C,H,W) -> cols (C*kh*kw, oh*ow); out-of-bounds taps read 0.
inline void im2col(const double* img, int c, int h, int w, int kh, int kw,
                   int stride, int pad, int oh, int ow, double* cols) {
  for (int ch = 0; ch < c; ++ch)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        double* row =
            cols + (std::size_t(ch) * kh * kw + std::size_t(u) * kw + v) *
                       (std::size_t(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + u - pad;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + v - pad;
            row[std::size_t(oy) * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? img[(std::size_t(ch) * h + iy) * w + ix]
                    : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatter-add cols back into the image.
inline void col2im(const double* cols, int c, int h, int w, int kh, int kw,
                   int stride, int pad, int oh, int ow, double* img) {
  for (int ch = 0; ch < c; ++ch)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        const double* row =
            cols + (std::size_t(ch) * kh * kw + std::size_t(u) * kw + v) *
                       (std::size_t(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix < 0 || ix >= w) continue;
            img[(std::size_t(ch) * h + iy) * w + ix] +=
                row[std::size_t(oy) * ow + ox];
          }
        }
      }
}

}  // namespace detail

// input (N,I,H,W), weight (O,I,kh,kw), optional bias (O).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: input and weight must be rank 4");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
  const int batch = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ic)
    throw ShapeError("conv2d: input channels " + std::to_string(ic) +
                     " != weight in-channels " + std::to_string(w.dim(1)));
  if (kh > h + 2 * pad || kw > wd + 2 * pad)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " exceeds padded input " +
                     detail::shape_str(x.shape()));
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != oc))
    throw ShapeError("conv2d: bias must have shape (" + std::to_string(oc) +
                     ")");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<std::shared_ptr<detail::Node>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  auto n = detail::make_node({batch, oc, oh, ow}, std::move(parents));
  const int ck = ic * kh * kw;
  const std::size_t opix = std::size_t(oh) * ow;
  std::vector<double> cols(std::size_t(ck) * opix);
  for (int img = 0; img < batch; ++img) {
    detail::im2col(x.value().data() + std::size_t(img) * ic * h * wd, ic, h,
                   wd, kh, kw, stride, pad, oh, ow, cols.data());
    double* out = n->value.data() + std::size_t(img) * oc * opix;
    detail::gemm(false, false, oc, static_cast<int>(opix), ck, 1.0,
                 w.value().data(), ck, cols.data(), static_cast<int>(opix),
                 0.0, out, static_cast<int>(opix));
    if (has_bias) {
      const auto& bv = b.value();
      for (int o = 0; o < oc; ++o)
        for (std::size_t p = 0; p < opix; ++p) out[o * opix + p] += bv[o];
    }
  }
  if (n->requires_grad)
    n->backprop = [batch, ic, h, wd, oc, kh, kw, stride, pad, oh, ow,
                   has_bias](detail::Node& self) {
      const int ck = ic * kh * kw;
      const std::size_t opix = std::size_t(oh) * ow;
      detail::Node& xn = *self.parents[0];
      detail::Node& wn = *self.parents[1];
      std::vector<double> cols(std::size_t(ck) * opix);
      std::vector<double> dcols(std::size_t(ck) * opix);
      for (int img = 0; img < batch; ++img) {
        const double* dout = self.grad.data() + std::size_t(img) * oc * opix;
        if (wn.requires_grad) {
          detail::im2col(xn.value.data() + std::size_t(img) * ic * h * wd, ic,
                         h, wd, kh, kw, stride, pad, oh, ow, cols.data());
          detail::gemm(false, true, oc, ck, static_cast<int>(opix), 1.0, dout,
                       static_cast<int>(opix), cols.data(),
                       static_cast<int>(opix), 1.0,
                       detail::grad_buf(wn).data(), ck);
        }
        if (xn.requires_grad) {
          detail::gemm(true, false, ck, static_cast<int>(opix), oc, 1.0,
                       wn.value.data(), ck, dout, static_cast<int>(opix), 0.0,
                       dcols.data(), static_cast<int>(opix));
          detail::col2im(dcols.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                         detail::grad_buf(xn).data() +
                             std::size_t(img) * ic * h * wd);
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& bg = detail::grad_buf(*self.parents[2]);
          for (int o = 0; o < oc; ++o)
            for (std::size_t p = 0; p < opix; ++p) bg[o] += dout[o * opix + p];
        }
      }
    };
  return Tensor(n);
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// Transposed convolution, the adjoint of conv2d in its input: for the same
// weight (O,I,kh,kw), conv2d maps I channels -> O channels and
// conv2d_transposed maps O channels -> I channels. Optional bias has I
// entries. Output spatial dims: (H-1)*stride - 2*pad + kh.
inline Tensor conv2d_transposed(const Tensor& x, const Tensor& w,
                                const Tensor& b, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d_transposed: input and weight must be rank 4");
  if (stride < 1 || pad < 0)
    throw ShapeError("conv2d_transposed: bad stride/pad");
  const int batch = x.dim(0), oc = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int ic = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != oc)
    throw ShapeError("conv2d_transposed: input channels " +
                     std::to_string(oc) + " != weight out-channels " +
                     std::to_string(w.dim(0)));
  const int oh = (h - 1) * stride - 2 * pad + kh;
  const int ow = (wd - 1) * stride - 2 * pad + kw;
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d_transposed: empty output for input " +
                     detail::shape_str(x.shape()));
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != ic))
    throw ShapeError("conv2d_transposed: bias must have shape (" +
                     std::to_string(ic) + ")");
  std::vector<std::shared_ptr<detail::Node>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  auto n = detail::make_node({batch, ic, oh, ow}, std::move(parents));
  const int ck = ic * kh * kw;
  const std::size_t ipix = std::size_t(h) * wd;
  std::vector<double> cols(std::size_t(ck) * ipix);
  std::fill(n->value.begin(), n->value.end(), 0.0);
  for (int img = 0; img < batch; ++img) {
    // cols = W^T * x, then scatter into the output canvas.
    detail::gemm(true, false, ck, static_cast<int>(ipix), oc, 1.0,
                 w.value().data(), ck,
                 x.value().data() + std::size_t(img) * oc * ipix,
                 static_cast<int>(ipix), 0.0, cols.data(),
                 static_cast<int>(ipix));
    double* out = n->value.data() + std::size_t(img) * ic * oh * ow;
    detail::col2im(cols.data(), ic, oh, ow, kh, kw, stride, pad, h, wd, out);
    if (has_bias) {
      const auto& bv = b.value();
      for (int o = 0; o < ic; ++o)
        for (std::size_t p = 0; p < std::size_t(oh) * ow; ++p)
          out[o * std::size_t(oh) * ow + p] += bv[o];
    }
  }
  if (n->requires_grad)
    n->backprop = [batch, oc, h, wd, ic, kh, kw, stride, pad, oh, ow,
                   has_bias](detail::Node& self) {
      const int ck = ic * kh * kw;
      const std::size_t ipix = std::size_t(h) * wd;
      detail::Node& xn = *self.parents[0];
      detail::Node& wn = *self.parents[1];
      std::vector<double> dcols(std::size_t(ck) * ipix);
      for (int img = 0; img < batch; ++img) {
        const double* dout =
            self.grad.data() + std::size_t(img) * ic * oh * ow;
        // Adjoint of col2im is im2col on the output-grad canvas.
        detail::im2col(dout, ic, oh, ow, kh, kw, stride, pad, h, wd,
                       dcols.data());
        if (xn.requires_grad)
          detail::gemm(false, false, oc, static_cast<int>(ipix), ck, 1.0,
                       wn.value.data(), ck, dcols.data(),
                       static_cast<int>(ipix), 1.0,
                       detail::grad_buf(xn).data() + std::size_t(img) * oc *
                                                         ipix,
                       static_cast<int>(ipix));
        if (wn.requires_grad)
          detail::gemm(false, true, oc, ck, static_cast<int>(ipix), 1.0,
                       xn.value.data() + std::size_t(img) * oc * ipix,
                       static_cast<int>(ipix), dcols.data(),
                       static_cast<int>(ipix), 1.0,
                       detail::grad_buf(wn).data(), ck);
        if (has_bias && self.parents[2]->requires_grad) {
          auto& bg = detail::grad_buf(*self.parents[2]);
          for (int o = 0; o < ic; ++o)
            for (std::size_t p = 0; p < std::size_t(oh) * ow; ++p)
              bg[o] += dout[o * std::size_t(oh) * ow + p];
        }
      }
    };
  return Tensor(n);
}

inline Tensor conv2d_transposed(const Tensor& x, const Tensor& w, int stride,
                                int pad) {
  return conv2d_transposed(x, w, Tensor(), stride, pad);
}

// Nearest-neighbor 2x upsampling on NCHW.
inline Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2: rank-4 required");
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto n = detail::make_node({batch, c, 2 * h, 2 * w}, {x.node()});
  const auto& xv = x.value();
  for (int i = 0; i < batch * c; ++i) {
    const double* src = xv.data() + std::size_t(i) * h * w;
    double* dst = n->value.data() + std::size_t(i) * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const double v = src[std::size_t(y) * w + xx];
        double* d = dst + (std::size_t(2 * y) * 2 * w + 2 * xx);
        d[0] = v;
        d[1] = v;
        d[2 * w] = v;
        d[2 * w + 1] = v;
      }
  }
  if (n->requires_grad)
    n->backprop = [batch, c, h, w](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (int i = 0; i < batch * c; ++i) {
        double* dst = g.data() + std::size_t(i) * h * w;
        const double* src = self.grad.data() + std::size_t(i) * 4 * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const double* s = src + (std::size_t(2 * y) * 2 * w + 2 * xx);
            dst[std::size_t(y) * w + xx] +=
                s[0] + s[1] + s[2 * w] + s[2 * w + 1];
          }
      }
    };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Per-row normalization of a (T,D) tensor followed by affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm: rank-2 input required");
  const int t = x.dim(0), d = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 ||
      beta.dim(0) != d)
    throw ShapeError("layer_norm: gamma/beta must have shape (" +
                     std::to_string(d) + ")");
  auto n = detail::make_node({t, d}, {x.node(), gamma.node(), beta.node()});
  auto xhat = std::make_shared<std::vector<double>>(std::size_t(t) * d);
  auto inv_std = std::make_shared<std::vector<double>>(t);
  const auto &xv = x.value(), &gv = gamma.value(), &bv = beta.value();
  for (int r = 0; r < t; ++r) {
    const double* row = xv.data() + std::size_t(r) * d;
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < d; ++c) {
      const double xh = (row[c] - mean) * is;
      (*xhat)[std::size_t(r) * d + c] = xh;
      n->value[std::size_t(r) * d + c] = gv[c] * xh + bv[c];
    }
  }
  if (n->requires_grad)
    n->backprop = [t, d, xhat, inv_std](detail::Node& self) {
      const auto& gv = self.parents[1]->value;
      for (int r = 0; r < t; ++r) {
        const double* dy = self.grad.data() + std::size_t(r) * d;
        const double* xh = xhat->data() + std::size_t(r) * d;
        if (self.parents[0]->requires_grad) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (int c = 0; c < d; ++c) {
            const double gg = dy[c] * gv[c];
            mean_g += gg;
            mean_gx += gg * xh[c];
          }
          mean_g /= d;
          mean_gx /= d;
          auto& gx = detail::grad_buf(*self.parents[0]);
          for (int c = 0; c < d; ++c)
            gx[std::size_t(r) * d + c] +=
                (*inv_std)[r] *
                (dy[c] * gv[c] - mean_g - xh[c] * mean_gx);
        }
        if (self.parents[1]->requires_grad) {
          auto& gg = detail::grad_buf(*self.parents[1]);
          for (int c = 0; c < d; ++c) gg[c] += dy[c] * xh[c];
        }
        if (self.parents[2]->requires_grad) {
          auto& gb = detail::grad_buf(*self.parents[2]);
          for (int c = 0; c < d; ++c) gb[c] += dy[c];
        }
      }
    };
  return Tensor(n);
}

// Softmax along `axis`, stabilized by max subtraction. The denominator uses
// the order-free accumulator, so softmax of a permuted line equals the
// permuted softmax bitwise.
inline Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  auto n = detail::make_node(shape, {x.node()});
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double m = xv[base];
      for (std::size_t i = 1; i < len; ++i)
        m = std::max(m, xv[base + i * inner]);
      detail::OrderFreeSum sum;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - m);
        n->value[base + i * inner] = e;
        sum.add(e);
      }
      const double s = sum.get();
      for (std::size_t i = 0; i < len; ++i) n->value[base + i * inner] /= s;
    }
  if (n->requires_grad)
    n->backprop = [outer, inner, len](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i)
            dot += self.grad[base + i * inner] * self.value[base + i * inner];
          for (std::size_t i = 0; i < len; ++i)
            g[base + i * inner] += self.value[base + i * inner] *
                                   (self.grad[base + i * inner] - dot);
        }
    };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  auto n = detail::make_node({1}, {a.node()});
  double s = 0.0;
  for (double v : a.value()) s += v;
  n->value[0] = s;
  if (n->requires_grad)
    n->backprop = [](detail::Node& self) {
      auto& g = detail::grad_buf(*self.parents[0]);
      for (auto& gi : g) gi += self.grad[0];
    };
  return Tensor(n);
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// Mean absolute difference over all elements; subgradient 0 at ties.
inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "l1_loss");
  auto n = detail::make_node({1}, {a.node(), b.node()});
  const auto &av = a.value(), &bv = b.value();
  const double inv = 1.0 / static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  n->value[0] = s * inv;
  if (n->requires_grad)
    n->backprop = [inv](detail::Node& self) {
      const auto &av = self.parents[0]->value, &bv = self.parents[1]->value;
      const double d = self.grad[0] * inv;
      for (int p = 0; p < 2; ++p) {
        if (!self.parents[p]->requires_grad) continue;
        auto& g = detail::grad_buf(*self.parents[p]);
        const double sgn = p == 0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double diff = av[i] - bv[i];
          g[i] += d * sgn * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
        }
      }
    };
  return Tensor(n);
}

// Weighted binary cross-entropy on logits: sum_i w_i * BCE(z_i, t_i),
// numerically stabilized. Targets and weights are plain constants.
inline Tensor bce_with_logits(const Tensor& logits,
                              std::shared_ptr<std::vector<double>> targets,
                              std::shared_ptr<std::vector<double>> weights) {
  if (targets->size() != logits.size() || weights->size() != logits.size())
    throw ShapeError("bce_with_logits: target/weight length mismatch");
  auto n = detail::make_node({1}, {logits.node()});
  const auto& zv = logits.value();
  double s = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double z = zv[i], t = (*targets)[i];
    s += (*weights)[i] *
         (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
  }
  n->value[0] = s;
  if (n->requires_grad)
    n->backprop = [targets, weights](detail::Node& self) {
      const auto& zv = self.parents[0]->value;
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < zv.size(); ++i) {
        const double z = zv[i];
        const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                    : std::exp(z) / (1.0 + std::exp(z));
        g[i] += self.grad[0] * (*weights)[i] * (sig - (*targets)[i]);
      }
    };
  return Tensor(n);
}

// Weighted smooth-L1 (Huber) against constant targets:
// sum_i w_i * (0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta).
inline Tensor smooth_l1(const Tensor& pred,
                        std::shared_ptr<std::vector<double>> targets,
                        std::shared_ptr<std::vector<double>> weights,
                        double beta) {
  if (targets->size() != pred.size() || weights->size() != pred.size())
    throw ShapeError("smooth_l1: target/weight length mismatch");
  if (beta <= 0.0) throw ShapeError("smooth_l1: beta must be positive");
  auto n = detail::make_node({1}, {pred.node()});
  const auto& pv = pred.value();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - (*targets)[i];
    const double ad = std::abs(d);
    s += (*weights)[i] *
         (ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta);
  }
  n->value[0] = s;
  if (n->requires_grad)
    n->backprop = [targets, weights, beta](detail::Node& self) {
      const auto& pv = self.parents[0]->value;
      auto& g = detail::grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = pv[i] - (*targets)[i];
        const double dd =
            std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
        g[i] += self.grad[0] * (*weights)[i] * dd;
      }
    };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Parameters and SGD
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> momentum;  // lazily sized to match tensor

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
  }
};

// Glorot-uniform init in +-sqrt(6/(fan_in+fan_out)) from the documented PRNG.
inline Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out,
                             Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(std::move(shape), 0.0);
  for (auto& v : t.value_mut()) v = rng.uniform(-a, a);
  return t;
}

// v <- momentum * v + grad; p <- p - lr * v; grads zeroed afterwards.
inline void sgd_step(const std::vector<Parameter*>& params, double lr,
                     double momentum) {
  for (Parameter* p : params) {
    if (p->tensor.grad().size() != p->tensor.size())
      throw std::runtime_error("sgd_step: parameter '" + p->name +
                               "' has no gradient");
  }
  for (Parameter* p : params) {
    auto& val = p->tensor.value_mut();
    const auto& g = p->tensor.grad();
    if (p->momentum.size() != val.size()) p->momentum.assign(val.size(), 0.0);
    for (std::size_t i = 0; i < val.size(); ++i) {
      p->momentum[i] = momentum * p->momentum[i] + g[i];
      val[i] -= lr * p->momentum[i];
    }
    p->tensor.zero_grad();
  }
}

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->tensor.zero_grad();
}

}  // namespace augdet
