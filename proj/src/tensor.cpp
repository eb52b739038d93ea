// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "imagechat/errors.hpp"

namespace imagechat {

namespace {

thread_local Precision g_precision = Precision::f32;
thread_local bool g_recording = true;

void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

void round_in_place(std::vector<double>& v) {
  if (g_precision != Precision::f32) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

// Builds an op output. Parents are linked (and the closure kept) only when
// recording is on and some parent needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<NodePtr> parents, BackwardFn fn) {
  round_in_place(data);
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (g_recording) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

std::size_t rows_of(const Shape& s) {
  if (s.empty()) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_2d(const Tensor& t, const char* op) {
  require(t.defined() && t.dim() == 2,
          std::string(op) + ": expected a 2-d tensor, got " +
              (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
              " vs " + shape_string(b.shape()));
}

}  // namespace

Precision current_precision() { return g_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) {
  g_precision = p;
}
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

NoGradGuard::NoGradGuard() : saved_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = saved_; }

bool grad_recording_enabled() { return g_recording; }

double round_to_precision(double v) {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v))
                                       : v;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

double* Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), value);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) require(d > 0, "tensor extents must be positive");
  require(shape_numel(shape) == values.size(),
          "tensor data length " + std::to_string(values.size()) +
              " does not match shape " + shape_string(shape));
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite tensor value");
  }
  round_in_place(values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return from(std::move(s), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  std::vector<double> v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    require(r.size() == cols, "ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return from({rows.size(), cols}, std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require(defined(), "undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  require(axis < dim(), "axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require(defined(), "undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require(defined(), "undefined tensor");
  require(node_->parents.empty(), "mutable_data on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  require(numel() == 1, "item() on a tensor with " + std::to_string(numel()) +
                            " elements");
  return node_->data[0];
}

double Tensor::at(std::size_t i) const {
  require(i < numel(), "index out of range");
  return node_->data[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require(dim() == 2 && r < size(0) && c < size(1), "index out of range");
  return node_->data[r * size(1) + c];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require(defined(), "undefined tensor");
  require(node_->parents.empty(), "set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  require(defined(), "undefined tensor");
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(std::move(node));
}

// -------------------------------------------------------------- backward

void backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1 && loss.dim() == 0,
          "backward: loss must be a scalar, got shape " +
              (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    if (!n->grad.empty()) {
      round_in_place(n->grad);
      n->backward_fn(*n);
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      // Intermediate node: release graph and its gradient.
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    } else {
      round_in_place(n->grad);
    }
  }
}

// ------------------------------------------------------------------- ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  require(b.size(0) == k, "matmul: inner dimensions differ " +
                              shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* br = B + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                     [m, k, n](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       const double* g = self.grad.data();
                       if (pa.requires_grad) {
                         double* ga = pa.grad_buffer();
                         const double* B = pb.data.data();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j)
                               s += g[i * n + j] * B[p * n + j];
                             ga[i * k + p] += s;
                           }
                       }
                       if (pb.requires_grad) {
                         double* gb = pb.grad_buffer();
                         const double* A = pa.data.data();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double av = A[i * k + p];
                             if (av == 0.0) continue;
                             for (std::size_t j = 0; j < n; ++j)
                               gb[p * n + j] += av * g[i * n + j];
                           }
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(0);
  require(b.size(1) == k, "matmul_nt: inner dimensions differ " +
                              shape_string(a.shape()) + " x " +
                              shape_string(b.shape()) + "^T");
  std::vector<double> out(m * n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  return make_result("matmul_nt", {m, n}, std::move(out), {a.node(), b.node()},
                     [m, k, n](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       const double* g = self.grad.data();
                       if (pa.requires_grad) {
                         double* ga = pa.grad_buffer();
                         const double* B = pb.data.data();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) {
                             const double gv = g[i * n + j];
                             if (gv == 0.0) continue;
                             for (std::size_t p = 0; p < k; ++p)
                               ga[i * k + p] += gv * B[j * k + p];
                           }
                       }
                       if (pb.requires_grad) {
                         double* gb = pb.grad_buffer();
                         const double* A = pa.data.data();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) {
                             const double gv = g[i * n + j];
                             if (gv == 0.0) continue;
                             for (std::size_t p = 0; p < k; ++p)
                               gb[j * k + p] += gv * A[i * k + p];
                           }
                       }
                     });
}

namespace {

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b,
                          double sign_b, bool product) {
  require_same_shape(a, b, op);
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i)
    out[i] = product ? A[i] * B[i] : A[i] + sign_b * B[i];
  return make_result(op, a.shape(), std::move(out), {a.node(), b.node()},
                     [sign_b, product](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       const std::size_t n = self.grad.size();
                       if (pa.requires_grad) {
                         double* ga = pa.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i] += product ? self.grad[i] * pb.data[i] : self.grad[i];
                       }
                       if (pb.requires_grad) {
                         double* gb = pb.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i] += product ? self.grad[i] * pa.data[i]
                                            : sign_b * self.grad[i];
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary("add", a, b, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary("sub", a, b, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary("mul", a, b, 0.0, true);
}

Tensor scale(const Tensor& x, double factor) {
  require(x.defined(), "scale: undefined tensor");
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x.node()},
                     [factor](Node& self) {
                       Node& px = parent(self, 0);
                       double* gx = px.grad_buffer();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[i] += factor * self.grad[i];
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(x.defined() && bias.defined() && bias.dim() == 1 && x.dim() >= 1 &&
              last_dim(x.shape()) == bias.size(0),
          "add_bias: bias " + shape_string(bias.shape()) + " does not match " +
              shape_string(x.shape()));
  const std::size_t n = bias.size(0), rows = rows_of(x.shape());
  auto X = x.data();
  auto Bv = bias.data();
  std::vector<double> out(X.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = X[r * n + j] + Bv[j];
  return make_result("add_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                     [n, rows](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pb = parent(self, 1);
                       if (px.requires_grad) {
                         double* gx = px.grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           gx[i] += self.grad[i];
                       }
                       if (pb.requires_grad) {
                         double* gb = pb.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j)
                             gb[j] += self.grad[r * n + j];
                       }
                     });
}

Tensor relu(const Tensor& x) {
  require(x.defined(), "relu: undefined tensor");
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    Node& px = parent(self, 0);
    double* gx = px.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (px.data[i] > 0.0) gx[i] += self.grad[i];
  });
}

namespace {

// Shared by softmax and masked softmax: dx = y * (g - sum(g*y)).
void softmax_backward(Node& self, std::size_t rows, std::size_t n) {
  Node& px = parent(self, 0);
  double* gx = px.grad_buffer();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = self.data.data() + r * n;
    const double* g = self.grad.data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += g[j] * y[j];
    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - s);
  }
}

Tensor softmax_impl(const char* op, const Tensor& x, const Mask* mask) {
  require(x.defined() && x.dim() >= 1, std::string(op) + ": needs at least 1 axis");
  const std::size_t n = last_dim(x.shape()), rows = rows_of(x.shape());
  if (mask) {
    require(mask->size() == x.numel(), std::string(op) + ": mask size mismatch");
  }
  auto X = x.data();
  std::vector<double> out(X.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[r * n + j]) continue;
      mx = std::max(mx, xr[j]);
      any = true;
    }
    require(any, std::string(op) + ": row " + std::to_string(r) +
                     " has no active entries");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[r * n + j]) continue;
      out[r * n + j] = std::exp(xr[j] - mx);
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  return make_result(op, x.shape(), std::move(out), {x.node()},
                     [rows, n](Node& self) { softmax_backward(self, rows, n); });
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
  return softmax_impl("softmax_lastdim", x, nullptr);
}

Tensor masked_softmax_lastdim(const Tensor& x, const Mask& mask) {
  return softmax_impl("masked_softmax_lastdim", x, &mask);
}

Tensor log_softmax_lastdim(const Tensor& x) {
  require(x.defined() && x.dim() >= 1, "log_softmax_lastdim: needs at least 1 axis");
  const std::size_t n = last_dim(x.shape()), rows = rows_of(x.shape());
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] - lse;
  }
  return make_result("log_softmax_lastdim", x.shape(), std::move(out), {x.node()},
                     [rows, n](Node& self) {
                       Node& px = parent(self, 0);
                       double* gx = px.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * n;
                         double s = 0.0;
                         for (std::size_t j = 0; j < n; ++j) s += g[j];
                         for (std::size_t j = 0; j < n; ++j)
                           gx[r * n + j] += g[j] - std::exp(self.data[r * n + j]) * s;
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require(x.defined() && x.dim() >= 1, "layer_norm: needs at least 1 axis");
  const std::size_t n = last_dim(x.shape()), rows = rows_of(x.shape());
  require(gamma.defined() && beta.defined() && gamma.shape() == Shape{n} &&
              beta.shape() == Shape{n},
          "layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  auto X = x.data();
  auto G = gamma.data();
  auto Bv = beta.data();
  std::vector<double> out(X.size()), xhat(X.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * G[j] + Bv[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        const double* g = self.grad.data();
        if (pg.requires_grad) {
          double* gg = pg.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (pb.requires_grad) {
          double* gb = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (px.requires_grad) {
          double* gx = px.grad_buffer();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[r * n + j] * pg.data[j];
              m1 += gh;
              m2 += gh * xhat[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[r * n + j] * pg.data[j];
              gx[r * n + j] += rstd[r] * (gh - m1 - xhat[r * n + j] * m2);
            }
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding_lookup");
  require(!ids.empty(), "embedding_lookup: empty id list");
  const std::size_t vocab = table.size(0), h = table.size(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("embedding_lookup: id " + std::to_string(id) +
                            " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  auto T = table.data();
  std::vector<double> out(ids.size() * h);
  for (std::size_t l = 0; l < ids.size(); ++l)
    std::copy_n(T.data() + static_cast<std::size_t>(ids[l]) * h, h, out.data() + l * h);
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result("embedding_lookup", {ids.size(), h}, std::move(out),
                     {table.node()}, [h, idv = std::move(idv)](Node& self) {
                       double* gt = parent(self, 0).grad_buffer();
                       for (std::size_t l = 0; l < idv.size(); ++l)
                         for (std::size_t j = 0; j < h; ++j)
                           gt[static_cast<std::size_t>(idv[l]) * h + j] +=
                               self.grad[l * h + j];
                     });
}

Tensor masked_mean_pool(const Tensor& x, const Mask& mask) {
  require_2d(x, "masked_mean_pool");
  const std::size_t len = x.size(0), h = x.size(1);
  require(mask.size() == len, "masked_mean_pool: mask length " +
                                  std::to_string(mask.size()) + " vs " +
                                  std::to_string(len) + " positions");
  std::size_t active = 0;
  for (auto m : mask) active += m ? 1 : 0;
  if (active == 0) {
    throw ContractError("masked_mean_pool: every position is masked");
  }
  auto X = x.data();
  std::vector<double> out(h, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    if (!mask[l]) continue;
    for (std::size_t j = 0; j < h; ++j) out[j] += X[l * h + j];
  }
  const double inv = 1.0 / static_cast<double>(active);
  for (double& v : out) v *= inv;
  return make_result("masked_mean_pool", {h}, std::move(out), {x.node()},
                     [len, h, inv, mask](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       for (std::size_t l = 0; l < len; ++l) {
                         if (!mask[l]) continue;
                         for (std::size_t j = 0; j < h; ++j)
                           gx[l * h + j] += self.grad[j] * inv;
                       }
                     });
}

Tensor concat_lastdim(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_lastdim: no inputs");
  const Shape& first = parts[0].shape();
  require(!first.empty(), "concat_lastdim: scalar input");
  const std::size_t rows = rows_of(first);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == first.size() &&
                std::equal(s.begin(), s.end() - 1, first.begin()),
            "concat_lastdim: leading dimensions differ");
    widths.push_back(s.back());
    total += s.back();
  }
  std::vector<double> out(rows * total);
  std::vector<NodePtr> nodes;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto D = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(D.data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
    nodes.push_back(parts[k].node());
  }
  Shape shape = first;
  shape.back() = total;
  return make_result("concat_lastdim", std::move(shape), std::move(out),
                     std::move(nodes), [rows, total, widths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         Node& p = parent(self, k);
                         if (p.requires_grad) {
                           double* g = p.grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[r * widths[k] + j] += self.grad[r * total + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = last_dim(parts[0].shape());
  std::size_t total_rows = 0;
  std::vector<NodePtr> nodes;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.dim() == 1 || p.dim() == 2, "concat_rows: expects 1-d or 2-d pieces");
    require(last_dim(p.shape()) == n, "concat_rows: width mismatch " +
                                          shape_string(p.shape()) + " vs width " +
                                          std::to_string(n));
    total_rows += rows_of(p.shape());
    auto D = p.data();
    out.insert(out.end(), D.begin(), D.end());
    nodes.push_back(p.node());
  }
  return make_result("concat_rows", {total_rows, n}, std::move(out), std::move(nodes),
                     [](Node& self) {
                       std::size_t off = 0;
                       for (auto& pp : self.parents) {
                         const std::size_t cnt = pp->data.size();
                         if (pp->requires_grad) {
                           double* g = pp->grad_buffer();
                           for (std::size_t i = 0; i < cnt; ++i) g[i] += self.grad[off + i];
                         }
                         off += cnt;
                       }
                     });
}

Tensor gather_columns(const Tensor& x,
                      const std::vector<std::vector<std::size_t>>& indices) {
  require_2d(x, "gather_columns");
  const std::size_t rows = x.size(0), n = x.size(1);
  require(indices.size() == rows, "gather_columns: one index list per row required");
  const std::size_t k = rows ? indices[0].size() : 0;
  require(k > 0, "gather_columns: empty selection");
  auto X = x.data();
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    require(indices[r].size() == k, "gather_columns: ragged selection");
    for (std::size_t j = 0; j < k; ++j) {
      require(indices[r][j] < n, "gather_columns: column out of range");
      out[r * k + j] = X[r * n + indices[r][j]];
    }
  }
  return make_result("gather_columns", {rows, k}, std::move(out), {x.node()},
                     [rows, n, k, indices](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < k; ++j)
                           gx[r * n + indices[r][j]] += self.grad[r * k + j];
                     });
}

Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t length) {
  require(x.defined() && x.dim() >= 1, "slice_lastdim: needs at least 1 axis");
  const std::size_t n = last_dim(x.shape()), rows = rows_of(x.shape());
  require(length > 0 && begin + length <= n, "slice_lastdim: range out of bounds");
  auto X = x.data();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(X.data() + r * n + begin, length, out.data() + r * length);
  Shape shape = x.shape();
  shape.back() = length;
  return make_result("slice_lastdim", std::move(shape), std::move(out), {x.node()},
                     [rows, n, begin, length](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < length; ++j)
                           gx[r * n + begin + j] += self.grad[r * length + j];
                     });
}

Tensor row(const Tensor& x, std::size_t index) {
  require_2d(x, "row");
  require(index < x.size(0), "row: index out of range");
  const std::size_t n = x.size(1);
  auto X = x.data();
  std::vector<double> out(X.begin() + static_cast<std::ptrdiff_t>(index * n),
                          X.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return make_result("row", {n}, std::move(out), {x.node()}, [index, n](Node& self) {
    double* gx = parent(self, 0).grad_buffer();
    for (std::size_t j = 0; j < n; ++j) gx[index * n + j] += self.grad[j];
  });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t m = x.size(0), n = x.size(1);
  auto X = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = X[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {x.node()},
                     [m, n](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           gx[i * n + j] += self.grad[j * m + i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(x.defined() && shape_numel(shape) == x.numel(),
          "reshape: element count mismatch");
  return make_result("reshape", std::move(shape), x.to_vector(), {x.node()},
                     [](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[i] += self.grad[i];
                     });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined() && a.dim() == 1 && b.dim() == 1 &&
              a.size(0) == b.size(0),
          "dot: expects equal-length vectors, got " + shape_string(a.shape()) +
              " and " + shape_string(b.shape()));
  auto A = a.data();
  auto B = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
  return make_result("dot", {}, {s}, {a.node(), b.node()}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const double g = self.grad[0];
    if (pa.requires_grad) {
      double* ga = pa.grad_buffer();
      for (std::size_t i = 0; i < pa.data.size(); ++i) ga[i] += g * pb.data[i];
    }
    if (pb.requires_grad) {
      double* gb = pb.grad_buffer();
      for (std::size_t i = 0; i < pb.data.size(); ++i) gb[i] += g * pa.data[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  require(x.defined(), "sum: undefined tensor");
  auto X = x.data();
  const double s = std::accumulate(X.begin(), X.end(), 0.0);
  return make_result("sum", {}, {s}, {x.node()}, [](Node& self) {
    Node& px = parent(self, 0);
    double* gx = px.grad_buffer();
    for (std::size_t i = 0; i < px.data.size(); ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.defined(), "mean: undefined tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t rows = logits.size(0), n = logits.size(1);
  require(targets.size() == rows, "cross_entropy: one target per row required");
  auto X = logits.data();
  std::vector<double> probs(rows * n);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    require(t >= 0 && static_cast<std::size_t>(t) < n,
            "cross_entropy: target out of range");
    const double* xr = X.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[r * n + j] = std::exp(xr[j] - mx);
      z += probs[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= z;
    loss += -(xr[t] - mx - std::log(z));
  }
  loss /= static_cast<double>(rows);
  std::vector<int> tv(targets.begin(), targets.end());
  return make_result("cross_entropy", {}, {loss}, {logits.node()},
                     [rows, n, probs = std::move(probs), tv = std::move(tv)](Node& self) {
                       double* gx = parent(self, 0).grad_buffer();
                       const double g = self.grad[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) {
                           const double onehot =
                               static_cast<int>(j) == tv[r] ? 1.0 : 0.0;
                           gx[r * n + j] += g * (probs[r * n + j] - onehot);
                         }
                     });
}

// --------------------------------------------------------------- dispatch

namespace {

std::vector<int> as_ids(const Tensor& t) {
  std::vector<int> ids;
  for (double v : t.data()) {
    require(v == std::floor(v), "integer-valued tensor expected");
    ids.push_back(static_cast<int>(v));
  }
  return ids;
}

Mask as_mask(const Tensor& t) {
  Mask m;
  for (double v : t.data()) m.push_back(v != 0.0 ? 1 : 0);
  return m;
}

void require_arity(std::span<const Tensor> in, std::size_t n, const char* op) {
  require(in.size() == n, std::string(op) + ": expects " + std::to_string(n) +
                              " inputs, got " + std::to_string(in.size()));
}

}  // namespace

Tensor apply(OpKind kind, std::span<const Tensor> in) {
  switch (kind) {
    case OpKind::matmul:
      require_arity(in, 2, "matmul");
      return matmul(in[0], in[1]);
    case OpKind::add:
      require_arity(in, 2, "add");
      return add(in[0], in[1]);
    case OpKind::scale:
      require_arity(in, 2, "scale");
      return scale(in[0], in[1].item());
    case OpKind::relu:
      require_arity(in, 1, "relu");
      return relu(in[0]);
    case OpKind::softmax_lastdim:
      require_arity(in, 1, "softmax_lastdim");
      return softmax_lastdim(in[0]);
    case OpKind::layer_norm:
      require_arity(in, 3, "layer_norm");
      return layer_norm(in[0], in[1], in[2]);
    case OpKind::embedding_lookup: {
      require_arity(in, 2, "embedding_lookup");
      const auto ids = as_ids(in[1]);
      return embedding_lookup(in[0], ids);
    }
    case OpKind::masked_mean_pool:
      require_arity(in, 2, "masked_mean_pool");
      return masked_mean_pool(in[0], as_mask(in[1]));
    case OpKind::concat_lastdim:
      return concat_lastdim(in);
    case OpKind::dot:
      require_arity(in, 2, "dot");
      return dot(in[0], in[1]);
  }
  throw ContractError("apply: unknown op kind");
}

}  // namespace imagechat
