// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiable tensors.
//
// A Tensor is a shared handle onto a graph node. Every op that receives at
// least one input requiring a gradient (while recording is enabled) links its
// output to its inputs together with a closure that propagates the output
// gradient back. `backward()` walks that graph once in reverse topological
// order and then releases it.
//
// Values are held in double storage. Under Precision::f32 (the default) each
// op output and each propagated gradient is rounded to the nearest float, so
// training numerics match 32-bit storage with wide accumulation inside ops.
// Precision::f64 keeps full double precision and is used by gradient checks.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace imagechat {

using Shape = std::vector<std::size_t>;

enum class Precision { f32, f64 };

// Thread-local numeric width for newly computed values.
Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

bool grad_recording_enabled();

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Rounds to the active precision.
double round_to_precision(double v);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  double* grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only legal on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Zeros when no gradient has been accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  // Same values, no graph history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
// gradient, then consumes the graph. `loss` must be a scalar.
void backward(const Tensor& loss);

enum class OpKind {
  matmul,
  add,
  scale,
  relu,
  softmax_lastdim,
  layer_norm,
  embedding_lookup,
  masked_mean_pool,
  concat_lastdim,
  dot,
};

// Generic dispatcher over the core primitive set. Integer arguments (token
// ids, masks, scale factors) are passed as tensors holding integral values.
//   matmul(a, b) add(a, b) scale(x, s) relu(x) softmax_lastdim(x)
//   layer_norm(x, gamma, beta) embedding_lookup(table, ids)
//   masked_mean_pool(x, mask) concat_lastdim(x...) dot(a, b)
Tensor apply(OpKind kind, std::span<const Tensor> inputs);

using Mask = std::vector<std::uint8_t>;

// 2-d [m,k] x [k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m,k] x [n,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x [..., n] + bias [n], broadcast over leading rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
// Entries with mask == 0 get probability exactly 0; every row needs at least
// one active entry. mask has x.numel() entries.
Tensor masked_softmax_lastdim(const Tensor& x, const Mask& mask);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// table [V,H], ids in [0,V) -> [L,H]
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// x [L,H], mask [L] -> [H]
Tensor masked_mean_pool(const Tensor& x, const Mask& mask);
Tensor concat_lastdim(std::span<const Tensor> parts);
// Stacks 1-d [n] or 2-d [r,n] pieces along the leading axis.
Tensor concat_rows(std::span<const Tensor> parts);
// out[r][j] = x[r][indices[r][j]]; every row selects the same count.
Tensor gather_columns(const Tensor& x, const std::vector<std::vector<std::size_t>>& indices);
Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t length);
Tensor row(const Tensor& x, std::size_t index);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over rows of -log softmax(logits[i])[targets[i]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace imagechat
