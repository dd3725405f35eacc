#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clipvs/datamodel.hpp"
#include "clipvs/tensor.hpp"

// Minimal tape-free reverse-mode differentiation. Every op returns a Var
// whose node keeps its inputs alive and knows how to push its gradient back.
namespace clipvs::nn {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers and checkpoint loading. Not tracked.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool defined() const { return static_cast<bool>(node_); }

  /// Seeds d(self)/d(self)=1 and propagates to every reachable leaf. Scalar only.
  void backward() const;
  void zero_grad() const { node_->grad = Tensor(); }
  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

/// While alive on this thread, ops build no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Builds an op node. `backward` receives the node (its grad is the upstream gradient).
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var add_n(std::span<const Var> terms);

// Shape manipulation.
Var reshape(const Var& a, Shape shape);
Var concat_rows(std::span<const Var> parts);
Var select_rows(const Var& a, std::span<const int> rows);

// Dense algebra on [N, K] matrices.
Var matmul(const Var& a, const Var& b);      // [N,K] x [K,M]
Var matmul_nt(const Var& a, const Var& b);   // [N,K] x [M,K]^T
Var linear(const Var& x, const Var& weight, const Var& bias);  // weight [I,O], bias [O]
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
Var row_norms(const Var& a);                 // [N,K] -> [N]
Var mean_rows(const Var& a);                 // [N,K] -> [1,K]
/// y = x * w[0] + b[0] with scalar learnable w, b.
Var scalar_affine(const Var& x, const Var& w, const Var& b);

// Feature maps, NHWC.
/// weight [k*k*C, O] ordered (ky, kx, c); bias [O]; zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad);
Var global_avg_pool(const Var& x);           // [N,H,W,C] -> [N,C]
/// Bilinear region pooling with half-pixel alignment. Gradient flows to `features` only.
Var roi_align(const Var& features, std::span<const Box> boxes, double spatial_scale, int out_h,
              int out_w, int sampling_ratio = 2);

/// Wraps a scalar computed outside the graph with known partial derivatives.
Var scalar_with_grads(double value, std::vector<Var> inputs, std::vector<Tensor> grads);

}  // namespace clipvs::nn
