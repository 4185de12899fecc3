#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "drdm/core/rng.hpp"

namespace drdm {

using Real = double;
using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// One node of the reverse-mode tape. Values and gradients are dense
/// row-major double buffers; the backward closure pulls this node's grad
/// into its parents' grads.
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backfn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Value-semantics handle to a tape node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real v, bool requires_grad = false);
  static Tensor scalar(Real v);
  static Tensor from_data(Shape shape, std::vector<Real> data,
                          bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, Real stddev = 1.0,
                      Real mean = 0.0, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::int64_t numel() const { return node_->numel(); }

  std::vector<Real>& data() { return node_->value; }
  const std::vector<Real>& data() const { return node_->value; }
  Real item() const;
  /// Row-major element access, mainly for tests and glue code.
  Real at(std::initializer_list<std::int64_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  const std::vector<Real>& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), 0.0);
  }

  /// Reverse pass from a scalar root (seeds d(root)/d(root) = 1).
  void backward() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---- elementwise binary (numpy-style right-aligned broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

// ---- scalar forms ----
Tensor add_scalar(const Tensor& a, Real s);
Tensor mul_scalar(const Tensor& a, Real s);
Tensor neg(const Tensor& a);

// ---- unary ----
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp_min(const Tensor& a, Real lo);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim);
/// Smallest entry along the rows of a 2-D tensor (used for min-over-classes).
Tensor min_rows(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
/// Pick arbitrary flat indices; result is 1-D. Backward scatter-adds.
Tensor gather_flat(const Tensor& a, std::vector<std::int64_t> indices);
Tensor stack_rows(const std::vector<Tensor>& rows);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // (n,k) x (k,m)

// ---- structured ops ----
/// Row-wise softmax of a 2-D tensor, numerically shifted.
Tensor softmax_rows(const Tensor& a);
/// log(1 + sum_i exp(v_i)) of a 1-D tensor, computed with an exponent shift
/// so large positive entries cannot overflow.
Tensor log1p_sum_exp(const Tensor& v);

// ---- conv / pooling (NCHW) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
Tensor avg_pool2d(const Tensor& x, int k);
Tensor global_avg_pool(const Tensor& x);  // (B,C,H,W) -> (B,C)
Tensor upsample_nearest2x(const Tensor& x);

// ---- composites ----
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor l2_normalize_rows(const Tensor& x, Real eps = 1e-12);
/// softmax(Q K^T / sqrt(d_k)) V for 2-D Q (n,dk), K (m,dk), V (m,dv).
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace drdm
