#ifndef CTS_AUTOGRAD_HPP_
#define CTS_AUTOGRAD_HPP_

// Tape-free reverse-mode differentiation over Tensor values.
//
// Every primitive returns a Var whose node remembers its parents and a
// backward rule. Backward rules are themselves written in terms of Var
// primitives, so running backward with create_graph=true yields gradients
// that are differentiable nodes (double backward). With create_graph=false
// the same rules run with recording disabled and cost only the tensor math.
//
// relu'(0) is defined as 0.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cts/tensor.hpp"

namespace cts::ad {

class Var;

// Parent gradients for one node; entries for parents whose `needs` flag is
// false may be left undefined.
using BackwardFn =
    std::function<std::vector<Var>(const Var& out, const Var& grad_out, const std::vector<bool>& needs)>;

struct Node {
  Tensor value;
  std::vector<Var> parents;
  BackwardFn backward;
  const char* op = "leaf";
  bool requires_grad = false;
  std::uint64_t seq = 0;
};

class Var {
 public:
  Var() = default;

  // A value that never receives gradients.
  static Var constant(Tensor value);
  // A differentiable input.
  static Var leaf(Tensor value, bool requires_grad = true);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  const Node* node() const { return node_.get(); }

  // Builds a recorded node. Records parents only when grad mode is on and at
  // least one parent requires grad.
  static Var make(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of scalar `root` with respect to each of `wrt`. Every `wrt` must
// be tracked (requires_grad). Inputs unreachable from root get zeros.
std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph = false);
std::vector<Tensor> grad_values(const Var& root, std::span<const Var> wrt);

// ---- primitives -----------------------------------------------------------

// Elementwise with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var square(const Var& x);
Var abs(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
// x^p for constant p.
Var pow(const Var& x, double p);

Var reshape(const Var& x, Shape shape);
Var broadcast_to(const Var& x, const Shape& shape);
// Sums broadcast axes away so the result has `shape` (inverse of broadcast_to).
Var sum_to(const Var& x, const Shape& shape);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_axes(const Var& x, const std::vector<int>& axes, bool keepdim);
Var mean_axes(const Var& x, const std::vector<int>& axes, bool keepdim);

// 2-D only.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);

// Softmax family over the last axis.
Var softmax(const Var& x);
Var log_softmax(const Var& x);

// Rank-1 slicing and its adjoint.
Var slice(const Var& x, std::int64_t offset, std::int64_t length);
Var embed(const Var& x, std::int64_t offset, std::int64_t total);

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
};

// x: [N,C,H,W], w: [O,C,KH,KW] -> [N,O,HO,WO]
Var conv2d(const Var& x, const Var& w, Conv2dGeometry geom);
Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, Conv2dGeometry geom);
Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, Conv2dGeometry geom);

// Non-overlapping k x k average pooling on [N,C,H,W]; H and W divisible by k.
Var avg_pool2d(const Var& x, int k);
// Adjoint of avg_pool2d: each output cell spreads grad/k^2 over its window.
Var avg_unpool2d(const Var& x, int k);

// ---- composites -----------------------------------------------------------

Var l2_norm(const Var& x);
Var mse(const Var& a, const Var& b);
// Mean cross-entropy of [N,K] logits against integer labels.
Var cross_entropy(const Var& logits, std::span<const std::int32_t> labels);

// ---- finite differences ---------------------------------------------------

using ScalarFn = std::function<double(const Tensor&)>;

// Central difference (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h);
// Same, restricted to `indices`; other entries are zero.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h,
                        std::span<const std::size_t> indices);

}  // namespace cts::ad

#endif  // CTS_AUTOGRAD_HPP_
