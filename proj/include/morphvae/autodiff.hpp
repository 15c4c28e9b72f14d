#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "morphvae/tensor.hpp"

namespace morphvae {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Tensor<T>& grad() const { return graph->grad(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Tape of computation nodes. Nodes are appended in evaluation order, so the
/// tape is a topological order of an acyclic graph and backward() is a
/// single reverse sweep.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives an adjoint.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose adjoint is accumulated by backward().
  Var<T> leaf(Tensor<T> value);

  /// Reverse sweep from a scalar root. Adjoints accumulate; call
  /// zero_grad() between independent passes.
  void backward(Var<T> root);
  void zero_grad();

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  /// Adjoint of v; zeros of v's shape when nothing flowed into it.
  const Tensor<T>& grad(Var<T> v);
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op(Var<T> v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// With recording off, ops compute values only and build no adjoint
  /// closures (inference mode).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  // Op-author interface.
  Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& grad_at(std::size_t id) const { return nodes_[id].grad; }
  /// Adjoint buffer of node id, zero-allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

// Elementwise binary ops broadcast over singleton dimensions of equal-rank
// operands; any other shape disagreement is a ShapeError.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);

/// x: (N, C, H, W), w: (O, C, KH, KW) -> (N, O, OH, OW)
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t padding);
/// Adjoint of conv2d with respect to its input. y: (N, O, OH, OW),
/// w: (O, C, KH, KW) -> (N, C, out_h, out_w), where conv2d of an
/// (out_h, out_w) image yields (OH, OW).
template <typename T>
Var<T> conv2d_transpose(Var<T> y, Var<T> w, std::size_t stride, std::size_t padding, std::size_t out_h,
                        std::size_t out_w);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> tanh(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
/// log(1 + exp(x)), stable for large |x|.
template <typename T> Var<T> softplus(Var<T> x);
/// Gradient passes where lo <= x <= hi, zero outside.
template <typename T> Var<T> clamp(Var<T> x, T lo, T hi);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_scalar(Var<T> x, T offset);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> sum(Var<T> x, std::vector<std::size_t> axes, bool keepdims = false);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> mean(Var<T> x, std::vector<std::size_t> axes, bool keepdims = false);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  std::vector<Var<T>> v(parts);
  return concat<T>(std::span<const Var<T>>(v), axis);
}
template <typename T> Var<T> slice(Var<T> x, std::size_t axis, std::size_t start, std::size_t length);

/// Blocks gradient flow: same value, no adjoint to x.
template <typename T> Var<T> detach(Var<T> x);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator-(Var<T> a) { return scale(a, T(-1)); }

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
/// with central differences of the given step.
template <typename T>
T gradient_check(const std::function<Var<T>(Graph<T>&, Var<T>)>& f, const Tensor<T>& x, T step);

}  // namespace morphvae
