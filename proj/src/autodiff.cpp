#include "morphvae/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace morphvae {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b)) {}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) throw NumericalFault("constant: non-finite input");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value) {
  if (!value.all_finite()) throw NumericalFault("leaf: non-finite input");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericalFault(std::string(op) + ": non-finite output of shape " + to_string(value.shape()));
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  if (recording_) {
    for (std::size_t i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
  }
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape(), T(0));
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var<T> v) {
  return grad_buffer(v.id);
}

template <typename T>
void Graph<T>::zero_grad() {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (root.graph != this) throw ContractError("backward: root belongs to another graph");
  const Node& r = nodes_.at(root.id);
  if (!r.value.is_scalar()) {
    throw ContractError("backward: root must be scalar, got shape " + to_string(r.value.shape()));
  }
  grad_buffer(root.id)[0] += T(1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, i);
  }
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Broadcast machinery
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t d = s.size(); d-- > 0;) {
    st[d] = acc;
    acc *= s[d];
  }
  return st;
}

// Strides of `in` viewed in `out` coordinates: 0 where `in` is singleton.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto st = strides_of(in);
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (in[d] == 1 && out[d] != 1) st[d] = 0;
  }
  return st;
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw ShapeError(op, a, b);
  Shape out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ShapeError(op, a, b);
    }
  }
  return out;
}

// Calls f(i_out, i_a, i_b) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t n = numel(out);
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op. fwd(a, b) -> y; da(a, b, g), db(a, b, g) -> adjoints.
template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(const char* op, Var<T> a, Var<T> b, Fwd fwd, Da da, Db db) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape out_shape = broadcast_shape(op, av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  const bool same = av.shape() == bv.shape();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    auto sa = broadcast_strides(av.shape(), out_shape);
    auto sb = broadcast_strides(bv.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      out[i] = fwd(av[ia], bv[ib]);
    });
  }
  const std::size_t ida = a.id, idb = b.id;
  return g.record(op, std::move(out), {ida, idb}, [ida, idb, same, da, db](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    const Tensor<T>& x = gr.value_at(ida);
    const Tensor<T>& y = gr.value_at(idb);
    const bool need_a = gr.needs_grad(ida), need_b = gr.needs_grad(idb);
    Tensor<T>* ga = need_a ? &gr.grad_buffer(ida) : nullptr;
    Tensor<T>* gb = need_b ? &gr.grad_buffer(idb) : nullptr;
    if (same) {
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (ga) (*ga)[i] += da(x[i], y[i], gy[i]);
        if (gb) (*gb)[i] += db(x[i], y[i], gy[i]);
      }
      return;
    }
    auto sa = broadcast_strides(x.shape(), gy.shape());
    auto sb = broadcast_strides(y.shape(), gy.shape());
    for_each_broadcast(gy.shape(), sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += da(x[ia], y[ib], gy[i]);
      if (gb) (*gb)[ib] += db(x[ia], y[ib], gy[i]);
    });
  });
}

// Elementwise unary op. fwd(x) -> y; dx(x, y, g) -> adjoint.
template <typename T, typename Fwd, typename Dx>
Var<T> unary(const char* op, Var<T> x, Fwd fwd, Dx dx) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t idx = x.id;
  return g.record(op, std::move(out), {idx}, [idx, dx](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    const Tensor<T>& xin = gr.value_at(idx);
    const Tensor<T>& y = gr.value_at(self);
    Tensor<T>& gx = gr.grad_buffer(idx);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += dx(xin[i], y[i], gy[i]);
  });
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  for (T v : b.value().values()) {
    if (v == T(0)) throw NumericalFault("div: zero divisor");
  }
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Var<T> log(Var<T> x) {
  for (T v : x.value().values()) {
    if (!(v > T(0))) throw NumericalFault("log: non-positive argument");
  }
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T, T g) { return T(2) * v * g; });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  return unary<T>(
      "softplus", x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T, T g) {
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        return g * s;
      });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T, T g) { return (v >= lo && v <= hi) ? g : T(0); });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T, T g) { return g * factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T offset) {
  return unary<T>(
      "add_scalar", x, [offset](T v) { return v + offset; }, [](T, T, T g) { return g; });
}

template <typename T>
Var<T> detach(Var<T> x) {
  return x.graph->record("detach", x.value(), {}, nullptr);
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> x, std::vector<std::size_t> axes, bool keepdims) {
  const Shape in = x.shape();
  std::vector<bool> reduce(in.size(), false);
  for (std::size_t a : axes) {
    if (a >= in.size()) throw ShapeError("sum: axis " + std::to_string(a) + " out of range for " + to_string(in));
    reduce[a] = true;
  }
  Shape kept(in.size()), out_shape;
  for (std::size_t d = 0; d < in.size(); ++d) {
    kept[d] = reduce[d] ? 1 : in[d];
    if (!reduce[d] || keepdims) out_shape.push_back(kept[d]);
  }
  auto so = broadcast_strides(kept, in);
  Tensor<T> out(out_shape, T(0));
  const Tensor<T>& xv = x.value();
  for_each_broadcast(in, strides_of(in), so, [&](std::size_t i, std::size_t, std::size_t io) { out[io] += xv[i]; });
  const std::size_t idx = x.id;
  return x.graph->record("sum", std::move(out), {idx}, [idx, in, kept](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    Tensor<T>& gx = gr.grad_buffer(idx);
    auto so2 = broadcast_strides(kept, in);
    for_each_broadcast(in, strides_of(in), so2, [&](std::size_t i, std::size_t, std::size_t io) { gx[i] += gy[io]; });
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  std::vector<std::size_t> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return sum(x, std::move(axes), false);
}

template <typename T>
Var<T> mean(Var<T> x, std::vector<std::size_t> axes, bool keepdims) {
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.shape().at(a);
  return scale(sum(x, std::move(axes), keepdims), T(1) / static_cast<T>(count));
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t idx = x.id;
  return x.graph->record("reshape", std::move(out), {idx}, [idx](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    Tensor<T>& gx = gr.grad_buffer(idx);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) throw ShapeError("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t row = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const Tensor<T>& v = p.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * w, w, out.data() + o * row + offset);
    }
    ids.push_back(p.id);
    widths.push_back(w);
    offset += w;
  }
  return parts[0].graph->record("concat", std::move(out), ids, [ids, widths, outer, row](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (gr.needs_grad(ids[k])) {
        Tensor<T>& gx = gr.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < widths[k]; ++j) gx[o * widths[k] + j] += gy[o * row + off + j];
        }
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape in = x.shape();
  if (axis >= in.size() || length == 0 || start + length > in[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  Shape out_shape = in;
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const std::size_t row = in[axis] * inner, w = length * inner, off = start * inner;
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * row + off, w, out.data() + o * w);
  const std::size_t idx = x.id;
  return x.graph->record("slice", std::move(out), {idx}, [idx, outer, row, w, off](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_at(self);
    Tensor<T>& gx = gr.grad_buffer(idx);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) gx[o * row + off + j] += gy[o * w + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) throw ShapeError("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out(Shape{m, n});
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.value().data(), m, k) * CMapMat<T>(b.value().data(), k, n);
  const std::size_t ida = a.id, idb = b.id;
  return a.graph->record("matmul", std::move(out), {ida, idb}, [ida, idb, m, k, n](Graph<T>& gr, std::size_t self) {
    CMapMat<T> g(gr.grad_at(self).data(), m, n);
    if (gr.needs_grad(ida)) {
      MapMat<T>(gr.grad_buffer(ida).data(), m, k).noalias() += g * CMapMat<T>(gr.value_at(idb).data(), k, n).transpose();
    }
    if (gr.needs_grad(idb)) {
      MapMat<T>(gr.grad_buffer(idb).data(), k, n).noalias() += CMapMat<T>(gr.value_at(ida).data(), m, k).transpose() * g;
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w;     // input image batch
  std::size_t o, kh, kw;      // filters
  std::size_t oh, ow;         // output spatial
  std::size_t stride, pad;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * oh * ow; }
};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

// cols[(c*kh+ky)*kw+kx][(n*oh+oy)*ow+ox] = x[n, c, oy*s-p+ky, ox*s-p+kx] (zero outside).
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* dst = row + (n * g.oh + oy) * g.ow;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill_n(dst, g.ow, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: x += scatter(cols).
template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* plane = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const T* src = row + (n * g.oh + oy) * g.ow;
            T* dst = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// (O, N*P) <-> (N, O, P)
template <typename T>
void channel_major_to_batch(const ConvGeom& g, const T* src, T* dst) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t o = 0; o < g.o; ++o) {
    for (std::size_t n = 0; n < g.n; ++n) {
      std::copy_n(src + o * g.n * p + n * p, p, dst + (n * g.o + o) * p);
    }
  }
}

template <typename T>
void batch_to_channel_major(const ConvGeom& g, const T* src, T* dst) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t o = 0; o < g.o; ++o) {
    for (std::size_t n = 0; n < g.n; ++n) {
      std::copy_n(src + (n * g.o + o) * p, p, dst + o * g.n * p + n * p);
    }
  }
}

ConvGeom conv_geometry(const char* op, const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1]) throw ShapeError(op, x, w);
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  ConvGeom g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, stride, pad};
  g.oh = conv_out(g.h, g.kh, stride, pad);
  g.ow = conv_out(g.w, g.kw, stride, pad);
  if (g.oh == 0 || g.ow == 0) throw ShapeError(op, x, w);
  return g;
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry("conv2d", x.shape(), w.shape(), stride, padding);
  auto cols = std::make_shared<std::vector<T>>(g.rows() * g.cols());
  im2col(g, x.value().data(), cols->data());
  std::vector<T> mat(g.o * g.cols());
  MapMat<T>(mat.data(), g.o, g.cols()).noalias() =
      CMapMat<T>(w.value().data(), g.o, g.rows()) * CMapMat<T>(cols->data(), g.rows(), g.cols());
  Tensor<T> out(Shape{g.n, g.o, g.oh, g.ow});
  channel_major_to_batch(g, mat.data(), out.data());
  const std::size_t idx = x.id, idw = w.id;
  return x.graph->record("conv2d", std::move(out), {idx, idw}, [g, cols, idx, idw](Graph<T>& gr, std::size_t self) {
    std::vector<T> gm(g.o * g.cols());
    batch_to_channel_major(g, gr.grad_at(self).data(), gm.data());
    CMapMat<T> G(gm.data(), g.o, g.cols());
    if (gr.needs_grad(idw)) {
      MapMat<T>(gr.grad_buffer(idw).data(), g.o, g.rows()).noalias() +=
          G * CMapMat<T>(cols->data(), g.rows(), g.cols()).transpose();
    }
    if (gr.needs_grad(idx)) {
      std::vector<T> dcols(g.rows() * g.cols());
      MapMat<T>(dcols.data(), g.rows(), g.cols()).noalias() =
          CMapMat<T>(gr.value_at(idw).data(), g.o, g.rows()).transpose() * G;
      col2im(g, dcols.data(), gr.grad_buffer(idx).data());
    }
  });
}

template <typename T>
Var<T> conv2d_transpose(Var<T> y, Var<T> w, std::size_t stride, std::size_t padding, std::size_t out_h,
                        std::size_t out_w) {
  const Shape ys = y.shape();
  const Shape ws = w.shape();
  if (ys.size() != 4 || ws.size() != 4 || ys[1] != ws[0]) throw ShapeError("conv2d_transpose", ys, ws);
  const ConvGeom g = conv_geometry("conv2d_transpose", Shape{ys[0], ws[1], out_h, out_w}, Shape{ws[1], ws[1], ws[2], ws[3]},
                                   stride, padding);
  ConvGeom geo = g;
  geo.o = ws[0];
  if (geo.oh != ys[2] || geo.ow != ys[3]) {
    throw ShapeError("conv2d_transpose: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " does not map to input " + to_string(ys));
  }
  std::vector<T> ym(geo.o * geo.cols());
  batch_to_channel_major(geo, y.value().data(), ym.data());
  std::vector<T> cols(geo.rows() * geo.cols());
  MapMat<T>(cols.data(), geo.rows(), geo.cols()).noalias() =
      CMapMat<T>(w.value().data(), geo.o, geo.rows()).transpose() * CMapMat<T>(ym.data(), geo.o, geo.cols());
  Tensor<T> out(Shape{geo.n, geo.c, geo.h, geo.w}, T(0));
  col2im(geo, cols.data(), out.data());
  const std::size_t idy = y.id, idw = w.id;
  return y.graph->record("conv2d_transpose", std::move(out), {idy, idw}, [geo, idy, idw](Graph<T>& gr, std::size_t self) {
    std::vector<T> gcols(geo.rows() * geo.cols());
    im2col(geo, gr.grad_at(self).data(), gcols.data());
    CMapMat<T> Gc(gcols.data(), geo.rows(), geo.cols());
    if (gr.needs_grad(idw)) {
      std::vector<T> ym2(geo.o * geo.cols());
      batch_to_channel_major(geo, gr.value_at(idy).data(), ym2.data());
      MapMat<T>(gr.grad_buffer(idw).data(), geo.o, geo.rows()).noalias() +=
          CMapMat<T>(ym2.data(), geo.o, geo.cols()) * Gc.transpose();
    }
    if (gr.needs_grad(idy)) {
      std::vector<T> dy(geo.o * geo.cols());
      MapMat<T>(dy.data(), geo.o, geo.cols()).noalias() = CMapMat<T>(gr.value_at(idw).data(), geo.o, geo.rows()) * Gc;
      std::vector<T> dyb(dy.size());
      channel_major_to_batch(geo, dy.data(), dyb.data());
      Tensor<T>& gy = gr.grad_buffer(idy);
      for (std::size_t i = 0; i < dyb.size(); ++i) gy[i] += dyb[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

template <typename T>
T gradient_check(const std::function<Var<T>(Graph<T>&, Var<T>)>& f, const Tensor<T>& x, T step) {
  Graph<T> g;
  Var<T> xv = g.leaf(x);
  Var<T> y = f(g, xv);
  g.backward(y);
  const Tensor<T> analytic = g.grad(xv);

  auto eval = [&](const Tensor<T>& at) {
    Graph<T> h;
    h.set_recording(false);
    return f(h, h.constant(at)).value().item();
  };
  T worst = T(0);
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const T fp = eval(probe);
    probe[i] = x[i] - step;
    const T fm = eval(probe);
    probe[i] = x[i];
    const T numeric = (fp - fm) / (T(2) * step);
    const T a = analytic[i];
    const T denom = std::max({T(1), std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define MORPHVAE_INSTANTIATE(T)                                                                          \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                                   \
  template Var<T> div(Var<T>, Var<T>);                                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                                                \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                                      \
  template Var<T> conv2d_transpose(Var<T>, Var<T>, std::size_t, std::size_t, std::size_t, std::size_t);  \
  template Var<T> relu(Var<T>);                                                                          \
  template Var<T> sigmoid(Var<T>);                                                                       \
  template Var<T> tanh(Var<T>);                                                                          \
  template Var<T> exp(Var<T>);                                                                           \
  template Var<T> log(Var<T>);                                                                           \
  template Var<T> square(Var<T>);                                                                        \
  template Var<T> softplus(Var<T>);                                                                      \
  template Var<T> clamp(Var<T>, T, T);                                                                   \
  template Var<T> scale(Var<T>, T);                                                                      \
  template Var<T> add_scalar(Var<T>, T);                                                                 \
  template Var<T> detach(Var<T>);                                                                        \
  template Var<T> sum(Var<T>);                                                                           \
  template Var<T> sum(Var<T>, std::vector<std::size_t>, bool);                                           \
  template Var<T> mean(Var<T>);                                                                          \
  template Var<T> mean(Var<T>, std::vector<std::size_t>, bool);                                          \
  template Var<T> reshape(Var<T>, Shape);                                                                \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                                          \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                                  \
  template T gradient_check(const std::function<Var<T>(Graph<T>&, Var<T>)>&, const Tensor<T>&, T);

MORPHVAE_INSTANTIATE(float)
MORPHVAE_INSTANTIATE(double)

#undef MORPHVAE_INSTANTIATE

}  // namespace morphvae
