#include "drdm/core/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "drdm/core/error.hpp"

namespace drdm {

using EigenRowMat =
    Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

namespace {

std::shared_ptr<TensorNode> make_node(Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<std::size_t>(shape_numel(n->shape)), 0.0);
  return n;
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

void attach(const std::shared_ptr<TensorNode>& out,
            std::vector<Tensor> parents,
            std::function<void(TensorNode&)> backfn) {
  out->requires_grad = any_requires_grad(parents);
  if (!out->requires_grad) return;
  out->parents.reserve(parents.size());
  for (auto& p : parents) out->parents.push_back(p.node());
  out->backfn = std::move(backfn);
}

// Strides of a dense row-major layout.
std::vector<std::int64_t> dense_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    check(da == db || da == 1 || db == 1,
          "broadcast: incompatible shapes " + shape_str(a) + " vs " +
              shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for reading `in` at output coordinates (0 where in's dim is 1).
std::vector<std::int64_t> broadcast_strides(const Shape& in,
                                            const Shape& out) {
  std::vector<std::int64_t> st(out.size(), 0);
  const auto real = dense_strides(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    st[off + i] = in[i] == 1 ? 0 : real[i];
  return st;
}

// Sum `g` (shaped `gshape`) down to `target` shape, for broadcast backward.
void reduce_into(const std::vector<Real>& g, const Shape& gshape,
                 std::vector<Real>& acc, const Shape& target) {
  if (gshape == target) {
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    return;
  }
  const auto tstrides = broadcast_strides(target, gshape);
  const std::int64_t n = shape_numel(gshape);
  std::vector<std::int64_t> coord(gshape.size(), 0);
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t toff = 0;
    for (std::size_t d = 0; d < gshape.size(); ++d) toff += coord[d] * tstrides[d];
    acc[static_cast<std::size_t>(toff)] += g[static_cast<std::size_t>(flat)];
    for (std::size_t d = gshape.size(); d-- > 0;) {
      if (++coord[d] < gshape[d]) break;
      coord[d] = 0;
    }
  }
}

template <typename FwdFn>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, FwdFn f,
                        std::function<void(TensorNode&, const TensorNode&,
                                           const TensorNode&, std::vector<Real>&,
                                           std::vector<Real>&)>
                            grad_fill) {
  const Shape oshape = broadcast_shape(a.shape(), b.shape());
  auto out = make_node(oshape);
  const std::int64_t n = shape_numel(oshape);
  if (a.shape() == b.shape()) {
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::int64_t i = 0; i < n; ++i)
      out->value[static_cast<std::size_t>(i)] =
          f(av[static_cast<std::size_t>(i)], bv[static_cast<std::size_t>(i)]);
  } else {
    const auto sa = broadcast_strides(a.shape(), oshape);
    const auto sb = broadcast_strides(b.shape(), oshape);
    std::vector<std::int64_t> coord(oshape.size(), 0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::int64_t flat = 0; flat < n; ++flat) {
      std::int64_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < oshape.size(); ++d) {
        ia += coord[d] * sa[d];
        ib += coord[d] * sb[d];
      }
      out->value[static_cast<std::size_t>(flat)] =
          f(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
      for (std::size_t d = oshape.size(); d-- > 0;) {
        if (++coord[d] < oshape[d]) break;
        coord[d] = 0;
      }
    }
  }
  auto an = a.node();
  auto bn = b.node();
  attach(out, {a, b}, [an, bn, grad_fill](TensorNode& self) {
    std::vector<Real> ga(self.value.size(), 0.0), gb(self.value.size(), 0.0);
    grad_fill(self, *an, *bn, ga, gb);
    if (an->requires_grad) {
      an->ensure_grad();
      reduce_into(ga, self.shape, an->grad, an->shape);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      reduce_into(gb, self.shape, bn->grad, bn->shape);
    }
  });
  return Tensor(out);
}

// Value of `t` at output coordinate `flat` of shape `oshape` (broadcast read).
struct BroadcastReader {
  const std::vector<Real>& v;
  std::vector<std::int64_t> strides;
  BroadcastReader(const TensorNode& t, const Shape& oshape)
      : v(t.value), strides(broadcast_strides(t.shape, oshape)) {}
  Real operator()(const std::vector<std::int64_t>& coord) const {
    std::int64_t off = 0;
    for (std::size_t d = 0; d < coord.size(); ++d) off += coord[d] * strides[d];
    return v[static_cast<std::size_t>(off)];
  }
};

template <typename GradAB>
auto pointwise_grads(GradAB g) {
  // Adapts a (aval, bval, gout) -> (ga, gb) rule to the broadcast machinery.
  return [g](TensorNode& self, const TensorNode& a, const TensorNode& b,
             std::vector<Real>& ga, std::vector<Real>& gb) {
    const Shape& os = self.shape;
    const std::int64_t n = shape_numel(os);
    BroadcastReader ra(a, os), rb(b, os);
    std::vector<std::int64_t> coord(os.size(), 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
      const Real go = self.grad[static_cast<std::size_t>(flat)];
      const auto [da, db] = g(ra(coord), rb(coord), go);
      ga[static_cast<std::size_t>(flat)] = da;
      gb[static_cast<std::size_t>(flat)] = db;
      for (std::size_t d = os.size(); d-- > 0;) {
        if (++coord[d] < os[d]) break;
        coord[d] = 0;
      }
    }
  };
}

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  auto out = make_node(a.shape());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = f(av[i]);
  auto an = a.node();
  attach(out, {a}, [an, df](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      an->grad[i] += df(an->value[i], self.value[i]) * self.grad[i];
  });
  return Tensor(out);
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, Real v, bool requires_grad) {
  auto n = make_node(std::move(shape));
  std::fill(n->value.begin(), n->value.end(), v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(Real v) { return full({1}, v, false); }

Tensor Tensor::from_data(Shape shape, std::vector<Real> data,
                         bool requires_grad) {
  check(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
        "from_data: shape " + shape_str(shape) + " does not match data size " +
            std::to_string(data.size()));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, Real stddev, Real mean,
                     bool requires_grad) {
  auto n = make_node(std::move(shape));
  for (auto& v : n->value) v = mean + stddev * rng.normal();
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Real Tensor::item() const {
  check(numel() == 1, "item: tensor has " + std::to_string(numel()) +
                          " elements, expected 1");
  return node_->value[0];
}

Real Tensor::at(std::initializer_list<std::int64_t> idx) const {
  check(idx.size() == ndim(), "at: rank mismatch");
  const auto st = dense_strides(shape());
  std::int64_t off = 0;
  std::size_t d = 0;
  for (auto i : idx) off += i * st[d++];
  return node_->value[static_cast<std::size_t>(off)];
}

void Tensor::backward() const {
  check(node_ != nullptr, "backward: undefined tensor");
  check(numel() == 1, "backward: root must be a scalar");
  // Iterative post-order topological sort over the tape.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backfn && n->requires_grad) {
      n->ensure_grad();
      n->backfn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](Real x, Real y) { return x + y; },
      pointwise_grads([](Real, Real, Real go) { return std::pair{go, go}; }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](Real x, Real y) { return x - y; },
      pointwise_grads([](Real, Real, Real go) { return std::pair{go, -go}; }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](Real x, Real y) { return x * y; },
      pointwise_grads(
          [](Real x, Real y, Real go) { return std::pair{go * y, go * x}; }));
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](Real x, Real y) { return x / y; },
      pointwise_grads([](Real x, Real y, Real go) {
        return std::pair{go / y, -go * x / (y * y)};
      }));
}

Tensor add_scalar(const Tensor& a, Real s) {
  return unary_op(
      a, [s](Real x) { return x + s; }, [](Real, Real) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, Real s) {
  return unary_op(
      a, [s](Real x) { return x * s; }, [s](Real, Real) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp_op(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::exp(x); },
      [](Real, Real y) { return y; });
}

Tensor log_op(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::log(x); },
      [](Real x, Real) { return 1.0 / x; });
}

Tensor sqrt_op(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::sqrt(x); },
      [](Real, Real y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return x * x; }, [](Real x, Real) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return x > 0.0 ? x : 0.0; },
      [](Real x, Real) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a,
      [](Real x) { return x / (1.0 + std::exp(-x)); },
      [](Real x, Real) {
        const Real s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a,
      [](Real x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](Real x, Real) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor clamp_min(const Tensor& a, Real lo) {
  return unary_op(
      a, [lo](Real x) { return x < lo ? lo : x; },
      [lo](Real x, Real) { return x < lo ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto out = make_node({1});
  Real acc = 0.0;
  for (Real v : a.data()) acc += v;
  out->value[0] = acc;
  auto an = a.node();
  attach(out, {a}, [an](TensorNode& self) {
    an->ensure_grad();
    const Real g = self.grad[0];
    for (auto& gv : an->grad) gv += g;
  });
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<Real>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  const auto& s = a.shape();
  check(axis >= 0 && axis < static_cast<int>(s.size()), "sum_axis: bad axis");
  Shape oshape;
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (static_cast<int>(d) == axis) {
      if (keepdim) oshape.push_back(1);
    } else {
      oshape.push_back(s[d]);
    }
  }
  if (oshape.empty()) oshape.push_back(1);
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d)
    inner *= s[d];
  const std::int64_t mid = s[static_cast<std::size_t>(axis)];

  auto out = make_node(oshape);
  const auto& av = a.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      Real acc = 0.0;
      for (std::int64_t m = 0; m < mid; ++m)
        acc += av[static_cast<std::size_t>((o * mid + m) * inner + i)];
      out->value[static_cast<std::size_t>(o * inner + i)] = acc;
    }
  auto an = a.node();
  attach(out, {a}, [an, outer, inner, mid](TensorNode& self) {
    an->ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const Real g = self.grad[static_cast<std::size_t>(o * inner + i)];
        for (std::int64_t m = 0; m < mid; ++m)
          an->grad[static_cast<std::size_t>((o * mid + m) * inner + i)] += g;
      }
  });
  return Tensor(out);
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  const Real n = static_cast<Real>(a.shape()[static_cast<std::size_t>(axis)]);
  return mul_scalar(sum_axis(a, axis, keepdim), 1.0 / n);
}

Tensor min_rows(const Tensor& a) {
  check(a.ndim() == 2, "min_rows: expected 2-D tensor");
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  auto out = make_node({rows});
  std::vector<std::int64_t> argmin(static_cast<std::size_t>(rows), 0);
  const auto& av = a.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    Real best = av[static_cast<std::size_t>(r * cols)];
    std::int64_t bi = 0;
    for (std::int64_t c = 1; c < cols; ++c) {
      const Real v = av[static_cast<std::size_t>(r * cols + c)];
      if (v < best) {
        best = v;
        bi = c;
      }
    }
    out->value[static_cast<std::size_t>(r)] = best;
    argmin[static_cast<std::size_t>(r)] = bi;
  }
  auto an = a.node();
  attach(out, {a}, [an, argmin, cols](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < argmin.size(); ++r)
      an->grad[r * static_cast<std::size_t>(cols) +
               static_cast<std::size_t>(argmin[r])] += self.grad[r];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
            shape_str(shape));
  auto out = std::make_shared<TensorNode>();
  out->shape = std::move(shape);
  out->value = a.data();
  auto an = a.node();
  attach(out, {a}, [an](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i];
  });
  return Tensor(out);
}

Tensor transpose2d(const Tensor& a) {
  check(a.ndim() == 2, "transpose2d: expected 2-D tensor");
  const std::int64_t r = a.dim(0), c = a.dim(1);
  auto out = make_node({c, r});
  const auto& av = a.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out->value[static_cast<std::size_t>(j * r + i)] =
          av[static_cast<std::size_t>(i * c + j)];
  auto an = a.node();
  attach(out, {a}, [an, r, c](TensorNode& self) {
    an->ensure_grad();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        an->grad[static_cast<std::size_t>(i * c + j)] +=
            self.grad[static_cast<std::size_t>(j * r + i)];
  });
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const Shape base = parts[0].shape();
  check(axis >= 0 && axis < static_cast<int>(base.size()), "concat: bad axis");
  Shape oshape = base;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check(p.ndim() == base.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < base.size(); ++d)
      if (static_cast<int>(d) != axis)
        check(p.shape()[d] == base[d], "concat: shape mismatch off-axis");
    total += p.shape()[static_cast<std::size_t>(axis)];
  }
  oshape[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= base[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < base.size(); ++d)
    inner *= base[d];

  auto out = make_node(oshape);
  std::vector<std::int64_t> offsets;  // start along axis per part
  {
    std::int64_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const std::int64_t mid = p.shape()[static_cast<std::size_t>(axis)];
      const auto& pv = p.data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t m = 0; m < mid; ++m)
          std::copy_n(
              pv.begin() + (o * mid + m) * inner, inner,
              out->value.begin() + (o * total + off + m) * inner);
      off += mid;
    }
  }
  std::vector<std::shared_ptr<TensorNode>> pnodes;
  for (const auto& p : parts) pnodes.push_back(p.node());
  attach(out, parts, [pnodes, offsets, outer, inner, total](TensorNode& self) {
    for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
      auto& pn = pnodes[pi];
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      const std::int64_t mid =
          static_cast<std::int64_t>(pn->value.size()) / (outer * inner);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t m = 0; m < mid; ++m) {
          const auto src =
              self.grad.begin() + (o * total + offsets[pi] + m) * inner;
          auto dst = pn->grad.begin() + (o * mid + m) * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
  });
  return Tensor(out);
}

Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  const auto& s = a.shape();
  check(axis >= 0 && axis < static_cast<int>(s.size()), "narrow: bad axis");
  check(start >= 0 && start + len <= s[static_cast<std::size_t>(axis)],
        "narrow: range out of bounds");
  Shape oshape = s;
  oshape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d)
    inner *= s[d];
  const std::int64_t mid = s[static_cast<std::size_t>(axis)];

  auto out = make_node(oshape);
  const auto& av = a.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t m = 0; m < len; ++m)
      std::copy_n(av.begin() + (o * mid + start + m) * inner, inner,
                  out->value.begin() + (o * len + m) * inner);
  auto an = a.node();
  attach(out, {a}, [an, outer, inner, mid, start, len](TensorNode& self) {
    an->ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t m = 0; m < len; ++m) {
        const auto src = self.grad.begin() + (o * len + m) * inner;
        auto dst = an->grad.begin() + (o * mid + start + m) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
  return Tensor(out);
}

Tensor gather_flat(const Tensor& a, std::vector<std::int64_t> indices) {
  const std::int64_t n = a.numel();
  for (auto i : indices)
    check(i >= 0 && i < n, "gather_flat: index out of range");
  auto out = make_node({static_cast<std::int64_t>(indices.size())});
  const auto& av = a.data();
  for (std::size_t k = 0; k < indices.size(); ++k)
    out->value[k] = av[static_cast<std::size_t>(indices[k])];
  auto an = a.node();
  attach(out, {a}, [an, indices](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t k = 0; k < indices.size(); ++k)
      an->grad[static_cast<std::size_t>(indices[k])] += self.grad[k];
  });
  return Tensor(out);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  check(!rows.empty(), "stack_rows: no inputs");
  std::vector<Tensor> reshaped;
  reshaped.reserve(rows.size());
  for (const auto& r : rows) {
    Shape s = r.shape();
    Shape ns;
    ns.push_back(1);
    for (auto d : s) ns.push_back(d);
    reshaped.push_back(reshape(r, ns));
  }
  return concat(reshaped, 0);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: expected 2-D tensors");
  const std::int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  check(b.dim(0) == k, "matmul: inner dims differ: " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
  auto out = make_node({n, m});
  ConstMatMap A(a.data().data(), n, k);
  ConstMatMap B(b.data().data(), k, m);
  MatMap C(out->value.data(), n, m);
  C.noalias() = A * B;
  auto an = a.node();
  auto bn = b.node();
  attach(out, {a, b}, [an, bn, n, k, m](TensorNode& self) {
    ConstMatMap G(self.grad.data(), n, m);
    if (an->requires_grad) {
      an->ensure_grad();
      MatMap GA(an->grad.data(), n, k);
      ConstMatMap B(bn->value.data(), k, m);
      GA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MatMap GB(bn->grad.data(), k, m);
      ConstMatMap A(an->value.data(), n, k);
      GB.noalias() += A.transpose() * G;
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// structured ops
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  check(a.ndim() == 2, "softmax_rows: expected 2-D tensor");
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  auto out = make_node(a.shape());
  const auto& av = a.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    Real mx = av[static_cast<std::size_t>(r * cols)];
    for (std::int64_t c = 1; c < cols; ++c)
      mx = std::max(mx, av[static_cast<std::size_t>(r * cols + c)]);
    Real denom = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const Real e = std::exp(av[static_cast<std::size_t>(r * cols + c)] - mx);
      out->value[static_cast<std::size_t>(r * cols + c)] = e;
      denom += e;
    }
    for (std::int64_t c = 0; c < cols; ++c)
      out->value[static_cast<std::size_t>(r * cols + c)] /= denom;
  }
  auto an = a.node();
  attach(out, {a}, [an, rows, cols](TensorNode& self) {
    an->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      Real dot = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const auto i = static_cast<std::size_t>(r * cols + c);
        dot += self.grad[i] * self.value[i];
      }
      for (std::int64_t c = 0; c < cols; ++c) {
        const auto i = static_cast<std::size_t>(r * cols + c);
        an->grad[i] += self.value[i] * (self.grad[i] - dot);
      }
    }
  });
  return Tensor(out);
}

Tensor log1p_sum_exp(const Tensor& v) {
  check(v.ndim() == 1, "log1p_sum_exp: expected 1-D tensor");
  auto out = make_node({1});
  const auto& vv = v.data();
  // Shift by max(0, max(v)) so the implicit e^0 term and large entries are
  // both safe.
  Real m = 0.0;
  for (Real x : vv) m = std::max(m, x);
  Real acc = std::exp(-m);
  for (Real x : vv) acc += std::exp(x - m);
  const Real L = m + std::log(acc);
  out->value[0] = L;
  auto vn = v.node();
  attach(out, {v}, [vn, L](TensorNode& self) {
    vn->ensure_grad();
    const Real g = self.grad[0];
    for (std::size_t i = 0; i < vn->value.size(); ++i)
      vn->grad[i] += g * std::exp(vn->value[i] - L);
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// conv / pooling
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t B, C, H, W, O, kh, kw, OH, OW;
  int stride, pad;
};

// col layout: (C*kh*kw) rows x (B*OH*OW) cols, column index = ((b*OH)+oh)*OW+ow
void im2col(const std::vector<Real>& x, const ConvDims& d,
            std::vector<Real>& col) {
  const std::int64_t cols = d.B * d.OH * d.OW;
  col.assign(static_cast<std::size_t>(d.C * d.kh * d.kw * cols), 0.0);
  for (std::int64_t b = 0; b < d.B; ++b)
    for (std::int64_t c = 0; c < d.C; ++c)
      for (std::int64_t ki = 0; ki < d.kh; ++ki)
        for (std::int64_t kj = 0; kj < d.kw; ++kj) {
          const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
          for (std::int64_t oh = 0; oh < d.OH; ++oh) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.H) continue;
            for (std::int64_t ow = 0; ow < d.OW; ++ow) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.W) continue;
              col[static_cast<std::size_t>(row * cols +
                                           (b * d.OH + oh) * d.OW + ow)] =
                  x[static_cast<std::size_t>(((b * d.C + c) * d.H + ih) * d.W +
                                             iw)];
            }
          }
        }
}

void col2im_add(const std::vector<Real>& col, const ConvDims& d,
                std::vector<Real>& x) {
  const std::int64_t cols = d.B * d.OH * d.OW;
  for (std::int64_t b = 0; b < d.B; ++b)
    for (std::int64_t c = 0; c < d.C; ++c)
      for (std::int64_t ki = 0; ki < d.kh; ++ki)
        for (std::int64_t kj = 0; kj < d.kw; ++kj) {
          const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
          for (std::int64_t oh = 0; oh < d.OH; ++oh) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.H) continue;
            for (std::int64_t ow = 0; ow < d.OW; ++ow) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.W) continue;
              x[static_cast<std::size_t>(((b * d.C + c) * d.H + ih) * d.W +
                                         iw)] +=
                  col[static_cast<std::size_t>(row * cols +
                                               (b * d.OH + oh) * d.OW + ow)];
            }
          }
        }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  check(x.ndim() == 4, "conv2d: input must be (B,C,H,W)");
  check(w.ndim() == 4, "conv2d: weight must be (O,C,kh,kw)");
  ConvDims d;
  d.B = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.O = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  check(w.dim(1) == d.C, "conv2d: channel mismatch");
  check(b.numel() == d.O, "conv2d: bias size mismatch");
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  check(d.OH >= 1 && d.OW >= 1, "conv2d: kernel larger than padded input");

  const std::int64_t cols = d.B * d.OH * d.OW;
  const std::int64_t krows = d.C * d.kh * d.kw;
  auto col = std::make_shared<std::vector<Real>>();
  im2col(x.data(), d, *col);

  auto out = make_node({d.B, d.O, d.OH, d.OW});
  {
    ConstMatMap W(w.data().data(), d.O, krows);
    ConstMatMap Col(col->data(), krows, cols);
    // Y (O x cols), then scatter to (B,O,OH,OW).
    EigenRowMat Y = W * Col;
    const auto& bias = b.data();
    for (std::int64_t o = 0; o < d.O; ++o)
      for (std::int64_t bidx = 0; bidx < d.B; ++bidx)
        for (std::int64_t p = 0; p < d.OH * d.OW; ++p)
          out->value[static_cast<std::size_t>(((bidx * d.O + o) * d.OH * d.OW) +
                                              p)] =
              Y(o, bidx * d.OH * d.OW + p) + bias[static_cast<std::size_t>(o)];
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  attach(out, {x, w, b}, [xn, wn, bn, d, col, cols, krows](TensorNode& self) {
    // Gather dY into (O x cols) layout.
    EigenRowMat dY(d.O, cols);
    for (std::int64_t o = 0; o < d.O; ++o)
      for (std::int64_t bidx = 0; bidx < d.B; ++bidx)
        for (std::int64_t p = 0; p < d.OH * d.OW; ++p)
          dY(o, bidx * d.OH * d.OW + p) = self.grad[static_cast<std::size_t>(
              ((bidx * d.O + o) * d.OH * d.OW) + p)];
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::int64_t o = 0; o < d.O; ++o)
        bn->grad[static_cast<std::size_t>(o)] += dY.row(o).sum();
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      ConstMatMap Col(col->data(), krows, cols);
      MatMap dW(wn->grad.data(), d.O, krows);
      dW.noalias() += dY * Col.transpose();
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      ConstMatMap W(wn->value.data(), d.O, krows);
      EigenRowMat dCol = W.transpose() * dY;
      std::vector<Real> dcol(dCol.data(), dCol.data() + dCol.size());
      col2im_add(dcol, d, xn->grad);
    }
  });
  return Tensor(out);
}

Tensor avg_pool2d(const Tensor& x, int k) {
  check(x.ndim() == 4, "avg_pool2d: input must be (B,C,H,W)");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % k == 0 && W % k == 0, "avg_pool2d: size not divisible by window");
  const std::int64_t OH = H / k, OW = W / k;
  auto out = make_node({B, C, OH, OW});
  const auto& xv = x.data();
  const Real inv = 1.0 / static_cast<Real>(k * k);
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t oh = 0; oh < OH; ++oh)
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        Real acc = 0.0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j)
            acc += xv[static_cast<std::size_t>(
                (bc * H + oh * k + i) * W + ow * k + j)];
        out->value[static_cast<std::size_t>((bc * OH + oh) * OW + ow)] =
            acc * inv;
      }
  auto xn = x.node();
  attach(out, {x}, [xn, B, C, H, W, OH, OW, k, inv](TensorNode& self) {
    xn->ensure_grad();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          const Real g =
              self.grad[static_cast<std::size_t>((bc * OH + oh) * OW + ow)] *
              inv;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
              xn->grad[static_cast<std::size_t>(
                  (bc * H + oh * k + i) * W + ow * k + j)] += g;
        }
  });
  return Tensor(out);
}

Tensor global_avg_pool(const Tensor& x) {
  check(x.ndim() == 4, "global_avg_pool: input must be (B,C,H,W)");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  return reshape(mean_axis(reshape(x, {B, C, HW}), 2, false), {B, C});
}

Tensor upsample_nearest2x(const Tensor& x) {
  check(x.ndim() == 4, "upsample_nearest2x: input must be (B,C,H,W)");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = make_node({B, C, H * 2, W * 2});
  const auto& xv = x.data();
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        const Real v = xv[static_cast<std::size_t>((bc * H + h) * W + w)];
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            out->value[static_cast<std::size_t>(
                (bc * 2 * H + 2 * h + i) * 2 * W + 2 * w + j)] = v;
      }
  auto xn = x.node();
  attach(out, {x}, [xn, B, C, H, W](TensorNode& self) {
    xn->ensure_grad();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          Real acc = 0.0;
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
              acc += self.grad[static_cast<std::size_t>(
                  (bc * 2 * H + 2 * h + i) * 2 * W + 2 * w + j)];
          xn->grad[static_cast<std::size_t>((bc * H + h) * W + w)] += acc;
        }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  // x (n, in), w (out, in), b (out)
  return add(matmul(x, transpose2d(w)), reshape(b, {1, b.numel()}));
}

Tensor l2_normalize_rows(const Tensor& x, Real eps) {
  check(x.ndim() == 2, "l2_normalize_rows: expected 2-D tensor");
  Tensor norms = sqrt_op(add_scalar(sum_axis(square(x), 1, true), eps));
  return divide(x, norms);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2,
        "attention: expected 2-D Q, K, V");
  check(q.dim(1) == k.dim(1), "attention: query/key width mismatch (d_k " +
                                  std::to_string(q.dim(1)) + " vs " +
                                  std::to_string(k.dim(1)) + ")");
  check(k.dim(0) == v.dim(0), "attention: key/value count mismatch");
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(q.dim(1)));
  Tensor logits = mul_scalar(matmul(q, transpose2d(k)), scale);
  return matmul(softmax_rows(logits), v);
}

}  // namespace drdm
