#include "cts/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <functional>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "cts/error.hpp"

namespace cts::ad {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
  ~GradModeScope() { t_grad_enabled = previous_; }

 private:
  bool previous_;
};

// ---- broadcasting ----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      fail(ErrorCode::kShapeMismatch, op, ": cannot broadcast ", shape_str(a), " with ",
           shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `in` viewed at rank `out.size()`, zero along broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  const std::size_t lead = out.size() - in.size();
  std::int64_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) strides[i + lead] = stride;
    stride *= in[i];
  }
  return strides;
}

// Visits every element of `out` in row-major order, passing the offsets of
// the corresponding elements in each input.
template <std::size_t K, typename Fn>
void for_each_broadcast(const Shape& out, const std::array<std::vector<std::int64_t>, K>& strides,
                        Fn&& fn) {
  const std::size_t rank = out.size();
  const std::int64_t total = numel(out);
  std::vector<std::int64_t> idx(rank, 0);
  std::array<std::int64_t, K> off{};
  for (std::int64_t linear = 0; linear < total; ++linear) {
    fn(linear, off);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      for (std::size_t k = 0; k < K; ++k) off[k] += strides[k][d];
      if (idx[d] < out[d]) break;
      for (std::size_t k = 0; k < K; ++k) off[k] -= strides[k][d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, F f, const char* op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape(), op);
  Tensor out(shape);
  if (b.size() == 1 && static_cast<std::int64_t>(a.size()) == numel(shape)) {
    const double bv = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.size() == 1 && static_cast<std::int64_t>(b.size()) == numel(shape)) {
    const double av = a[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  std::array<std::vector<std::int64_t>, 2> strides{broadcast_strides(a.shape(), shape),
                                                   broadcast_strides(b.shape(), shape)};
  auto ad = a.data();
  auto bd = b.data();
  for_each_broadcast<2>(shape, strides, [&](std::int64_t i, const std::array<std::int64_t, 2>& off) {
    out[static_cast<std::size_t>(i)] = f(ad[off[0]], bd[off[1]]);
  });
  return out;
}

template <typename F>
Tensor unary_kernel(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

// Sums `x` down to `target` (target broadcastable to x.shape()).
Tensor reduce_to(const Tensor& x, const Shape& target) {
  Tensor out(target, 0.0);
  std::array<std::vector<std::int64_t>, 1> strides{broadcast_strides(target, x.shape())};
  auto xd = x.data();
  for_each_broadcast<1>(x.shape(), strides, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
    out[static_cast<std::size_t>(off[0])] += xd[i];
  });
  return out;
}

Tensor broadcast_kernel(const Tensor& x, const Shape& shape) {
  Tensor out(shape);
  std::array<std::vector<std::int64_t>, 1> strides{broadcast_strides(x.shape(), shape)};
  auto xd = x.data();
  for_each_broadcast<1>(shape, strides, [&](std::int64_t i, const std::array<std::int64_t, 1>& off) {
    out[static_cast<std::size_t>(i)] = xd[off[0]];
  });
  return out;
}

std::vector<int> normalize_axes(const std::vector<int>& axes, std::size_t rank, const char* op) {
  std::vector<int> out;
  for (int a : axes) {
    const int r = static_cast<int>(rank);
    const int n = a < 0 ? a + r : a;
    require(n >= 0 && n < r, ErrorCode::kInvalidArgument, op, ": axis ", a, " out of range for rank ",
            rank);
    out.push_back(n);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Shape keepdim_shape(const Shape& in, const std::vector<int>& axes) {
  Shape s = in;
  for (int a : axes) s[static_cast<std::size_t>(a)] = 1;
  return s;
}

Shape dropdim_shape(const Shape& in, const std::vector<int>& axes) {
  Shape s;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (std::find(axes.begin(), axes.end(), static_cast<int>(i)) == axes.end()) s.push_back(in[i]);
  }
  return s;
}

// ---- convolution kernels ----------------------------------------------------

struct ConvDims {
  std::int64_t n, c, h, w, o, kh, kw, ho, wo;
};

ConvDims conv_dims(const Shape& x, const Shape& w, Conv2dGeometry g, const char* op) {
  require(x.size() == 4 && w.size() == 4, ErrorCode::kShapeMismatch, op,
          ": expected 4-D input and weight, got ", shape_str(x), " and ", shape_str(w));
  require(x[1] == w[1], ErrorCode::kShapeMismatch, op, ": channel mismatch between ", shape_str(x),
          " and ", shape_str(w));
  require(g.stride >= 1 && g.padding >= 0, ErrorCode::kInvalidArgument, op, ": bad stride/padding");
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0};
  d.ho = (d.h + 2 * g.padding - d.kh) / g.stride + 1;
  d.wo = (d.w + 2 * g.padding - d.kw) / g.stride + 1;
  require(d.ho > 0 && d.wo > 0, ErrorCode::kShapeMismatch, op, ": kernel ", shape_str(w),
          " larger than padded input ", shape_str(x));
  return d;
}

void im2col(const double* x, const ConvDims& d, Conv2dGeometry g, double* cols) {
  const std::int64_t spatial = d.ho * d.wo;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        double* row = cols + ((c * d.kh + ki) * d.kw + kj) * spatial;
        for (std::int64_t oi = 0; oi < d.ho; ++oi) {
          const std::int64_t ii = oi * g.stride - g.padding + ki;
          for (std::int64_t oj = 0; oj < d.wo; ++oj) {
            const std::int64_t jj = oj * g.stride - g.padding + kj;
            row[oi * d.wo + oj] = (ii >= 0 && ii < d.h && jj >= 0 && jj < d.w)
                                      ? x[(c * d.h + ii) * d.w + jj]
                                      : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, Conv2dGeometry g, double* x) {
  const std::int64_t spatial = d.ho * d.wo;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * spatial;
        for (std::int64_t oi = 0; oi < d.ho; ++oi) {
          const std::int64_t ii = oi * g.stride - g.padding + ki;
          if (ii < 0 || ii >= d.h) continue;
          for (std::int64_t oj = 0; oj < d.wo; ++oj) {
            const std::int64_t jj = oj * g.stride - g.padding + kj;
            if (jj < 0 || jj >= d.w) continue;
            x[(c * d.h + ii) * d.w + jj] += row[oi * d.wo + oj];
          }
        }
      }
    }
  }
}

Tensor conv_forward_kernel(const Tensor& x, const Tensor& w, Conv2dGeometry g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g, "conv2d");
  const std::int64_t ckk = d.c * d.kh * d.kw;
  const std::int64_t spatial = d.ho * d.wo;
  Tensor out(Shape{d.n, d.o, d.ho, d.wo});
  std::vector<double> cols(static_cast<std::size_t>(ckk * spatial));
  ConstMapMatrix wm(w.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
    ConstMapMatrix cm(cols.data(), ckk, spatial);
    MapMatrix om(out.data().data() + n * d.o * spatial, d.o, spatial);
    om.noalias() = wm * cm;
  }
  return out;
}

Tensor conv_input_grad_kernel(const Tensor& gy, const Tensor& w, const Shape& x_shape,
                              Conv2dGeometry g) {
  const ConvDims d = conv_dims(x_shape, w.shape(), g, "conv2d_input_grad");
  require(gy.shape() == Shape{d.n, d.o, d.ho, d.wo}, ErrorCode::kShapeMismatch,
          "conv2d_input_grad: grad shape ", shape_str(gy.shape()), " inconsistent with input ",
          shape_str(x_shape));
  const std::int64_t ckk = d.c * d.kh * d.kw;
  const std::int64_t spatial = d.ho * d.wo;
  Tensor gx(x_shape, 0.0);
  std::vector<double> cols(static_cast<std::size_t>(ckk * spatial));
  ConstMapMatrix wm(w.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    ConstMapMatrix gm(gy.data().data() + n * d.o * spatial, d.o, spatial);
    MapMatrix cm(cols.data(), ckk, spatial);
    cm.noalias() = wm.transpose() * gm;
    col2im_add(cols.data(), d, g, gx.data().data() + n * d.c * d.h * d.w);
  }
  return gx;
}

Tensor conv_weight_grad_kernel(const Tensor& x, const Tensor& gy, const Shape& w_shape,
                               Conv2dGeometry g) {
  const ConvDims d = conv_dims(x.shape(), w_shape, g, "conv2d_weight_grad");
  require(gy.shape() == Shape{d.n, d.o, d.ho, d.wo}, ErrorCode::kShapeMismatch,
          "conv2d_weight_grad: grad shape ", shape_str(gy.shape()), " inconsistent with input ",
          shape_str(x.shape()));
  const std::int64_t ckk = d.c * d.kh * d.kw;
  const std::int64_t spatial = d.ho * d.wo;
  Tensor gw(w_shape, 0.0);
  std::vector<double> cols(static_cast<std::size_t>(ckk * spatial));
  MapMatrix wm(gw.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
    ConstMapMatrix cm(cols.data(), ckk, spatial);
    ConstMapMatrix gm(gy.data().data() + n * d.o * spatial, d.o, spatial);
    wm.noalias() += gm * cm.transpose();
  }
  return gw;
}

}  // namespace

// ---- Var / engine -------------------------------------------------------------

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var Var::constant(Tensor value) { return make(std::move(value), {}, nullptr, "constant"); }

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v = make(std::move(value), {}, nullptr, "leaf");
  v.node_->requires_grad = requires_grad;
  return v;
}

Var Var::make(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  if (!value.all_finite()) {
    fail(ErrorCode::kNonFinite, op, ": non-finite output of shape ", shape_str(value.shape()));
  }
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  v.node_->op = op;
  v.node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  bool tracked = false;
  if (t_grad_enabled && backward) {
    for (const auto& p : parents) tracked = tracked || p.requires_grad();
  }
  if (tracked) {
    v.node_->requires_grad = true;
    v.node_->parents = std::move(parents);
    v.node_->backward = std::move(backward);
  }
  return v;
}

std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph) {
  require(root.defined(), ErrorCode::kInvalidArgument, "backward: undefined root");
  require(root.value().size() == 1, ErrorCode::kShapeMismatch, "backward: root must be scalar, got ",
          shape_str(root.shape()));
  std::unordered_map<const Node*, std::size_t> wrt_index;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    require(wrt[i].defined() && wrt[i].requires_grad(), ErrorCode::kState,
            "backward: gradient requested for untracked input #", i);
    wrt_index.emplace(wrt[i].node(), i);
  }

  auto zeros_like = [](const Var& v) { return Var::constant(Tensor(v.shape(), 0.0)); };
  std::vector<Var> result(wrt.size());
  if (!root.requires_grad()) {
    for (std::size_t i = 0; i < wrt.size(); ++i) result[i] = zeros_like(wrt[i]);
    return result;
  }

  // Collect the tracked subgraph and mark nodes from which some wrt input is
  // reachable; only those need gradients.
  std::vector<Var> nodes;
  std::unordered_map<const Node*, bool> leads;
  {
    std::unordered_set<const Node*> seen;
    std::vector<Var> stack{root};
    seen.insert(root.node());
    while (!stack.empty()) {
      Var v = stack.back();
      stack.pop_back();
      nodes.push_back(v);
      for (const auto& p : v.node()->parents) {
        if (p.requires_grad() && seen.insert(p.node()).second) stack.push_back(p);
      }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const Var& a, const Var& b) { return a.node()->seq < b.node()->seq; });
    for (const auto& v : nodes) {
      bool l = wrt_index.count(v.node()) > 0;
      for (const auto& p : v.node()->parents) {
        auto it = leads.find(p.node());
        l = l || (it != leads.end() && it->second);
      }
      leads[v.node()] = l;
    }
  }

  GradModeScope scope(create_graph);
  std::unordered_map<const Node*, Var> grads;
  grads[root.node()] = Var::constant(Tensor(root.shape(), 1.0));
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Node* node = it->node();
    auto g = grads.find(node);
    if (g == grads.end() || !node->backward) continue;
    std::vector<bool> needs(node->parents.size());
    bool any = false;
    for (std::size_t i = 0; i < needs.size(); ++i) {
      const auto& p = node->parents[i];
      needs[i] = p.requires_grad() && leads[p.node()];
      any = any || needs[i];
    }
    if (!any) continue;
    Var gout = g->second;
    std::vector<Var> pg = node->backward(*it, gout, needs);
    for (std::size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i]) continue;
      const Var& p = node->parents[i];
      require(pg.at(i).defined() && pg[i].shape() == p.shape(), ErrorCode::kInternal, "backward of ",
              node->op, " produced a gradient of wrong shape for input #", i);
      auto existing = grads.find(p.node());
      if (existing == grads.end()) {
        grads.emplace(p.node(), pg[i]);
      } else {
        existing->second = add(existing->second, pg[i]);
      }
    }
    if (!wrt_index.count(node)) grads.erase(node);
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto g = grads.find(wrt[i].node());
    result[i] = g == grads.end() ? zeros_like(wrt[i]) : g->second;
  }
  return result;
}

std::vector<Tensor> grad_values(const Var& root, std::span<const Var> wrt) {
  auto gs = grad(root, wrt, false);
  std::vector<Tensor> out;
  out.reserve(gs.size());
  for (auto& g : gs) out.push_back(g.value());
  return out;
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return Var::make(binary_kernel(a.value(), b.value(), std::plus<>{}, "add"), {a, b},
                   [](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{needs[0] ? sum_to(g, ps[0].shape()) : Var{},
                                             needs[1] ? sum_to(g, ps[1].shape()) : Var{}};
                   },
                   "add");
}

Var sub(const Var& a, const Var& b) {
  return Var::make(binary_kernel(a.value(), b.value(), std::minus<>{}, "sub"), {a, b},
                   [](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{needs[0] ? sum_to(g, ps[0].shape()) : Var{},
                                             needs[1] ? sum_to(neg(g), ps[1].shape()) : Var{}};
                   },
                   "sub");
}

Var mul(const Var& a, const Var& b) {
  return Var::make(binary_kernel(a.value(), b.value(), std::multiplies<>{}, "mul"), {a, b},
                   [](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{
                         needs[0] ? sum_to(mul(g, ps[1]), ps[0].shape()) : Var{},
                         needs[1] ? sum_to(mul(g, ps[0]), ps[1].shape()) : Var{}};
                   },
                   "mul");
}

Var div(const Var& a, const Var& b) {
  return Var::make(binary_kernel(a.value(), b.value(), std::divides<>{}, "div"), {a, b},
                   [](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     Var ga, gb;
                     if (needs[0]) ga = sum_to(div(g, ps[1]), ps[0].shape());
                     if (needs[1]) gb = sum_to(neg(div(mul(g, out), ps[1])), ps[1].shape());
                     return std::vector<Var>{ga, gb};
                   },
                   "div");
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var scale(const Var& x, double c) {
  return Var::make(unary_kernel(x.value(), [c](double v) { return c * v; }), {x},
                   [c](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{scale(g, c)};
                   },
                   "scale");
}

Var add_scalar(const Var& x, double c) {
  return Var::make(unary_kernel(x.value(), [c](double v) { return v + c; }), {x},
                   [](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{g};
                   },
                   "add_scalar");
}

Var square(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return v * v; }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{mul(g, scale(out.node()->parents[0], 2.0))};
                   },
                   "square");
}

Var abs(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return std::fabs(v); }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     Tensor sign = unary_kernel(out.node()->parents[0].value(), [](double v) {
                       return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                     });
                     return std::vector<Var>{mul(g, Var::constant(std::move(sign)))};
                   },
                   "abs");
}

Var relu(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     Tensor mask = unary_kernel(out.node()->parents[0].value(),
                                                [](double v) { return v > 0.0 ? 1.0 : 0.0; });
                     return std::vector<Var>{mul(g, Var::constant(std::move(mask)))};
                   },
                   "relu");
}

namespace {

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Var sigmoid(const Var& x) {
  return Var::make(unary_kernel(x.value(), stable_sigmoid), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     // sigma' = sigma (1 - sigma)
                     Var one_minus = add_scalar(neg(out), 1.0);
                     return std::vector<Var>{mul(g, mul(out, one_minus))};
                   },
                   "sigmoid");
}

Var exp(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return std::exp(v); }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{mul(g, out)};
                   },
                   "exp");
}

Var log(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return std::log(v); }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{div(g, out.node()->parents[0])};
                   },
                   "log");
}

Var sqrt(const Var& x) {
  return Var::make(unary_kernel(x.value(), [](double v) { return std::sqrt(v); }), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{div(scale(g, 0.5), out)};
                   },
                   "sqrt");
}

Var pow(const Var& x, double p) {
  return Var::make(unary_kernel(x.value(), [p](double v) { return std::pow(v, p); }), {x},
                   [p](const Var& out, const Var& g, const std::vector<bool>&) {
                     const Var& in = out.node()->parents[0];
                     return std::vector<Var>{mul(g, scale(pow(in, p - 1.0), p))};
                   },
                   "pow");
}

// ---- shape / reductions ---------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  if (x.shape() == shape) return x;
  return Var::make(x.value().reshaped(std::move(shape)), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{reshape(g, out.node()->parents[0].shape())};
                   },
                   "reshape");
}

Var broadcast_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape check = broadcast_shape(x.shape(), shape, "broadcast_to");
  require(check == shape, ErrorCode::kShapeMismatch, "broadcast_to: ", shape_str(x.shape()),
          " does not broadcast to ", shape_str(shape));
  return Var::make(broadcast_kernel(x.value(), shape), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{sum_to(g, out.node()->parents[0].shape())};
                   },
                   "broadcast_to");
}

Var sum_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape check = broadcast_shape(shape, x.shape(), "sum_to");
  require(check == x.shape(), ErrorCode::kShapeMismatch, "sum_to: ", shape_str(x.shape()),
          " cannot be reduced to ", shape_str(shape));
  return Var::make(reduce_to(x.value(), shape), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{broadcast_to(g, out.node()->parents[0].shape())};
                   },
                   "sum_to");
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return Var::make(Tensor::scalar(s), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{broadcast_to(g, out.node()->parents[0].shape())};
                   },
                   "sum");
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_axes(const Var& x, const std::vector<int>& axes, bool keepdim) {
  const auto norm = normalize_axes(axes, x.shape().size(), "sum_axes");
  const Shape kept = keepdim_shape(x.shape(), norm);
  Var reduced = sum_to(x, kept);
  return keepdim ? reduced : reshape(reduced, dropdim_shape(x.shape(), norm));
}

Var mean_axes(const Var& x, const std::vector<int>& axes, bool keepdim) {
  const auto norm = normalize_axes(axes, x.shape().size(), "mean_axes");
  std::int64_t count = 1;
  for (int a : norm) count *= x.shape()[static_cast<std::size_t>(a)];
  return scale(sum_axes(x, norm, keepdim), 1.0 / static_cast<double>(count));
}

Var transpose(const Var& x) {
  require(x.shape().size() == 2, ErrorCode::kShapeMismatch, "transpose: expected 2-D, got ",
          shape_str(x.shape()));
  const auto r = x.shape()[0];
  const auto c = x.shape()[1];
  Tensor out(Shape{c, r});
  MapMatrix(out.data().data(), c, r) = ConstMapMatrix(x.value().data().data(), r, c).transpose();
  return Var::make(std::move(out), {x},
                   [](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{transpose(g)};
                   },
                   "transpose");
}

Var matmul(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    fail(ErrorCode::kShapeMismatch, "matmul: incompatible shapes ", shape_str(sa), " and ",
         shape_str(sb));
  }
  Tensor out(Shape{sa[0], sb[1]});
  MapMatrix(out.data().data(), sa[0], sb[1]).noalias() =
      ConstMapMatrix(a.value().data().data(), sa[0], sa[1]) *
      ConstMapMatrix(b.value().data().data(), sb[0], sb[1]);
  return Var::make(std::move(out), {a, b},
                   [](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{needs[0] ? matmul(g, transpose(ps[1])) : Var{},
                                             needs[1] ? matmul(transpose(ps[0]), g) : Var{}};
                   },
                   "matmul");
}

Var softmax(const Var& x) {
  require(!x.shape().empty(), ErrorCode::kShapeMismatch, "softmax: scalar input");
  const auto k = static_cast<std::size_t>(x.shape().back());
  Tensor out(x.shape());
  const auto& in = x.value();
  for (std::size_t r = 0; r < in.size() / k; ++r) {
    const double* row = in.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (o[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) o[j] /= s;
  }
  return Var::make(std::move(out), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     Var dot = sum_axes(mul(g, out), {-1}, true);
                     return std::vector<Var>{mul(out, sub(g, dot))};
                   },
                   "softmax");
}

Var log_softmax(const Var& x) {
  require(!x.shape().empty(), ErrorCode::kShapeMismatch, "log_softmax: scalar input");
  const auto k = static_cast<std::size_t>(x.shape().back());
  Tensor out(x.shape());
  const auto& in = x.value();
  for (std::size_t r = 0; r < in.size() / k; ++r) {
    const double* row = in.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) o[j] = row[j] - lse;
  }
  return Var::make(std::move(out), {x},
                   [](const Var& out, const Var& g, const std::vector<bool>&) {
                     Var total = sum_axes(g, {-1}, true);
                     return std::vector<Var>{sub(g, mul(exp(out), total))};
                   },
                   "log_softmax");
}

Var slice(const Var& x, std::int64_t offset, std::int64_t length) {
  require(x.shape().size() == 1, ErrorCode::kShapeMismatch, "slice: expected 1-D, got ",
          shape_str(x.shape()));
  const std::int64_t total = x.shape()[0];
  require(offset >= 0 && length > 0 && offset + length <= total, ErrorCode::kInvalidArgument,
          "slice: range [", offset, ", ", offset + length, ") outside length ", total);
  const auto first = x.value().values().begin() + offset;
  Tensor out(Shape{length}, std::vector<double>(first, first + length));
  return Var::make(std::move(out), {x},
                   [offset, total](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{embed(g, offset, total)};
                   },
                   "slice");
}

Var embed(const Var& x, std::int64_t offset, std::int64_t total) {
  require(x.shape().size() == 1, ErrorCode::kShapeMismatch, "embed: expected 1-D, got ",
          shape_str(x.shape()));
  const std::int64_t length = x.shape()[0];
  require(offset >= 0 && offset + length <= total, ErrorCode::kInvalidArgument, "embed: range [",
          offset, ", ", offset + length, ") outside length ", total);
  Tensor out(Shape{total}, 0.0);
  std::copy(x.value().values().begin(), x.value().values().end(), out.values().begin() + offset);
  return Var::make(std::move(out), {x},
                   [offset, length](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{slice(g, offset, length)};
                   },
                   "embed");
}

// ---- convolution / pooling ---------------------------------------------------------

Var conv2d(const Var& x, const Var& w, Conv2dGeometry geom) {
  return Var::make(conv_forward_kernel(x.value(), w.value(), geom), {x, w},
                   [geom](const Var& out, const Var& g, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{
                         needs[0] ? conv2d_input_grad(g, ps[1], ps[0].shape(), geom) : Var{},
                         needs[1] ? conv2d_weight_grad(ps[0], g, ps[1].shape(), geom) : Var{}};
                   },
                   "conv2d");
}

Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape,
                      Conv2dGeometry geom) {
  return Var::make(conv_input_grad_kernel(grad_out.value(), w.value(), input_shape, geom),
                   {grad_out, w},
                   [geom](const Var& out, const Var& u, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{
                         needs[0] ? conv2d(u, ps[1], geom) : Var{},
                         needs[1] ? conv2d_weight_grad(u, ps[0], ps[1].shape(), geom) : Var{}};
                   },
                   "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape,
                       Conv2dGeometry geom) {
  return Var::make(conv_weight_grad_kernel(x.value(), grad_out.value(), weight_shape, geom),
                   {x, grad_out},
                   [geom](const Var& out, const Var& u, const std::vector<bool>& needs) {
                     const auto& ps = out.node()->parents;
                     return std::vector<Var>{
                         needs[0] ? conv2d_input_grad(ps[1], u, ps[0].shape(), geom) : Var{},
                         needs[1] ? conv2d(ps[0], u, geom) : Var{}};
                   },
                   "conv2d_weight_grad");
}

namespace {

void check_pool(const Shape& s, int k, const char* op) {
  require(s.size() == 4, ErrorCode::kShapeMismatch, op, ": expected 4-D input, got ", shape_str(s));
  require(k >= 1 && s[2] % k == 0 && s[3] % k == 0, ErrorCode::kShapeMismatch, op, ": window ", k,
          " does not tile ", shape_str(s));
}

}  // namespace

Var avg_pool2d(const Var& x, int k) {
  const Shape& s = x.shape();
  check_pool(s, k, "avg_pool2d");
  const std::int64_t ho = s[2] / k, wo = s[3] / k;
  Tensor out(Shape{s[0], s[1], ho, wo}, 0.0);
  const double inv = 1.0 / (k * k);
  const auto& in = x.value();
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    for (std::int64_t i = 0; i < s[2]; ++i) {
      for (std::int64_t j = 0; j < s[3]; ++j) {
        out[static_cast<std::size_t>((p * ho + i / k) * wo + j / k)] +=
            inv * in[static_cast<std::size_t>((p * s[2] + i) * s[3] + j)];
      }
    }
  }
  return Var::make(std::move(out), {x},
                   [k](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{avg_unpool2d(g, k)};
                   },
                   "avg_pool2d");
}

Var avg_unpool2d(const Var& x, int k) {
  const Shape& s = x.shape();
  require(s.size() == 4, ErrorCode::kShapeMismatch, "avg_unpool2d: expected 4-D input, got ",
          shape_str(s));
  const std::int64_t h = s[2] * k, w = s[3] * k;
  Tensor out(Shape{s[0], s[1], h, w});
  const double inv = 1.0 / (k * k);
  const auto& in = x.value();
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        out[static_cast<std::size_t>((p * h + i) * w + j)] =
            inv * in[static_cast<std::size_t>((p * s[2] + i / k) * s[3] + j / k)];
      }
    }
  }
  return Var::make(std::move(out), {x},
                   [k](const Var&, const Var& g, const std::vector<bool>&) {
                     return std::vector<Var>{avg_pool2d(g, k)};
                   },
                   "avg_unpool2d");
}

// ---- composites ----------------------------------------------------------------

Var l2_norm(const Var& x) { return sqrt(sum(square(x))); }

Var mse(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorCode::kShapeMismatch, "mse: ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  return mean(square(sub(a, b)));
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> labels) {
  const Shape& s = logits.shape();
  require(s.size() == 2 && static_cast<std::size_t>(s[0]) == labels.size(),
          ErrorCode::kShapeMismatch, "cross_entropy: logits ", shape_str(s), " vs ", labels.size(),
          " labels");
  Tensor onehot(s, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < s[1], ErrorCode::kInvalidArgument,
            "cross_entropy: label ", labels[i], " out of range for ", s[1], " classes");
    onehot[i * static_cast<std::size_t>(s[1]) + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Var picked = mul(Var::constant(std::move(onehot)), log_softmax(logits));
  return scale(sum(picked), -1.0 / static_cast<double>(s[0]));
}

// ---- finite differences -----------------------------------------------------

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h,
                        std::span<const std::size_t> indices) {
  require(h > 0.0, ErrorCode::kInvalidArgument, "finite_diff_grad: step must be positive");
  Tensor out(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i : indices) {
    require(i < x.size(), ErrorCode::kInvalidArgument, "finite_diff_grad: index ", i,
            " out of range");
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  std::vector<std::size_t> all(x.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return finite_diff_grad(f, x, h, all);
}

}  // namespace cts::ad
