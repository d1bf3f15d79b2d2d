#include "dm3d/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "dm3d/fft.hpp"

namespace dm3d::ad {

namespace {

std::atomic<std::uint64_t> g_seq{0};
thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> new_node(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = ++g_seq;
  return n;
}

bool wants_grad(const std::vector<Var>& parents) {
  if (!g_grad_enabled) return false;
  for (const Var& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

/// Builds the output node; make_closure(Node* self) -> backward fn is only
/// invoked (and parents only retained) when recording.
template <class F>
Var attach(Tensor value, std::vector<Var> parents, F&& make_closure) {
  auto out = new_node(std::move(value));
  if (wants_grad(parents)) {
    out->requires_grad = true;
    out->parents.reserve(parents.size());
    for (const Var& p : parents) out->parents.push_back(p.node());
    out->backprop = make_closure(out.get());
  }
  return Var(out);
}

struct BcShape {
  std::int64_t rows, cols;
};

BcShape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  const bool rows_ok = a.rows() == b.rows() || a.rows() == 1 || b.rows() == 1;
  const bool cols_ok = a.cols() == b.cols() || a.cols() == 1 || b.cols() == 1;
  if (!rows_ok || !cols_ok)
    throw std::invalid_argument(std::string(op) + ": shapes not broadcastable");
  return {std::max(a.rows(), b.rows()), std::max(a.cols(), b.cols())};
}

template <class F>
Tensor bc_eval(const Tensor& a, const Tensor& b, const char* op, F&& f) {
  const BcShape s = broadcast_shape(a, b, op);
  Tensor out(s.rows, s.cols);
  for (std::int64_t r = 0; r < s.rows; ++r) {
    const std::int64_t ar = a.rows() == 1 ? 0 : r;
    const std::int64_t br = b.rows() == 1 ? 0 : r;
    for (std::int64_t c = 0; c < s.cols; ++c) {
      const std::int64_t ac = a.cols() == 1 ? 0 : c;
      const std::int64_t bc = b.cols() == 1 ? 0 : c;
      out(r, c) = f(a(ar, ac), b(br, bc));
    }
  }
  return out;
}

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
}

/// Accumulates g(r,c)*df(a,b) into the (possibly broadcast-reduced) grad of
/// the given parent.
template <class DF>
void bc_accumulate(Node& parent, const Tensor& g, const Tensor& a,
                   const Tensor& b, DF&& df) {
  if (!parent.requires_grad) return;
  ensure_grad(parent);
  Tensor& pg = parent.grad;
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    const std::int64_t ar = a.rows() == 1 ? 0 : r;
    const std::int64_t br = b.rows() == 1 ? 0 : r;
    const std::int64_t pr = pg.rows() == 1 ? 0 : r;
    for (std::int64_t c = 0; c < g.cols(); ++c) {
      const std::int64_t ac = a.cols() == 1 ? 0 : c;
      const std::int64_t bc = b.cols() == 1 ? 0 : c;
      const std::int64_t pc = pg.cols() == 1 ? 0 : c;
      pg(pr, pc) += g(r, c) * df(a(ar, ac), b(br, bc));
    }
  }
}

template <class F, class DFA, class DFB>
Var binary_op(const Var& a, const Var& b, const char* name, F&& f, DFA&& dfa,
              DFB&& dfb) {
  Tensor v = bc_eval(a.value(), b.value(), name, f);
  return attach(std::move(v), {a, b}, [=](Node* self) {
    auto an = a.node();
    auto bn = b.node();
    return [self, an, bn, dfa, dfb] {
      bc_accumulate(*an, self->grad, an->value, bn->value, dfa);
      bc_accumulate(*bn, self->grad, bn->value, an->value,
                    [&](double bv, double av) { return dfb(av, bv); });
    };
  });
}

template <class F, class DF>
Var unary_op(const Var& a, F&& f, DF&& df) {
  Tensor v(a.rows(), a.cols());
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = f(a.value()[i]);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, df] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t i = 0; i < self->grad.size(); ++i)
        an->grad[i] += self->grad[i] * df(an->value[i]);
    };
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double zoh_phi_value(double x) {
  // Documented series fallback for |dt*A| < 1e-6; expm1 keeps the "exact"
  // branch free of cancellation.
  if (std::abs(x) < 1e-6) return 1.0 + x / 2.0 + x * x / 6.0;
  return std::expm1(x) / x;
}

double zoh_phi_deriv(double x) {
  if (std::abs(x) < 1e-3)
    return 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
  return (std::exp(x) * (x - 1.0) + 1.0) / (x * x);
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  ensure_grad(*this);
  for (std::int64_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void Var::set_value(Tensor v) {
  if (node_->backprop)
    throw std::logic_error("set_value: only leaves may be reassigned");
  node_->value = std::move(v);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

Var make_param(Tensor value) {
  auto n = new_node(std::move(value));
  n->requires_grad = true;
  return Var(n);
}

Var make_constant(Tensor value) { return Var(new_node(std::move(value))); }

void backward(const Var& loss) {
  if (loss.value().size() != 1)
    throw std::invalid_argument("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative DFS; seq order is a valid topological order by construction.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  loss.node()->accumulate(Tensor::full(1, 1, 1.0));
  for (Node* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop();
}

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var divide(const Var& a, const Var& b) {
  return binary_op(
      a, b, "divide", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var neg(const Var& a) {
  return unary_op(a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Var scale(const Var& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var exp_(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double x) { return std::exp(x); });
}

Var sqrt_(const Var& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double x) { return 0.5 / std::sqrt(x); });
}

Var tanh_(const Var& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double x) {
                    const double t = std::tanh(x);
                    return 1.0 - t * t;
                  });
}

Var sigmoid_(const Var& a) {
  return unary_op(a, [](double x) { return stable_sigmoid(x); },
                  [](double x) {
                    const double s = stable_sigmoid(x);
                    return s * (1.0 - s);
                  });
}

Var relu_(const Var& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu_(const Var& a) {
  return unary_op(a,
                  [](double x) {
                    return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
                  },
                  [](double x) {
                    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  });
}

Var silu_(const Var& a) {
  return unary_op(a, [](double x) { return x * stable_sigmoid(x); },
                  [](double x) {
                    const double s = stable_sigmoid(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Var softplus_(const Var& a) {
  return unary_op(a, [](double x) { return stable_softplus(x); },
                  [](double x) { return stable_sigmoid(x); });
}

Var clamp_min_(const Var& a, double floor) {
  return unary_op(a, [floor](double x) { return x > floor ? x : floor; },
                  [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

Var zoh_phi(const Var& a) {
  return unary_op(a, [](double x) { return zoh_phi_value(x); },
                  [](double x) { return zoh_phi_deriv(x); });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  return attach(Tensor::full(1, 1, s), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      const double g = self->grad(0, 0);
      for (std::int64_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    };
  });
}

Var row_sum(const Var& a) {
  Tensor v(a.rows(), 1);
  for (std::int64_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < a.cols(); ++c) s += a.value()(r, c);
    v(r, 0) = s;
  }
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          an->grad(r, c) += self->grad(r, 0);
    };
  });
}

Var col_sum(const Var& a) {
  Tensor v(1, a.cols());
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) v(0, c) += a.value()(r, c);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          an->grad(r, c) += self->grad(0, c);
    };
  });
}

Var col_mean(const Var& a) { return scale(col_sum(a), 1.0 / static_cast<double>(a.rows())); }

Var matmul(const Var& a, const Var& b) {
  Tensor v = dm3d::matmul(a.value(), b.value());
  return attach(std::move(v), {a, b}, [=](Node* self) {
    auto an = a.node();
    auto bn = b.node();
    return [self, an, bn] {
      if (an->requires_grad)
        an->accumulate(dm3d::matmul(self->grad, dm3d::transpose(bn->value)));
      if (bn->requires_grad)
        bn->accumulate(dm3d::matmul(dm3d::transpose(an->value), self->grad));
    };
  });
}

Var transpose(const Var& a) {
  return attach(dm3d::transpose(a.value()), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an] {
      if (an->requires_grad) an->accumulate(dm3d::transpose(self->grad));
    };
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::int64_t rows = parts.front().rows();
  std::int64_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Tensor v(rows, cols);
  std::int64_t off = 0;
  for (const Var& p : parts) {
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < p.cols(); ++c) v(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return attach(std::move(v), parts, [=](Node* self) {
    std::vector<std::shared_ptr<Node>> ns;
    for (const Var& p : parts) ns.push_back(p.node());
    return [self, ns] {
      std::int64_t off2 = 0;
      for (const auto& n : ns) {
        if (n->requires_grad) {
          ensure_grad(*n);
          for (std::int64_t r = 0; r < n->grad.rows(); ++r)
            for (std::int64_t c = 0; c < n->grad.cols(); ++c)
              n->grad(r, c) += self->grad(r, off2 + c);
        }
        off2 += n->value.cols();
      }
    };
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::int64_t cols = parts.front().cols();
  std::int64_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p.rows();
  }
  Tensor v(rows, cols);
  std::int64_t off = 0;
  for (const Var& p : parts) {
    for (std::int64_t r = 0; r < p.rows(); ++r)
      for (std::int64_t c = 0; c < cols; ++c) v(off + r, c) = p.value()(r, c);
    off += p.rows();
  }
  return attach(std::move(v), parts, [=](Node* self) {
    std::vector<std::shared_ptr<Node>> ns;
    for (const Var& p : parts) ns.push_back(p.node());
    return [self, ns] {
      std::int64_t off2 = 0;
      for (const auto& n : ns) {
        if (n->requires_grad) {
          ensure_grad(*n);
          for (std::int64_t r = 0; r < n->grad.rows(); ++r)
            for (std::int64_t c = 0; c < n->grad.cols(); ++c)
              n->grad(r, c) += self->grad(off2 + r, c);
        }
        off2 += n->value.rows();
      }
    };
  });
}

Var slice_cols(const Var& a, std::int64_t c0, std::int64_t c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  Tensor v(a.rows(), c1 - c0);
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = c0; c < c1; ++c) v(r, c - c0) = a.value()(r, c);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, c0] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < self->grad.rows(); ++r)
        for (std::int64_t c = 0; c < self->grad.cols(); ++c)
          an->grad(r, c0 + c) += self->grad(r, c);
    };
  });
}

Var slice_rows(const Var& a, std::int64_t r0, std::int64_t r1) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  Tensor v(r1 - r0, a.cols());
  for (std::int64_t r = r0; r < r1; ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) v(r - r0, c) = a.value()(r, c);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, r0] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < self->grad.rows(); ++r)
        for (std::int64_t c = 0; c < self->grad.cols(); ++c)
          an->grad(r0 + r, c) += self->grad(r, c);
    };
  });
}

Var gather_rows(const Var& a, std::vector<std::int64_t> idx) {
  Tensor v(static_cast<std::int64_t>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows())
      throw std::out_of_range("gather_rows: index out of range");
    for (std::int64_t c = 0; c < a.cols(); ++c)
      v(static_cast<std::int64_t>(i), c) = a.value()(idx[i], c);
  }
  return attach(std::move(v), {a}, [=, idx = std::move(idx)](Node* self) {
    auto an = a.node();
    return [self, an, idx] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          an->grad(idx[i], c) += self->grad(static_cast<std::int64_t>(i), c);
    };
  });
}

Var segment_sum_rows(const Var& a, std::int64_t group) {
  if (group <= 0 || a.rows() % group != 0)
    throw std::invalid_argument("segment_sum_rows: rows not divisible by group");
  const std::int64_t n = a.rows() / group;
  Tensor v(n, a.cols());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < group; ++k)
      for (std::int64_t c = 0; c < a.cols(); ++c)
        v(i, c) += a.value()(i * group + k, c);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, group] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          an->grad(r, c) += self->grad(r / group, c);
    };
  });
}

Var permute_cols(const Var& a, std::vector<std::int64_t> perm) {
  if (static_cast<std::int64_t>(perm.size()) != a.cols())
    throw std::invalid_argument("permute_cols: perm size mismatch");
  Tensor v(a.rows(), a.cols());
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) v(r, c) = a.value()(r, perm[c]);
  return attach(std::move(v), {a}, [=, perm = std::move(perm)](Node* self) {
    auto an = a.node();
    return [self, an, perm] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          an->grad(r, perm[c]) += self->grad(r, c);
    };
  });
}

Var reverse_cols(const Var& a) {
  std::vector<std::int64_t> perm(a.cols());
  for (std::int64_t c = 0; c < a.cols(); ++c) perm[c] = a.cols() - 1 - c;
  return permute_cols(a, std::move(perm));
}

Var repeat_cols_interleaved(const Var& a, std::int64_t k) {
  Tensor v(a.rows(), a.cols() * k);
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c)
      for (std::int64_t s = 0; s < k; ++s) v(r, c * k + s) = a.value()(r, c);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, k] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < an->grad.cols(); ++c)
          for (std::int64_t s = 0; s < k; ++s)
            an->grad(r, c) += self->grad(r, c * k + s);
    };
  });
}

Var tile_cols(const Var& a, std::int64_t k) {
  const std::int64_t s_cols = a.cols();
  Tensor v(a.rows(), s_cols * k);
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < k; ++c)
      for (std::int64_t s = 0; s < s_cols; ++s)
        v(r, c * s_cols + s) = a.value()(r, s);
  return attach(std::move(v), {a}, [=](Node* self) {
    auto an = a.node();
    return [self, an, k, s_cols] {
      if (!an->requires_grad) return;
      ensure_grad(*an);
      for (std::int64_t r = 0; r < an->grad.rows(); ++r)
        for (std::int64_t c = 0; c < k; ++c)
          for (std::int64_t s = 0; s < s_cols; ++s)
            an->grad(r, s) += self->grad(r, c * s_cols + s);
    };
  });
}

Var mul_outer_cols(const Var& x, const Var& m) {
  if (x.cols() != m.rows())
    throw std::invalid_argument("mul_outer_cols: channel mismatch");
  const std::int64_t C = x.cols(), S = m.cols();
  Tensor v(x.rows(), C * S);
  for (std::int64_t t = 0; t < x.rows(); ++t)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t s = 0; s < S; ++s)
        v(t, c * S + s) = x.value()(t, c) * m.value()(c, s);
  return attach(std::move(v), {x, m}, [=](Node* self) {
    auto xn = x.node();
    auto mn = m.node();
    return [self, xn, mn, C, S] {
      if (xn->requires_grad) {
        ensure_grad(*xn);
        for (std::int64_t t = 0; t < xn->grad.rows(); ++t)
          for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::int64_t s = 0; s < S; ++s)
              acc += self->grad(t, c * S + s) * mn->value(c, s);
            xn->grad(t, c) += acc;
          }
      }
      if (mn->requires_grad) {
        ensure_grad(*mn);
        for (std::int64_t t = 0; t < self->grad.rows(); ++t)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t s = 0; s < S; ++s)
              mn->grad(c, s) += self->grad(t, c * S + s) * xn->value(t, c);
      }
    };
  });
}

Var conv1d_depthwise(const Var& x, const Var& kernel, const Var& bias,
                     std::int64_t pad_left) {
  const std::int64_t L = x.rows(), C = x.cols(), W = kernel.rows();
  if (kernel.cols() != C || bias.cols() != C || bias.rows() != 1)
    throw std::invalid_argument("conv1d_depthwise: shape mismatch");
  Tensor v(L, C);
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = bias.value()(0, c);
      for (std::int64_t w = 0; w < W; ++w) {
        const std::int64_t src = t + w - pad_left;
        if (src >= 0 && src < L) acc += kernel.value()(w, c) * x.value()(src, c);
      }
      v(t, c) = acc;
    }
  return attach(std::move(v), {x, kernel, bias}, [=](Node* self) {
    auto xn = x.node();
    auto kn = kernel.node();
    auto bn = bias.node();
    return [self, xn, kn, bn, L, C, W, pad_left] {
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t c = 0; c < C; ++c) {
          const double g = self->grad(t, c);
          if (g == 0.0) continue;
          if (bn->requires_grad) {
            ensure_grad(*bn);
            bn->grad(0, c) += g;
          }
          for (std::int64_t w = 0; w < W; ++w) {
            const std::int64_t src = t + w - pad_left;
            if (src < 0 || src >= L) continue;
            if (kn->requires_grad) {
              ensure_grad(*kn);
              kn->grad(w, c) += g * xn->value(src, c);
            }
            if (xn->requires_grad) {
              ensure_grad(*xn);
              xn->grad(src, c) += g * kn->value(w, c);
            }
          }
        }
    };
  });
}

Var conv1d_grouped_pointwise(const Var& x, const Var& w, const Var& bias,
                             std::int64_t groups) {
  const std::int64_t L = x.rows(), cin = x.cols(), cout = w.rows();
  if (groups <= 0 || cin % groups != 0 || cout % groups != 0)
    throw std::invalid_argument(
        "conv1d_grouped_pointwise: channels not divisible by groups");
  const std::int64_t gin = cin / groups, gout = cout / groups;
  if (w.cols() != gin)
    throw std::invalid_argument("conv1d_grouped_pointwise: weight shape");
  const bool has_bias = bias.valid();
  if (has_bias && (bias.rows() != 1 || bias.cols() != cout))
    throw std::invalid_argument("conv1d_grouped_pointwise: bias shape");

  Tensor v(L, cout);
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t o = 0; o < cout; ++o) {
      const std::int64_t base = (o / gout) * gin;
      double acc = has_bias ? bias.value()(0, o) : 0.0;
      for (std::int64_t j = 0; j < gin; ++j)
        acc += w.value()(o, j) * x.value()(t, base + j);
      v(t, o) = acc;
    }
  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return attach(std::move(v), parents, [=](Node* self) {
    auto xn = x.node();
    auto wn = w.node();
    std::shared_ptr<Node> bn = has_bias ? bias.node() : nullptr;
    return [self, xn, wn, bn, L, cout, gin, gout] {
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t o = 0; o < cout; ++o) {
          const double g = self->grad(t, o);
          if (g == 0.0) continue;
          const std::int64_t base = (o / gout) * gin;
          if (bn && bn->requires_grad) {
            ensure_grad(*bn);
            bn->grad(0, o) += g;
          }
          for (std::int64_t j = 0; j < gin; ++j) {
            if (wn->requires_grad) {
              ensure_grad(*wn);
              wn->grad(o, j) += g * xn->value(t, base + j);
            }
            if (xn->requires_grad) {
              ensure_grad(*xn);
              xn->grad(t, base + j) += g * wn->value(o, j);
            }
          }
        }
    };
  });
}

namespace {

// Per-column forward DFT of a real matrix; writes [re | im].
void dft_columns(const Tensor& x, Tensor& re, Tensor& im) {
  const std::int64_t L = x.rows(), C = x.cols();
  std::vector<std::complex<double>> buf(L);
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < L; ++t) buf[t] = {x(t, c), 0.0};
    const auto out = dft(buf);
    for (std::int64_t t = 0; t < L; ++t) {
      re(t, c) = out[t].real();
      im(t, c) = out[t].imag();
    }
  }
}

}  // namespace

Var dft_seq(const Var& x) {
  const std::int64_t L = x.rows(), C = x.cols();
  Tensor re(L, C), im(L, C);
  dft_columns(x.value(), re, im);
  Tensor v(L, 2 * C);
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t c = 0; c < C; ++c) {
      v(t, c) = re(t, c);
      v(t, C + c) = im(t, c);
    }
  return attach(std::move(v), {x}, [=](Node* self) {
    auto xn = x.node();
    return [self, xn, L, C] {
      if (!xn->requires_grad) return;
      ensure_grad(*xn);
      // The DFT matrix is symmetric: grad_x = Re(F) g_re + Im(F) g_im, both
      // computable with forward transforms.
      Tensor gre(L, C), gim(L, C);
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t c = 0; c < C; ++c) {
          gre(t, c) = self->grad(t, c);
          gim(t, c) = self->grad(t, C + c);
        }
      Tensor re1(L, C), im1(L, C), re2(L, C), im2(L, C);
      dft_columns(gre, re1, im1);
      dft_columns(gim, re2, im2);
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t c = 0; c < C; ++c)
          xn->grad(t, c) += re1(t, c) + im2(t, c);
    };
  });
}

Var idft_real(const Var& reim) {
  const std::int64_t L = reim.rows();
  if (reim.cols() % 2 != 0)
    throw std::invalid_argument("idft_real: expected [re | im] packing");
  const std::int64_t C = reim.cols() / 2;
  Tensor v(L, C);
  std::vector<std::complex<double>> buf(L);
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < L; ++t)
      buf[t] = {reim.value()(t, c), reim.value()(t, C + c)};
    const auto out = idft(buf);
    for (std::int64_t t = 0; t < L; ++t) v(t, c) = out[t].real();
  }
  return attach(std::move(v), {reim}, [=](Node* self) {
    auto rn = reim.node();
    return [self, rn, L, C] {
      if (!rn->requires_grad) return;
      ensure_grad(*rn);
      Tensor re(L, C), im(L, C);
      dft_columns(self->grad, re, im);
      const double inv = 1.0 / static_cast<double>(L);
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t c = 0; c < C; ++c) {
          rn->grad(t, c) += inv * re(t, c);
          rn->grad(t, C + c) += inv * im(t, c);
        }
    };
  });
}

Var scan_recurrence(const Var& a_bar, const Var& b_u, const Var& c_proj,
                    std::int64_t channels) {
  const std::int64_t L = a_bar.rows();
  const std::int64_t CS = a_bar.cols();
  if (channels <= 0 || CS % channels != 0)
    throw std::invalid_argument("scan_recurrence: bad channel count");
  const std::int64_t S = CS / channels;
  if (!b_u.value().same_shape(a_bar.value()) || c_proj.rows() != L ||
      c_proj.cols() != S)
    throw std::invalid_argument("scan_recurrence: shape mismatch");

  const bool record = wants_grad({a_bar, b_u, c_proj});
  // h trajectory is only retained when a backward pass can need it.
  auto traj = record ? std::make_shared<std::vector<double>>(
                           static_cast<std::size_t>(L) * CS)
                     : nullptr;

  Tensor y(L, channels);
  std::vector<double> h(static_cast<std::size_t>(CS), 0.0);
  for (std::int64_t t = 0; t < L; ++t) {
    const double* at = a_bar.value().data() + t * CS;
    const double* bt = b_u.value().data() + t * CS;
    for (std::int64_t i = 0; i < CS; ++i) h[i] = at[i] * h[i] + bt[i];
    for (std::int64_t i = 0; i < CS; ++i)
      if (!std::isfinite(h[i]))
        throw std::runtime_error("selective scan: non-finite state at step " +
                                 std::to_string(t));
    if (traj)
      std::copy(h.begin(), h.end(), traj->begin() + static_cast<std::size_t>(t) * CS);
    for (std::int64_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      const double* hc = h.data() + c * S;
      const double* ct = c_proj.value().data() + t * S;
      for (std::int64_t s = 0; s < S; ++s) acc += hc[s] * ct[s];
      y(t, c) = acc;
    }
  }

  return attach(std::move(y), {a_bar, b_u, c_proj}, [=](Node* self) {
    auto an = a_bar.node();
    auto bn = b_u.node();
    auto cn = c_proj.node();
    return [self, an, bn, cn, traj, L, CS, S, channels] {
      if (an->requires_grad) ensure_grad(*an);
      if (bn->requires_grad) ensure_grad(*bn);
      if (cn->requires_grad) ensure_grad(*cn);
      std::vector<double> lam(static_cast<std::size_t>(CS), 0.0);
      std::vector<double> carry(static_cast<std::size_t>(CS), 0.0);
      for (std::int64_t t = L - 1; t >= 0; --t) {
        const double* ht = traj->data() + static_cast<std::size_t>(t) * CS;
        const double* hprev =
            t > 0 ? traj->data() + static_cast<std::size_t>(t - 1) * CS : nullptr;
        // lambda_t = g_t (x) c_t + a_{t+1} (*) lambda_{t+1}
        for (std::int64_t c = 0; c < channels; ++c) {
          const double g = self->grad(t, c);
          for (std::int64_t s = 0; s < S; ++s)
            lam[c * S + s] = carry[c * S + s] + g * cn->value(t, s);
        }
        if (cn->requires_grad)
          for (std::int64_t s = 0; s < S; ++s) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < channels; ++c)
              acc += self->grad(t, c) * ht[c * S + s];
            cn->grad(t, s) += acc;
          }
        for (std::int64_t i = 0; i < CS; ++i) {
          if (an->requires_grad && hprev) an->grad(t, i) += lam[i] * hprev[i];
          if (bn->requires_grad) bn->grad(t, i) += lam[i];
          carry[i] = an->value(t, i) * lam[i];
        }
      }
    };
  });
}

}  // namespace dm3d::ad
