#include "sstg/autodiff.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sstg::ad {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("autodiff: invalid Var");
  return *a.tape;
}

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("autodiff: vars from different tapes");
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + t.shape_str());
}

void require_scalar(const Tensor& t, const char* what) {
  if (t.size() != 1)
    throw std::invalid_argument(std::string(what) + ": expected scalar, got " + t.shape_str());
}

// Creates the output node, then wires a backward closure that knows its own
// id. fn has signature void(Tape&, int self_id).
template <typename F>
Var make_node(Tape& t, Tensor value, bool needs, F&& fn) {
  const int id = t.emplace(std::move(value), needs);
  if (t.needs_grad(id))
    t.set_back(id, [id, fn = std::forward<F>(fn)](Tape& tp) { fn(tp, id); });
  return Var{&t, id};
}

} // namespace

const Tensor& Var::val() const { return tape_of(*this).value(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  const int id = emplace(std::move(value), requires_grad);
  return Var{this, id};
}

int Tape::emplace(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = grad_enabled_ && needs_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::set_back(int id, std::function<void(Tape&)> back) {
  nodes_[static_cast<size_t>(id)].back = std::move(back);
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this) throw std::invalid_argument("Tape::value: foreign var");
  return nodes_[static_cast<size_t>(v.id)].value;
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor::zeros_like(n.value);
    n.grad_live = true;
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  if (v.tape != this) throw std::invalid_argument("Tape::grad: foreign var");
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad_live) return n.grad;
  return Tensor::zeros_like(n.value);
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("Tape::backward: foreign var");
  Node& r = nodes_[static_cast<size_t>(root.id)];
  if (r.value.size() != 1) throw std::invalid_argument("Tape::backward: root must be scalar");
  if (!r.needs_grad) return;
  grad_buffer(root.id)[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad_live && n.back) n.back(*this);
  }
}

void Tape::reset() { nodes_.clear(); }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "add");
  Tensor out = av;
  out.add_scaled(bv, 1.0);
  const int ia = a.id, ib = b.id;
  return make_node(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     if (tp.needs_grad(ia)) tp.grad_buffer(ia).add_scaled(g, 1.0);
                     if (tp.needs_grad(ib)) tp.grad_buffer(ib).add_scaled(g, 1.0);
                   });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "sub");
  Tensor out = av;
  out.add_scaled(bv, -1.0);
  const int ia = a.id, ib = b.id;
  return make_node(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     if (tp.needs_grad(ia)) tp.grad_buffer(ia).add_scaled(g, 1.0);
                     if (tp.needs_grad(ib)) tp.grad_buffer(ib).add_scaled(g, -1.0);
                   });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return make_node(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& av2 = tp.value_at(ia);
                     const Tensor& bv2 = tp.value_at(ib);
                     if (tp.needs_grad(ia)) {
                       Tensor& ga = tp.grad_buffer(ia);
                       for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                     }
                     if (tp.needs_grad(ib)) {
                       Tensor& gb = tp.grad_buffer(ib);
                       for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                     }
                   });
}

Var affine(Var a, double scale, double shift) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = scale * out[i] + shift;
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia, scale](Tape& tp, int self) {
    tp.grad_buffer(ia).add_scaled(tp.grad_at(self), scale);
  });
}

Var mul_const(Var a, const Tensor& m) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  check_same_shape(av, m, "mul_const");
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia, m](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * m[i];
  });
}

namespace {

template <typename FwdF, typename DerivF>
Var unary_elementwise(Var a, const char* name, FwdF fwd, DerivF deriv_from_in_out) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fwd(out[i]);
  (void)name;
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia),
                   [ia, deriv_from_in_out](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& x = tp.value_at(ia);
                     const Tensor& y = tp.value_at(self);
                     Tensor& ga = tp.grad_buffer(ia);
                     for (std::int64_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] * deriv_from_in_out(x[i], y[i]);
                   });
}

} // namespace

Var sigmoid(Var a) {
  return unary_elementwise(
      a, "sigmoid",
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary_elementwise(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                           [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var a, double slope) {
  return unary_elementwise(a, "leaky_relu",
                           [slope](double x) { return x > 0 ? x : slope * x; },
                           [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Var elu(Var a) {
  return unary_elementwise(a, "elu", [](double x) { return x > 0 ? x : std::expm1(x); },
                           [](double x, double y) { return x > 0 ? 1.0 : y + 1.0; });
}

Var abs_val(Var a) {
  return unary_elementwise(a, "abs", [](double x) { return std::fabs(x); },
                           [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var pow_const(Var a, double p) {
  return unary_elementwise(a, "pow_const", [p](double x) { return std::pow(x, p); },
                           [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var log_val(Var a) {
  return unary_elementwise(a, "log", [](double x) { return std::log(x); },
                           [](double x, double) { return 1.0 / x; });
}

Var sqrt_eps(Var a, double eps) {
  return unary_elementwise(a, "sqrt_eps", [eps](double x) { return std::sqrt(x + eps); },
                           [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < av.size(); ++i) s += av[i];
  const int ia = a.id;
  return make_node(t, Tensor::scalar(s), t.needs_grad(ia), [ia](Tape& tp, int self) {
    const double g = tp.grad_at(self)[0];
    Tensor& ga = tp.grad_buffer(ia);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean_all(Var a) {
  Tape& t = tape_of(a);
  const double inv = 1.0 / static_cast<double>(t.value(a).size());
  return affine(sum_all(a), inv, 0.0);
}

Var dot_all(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "dot_all");
  double s = 0.0;
  for (std::int64_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  const int ia = a.id, ib = b.id;
  return make_node(t, Tensor::scalar(s), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const double g = tp.grad_at(self)[0];
                     if (tp.needs_grad(ia)) tp.grad_buffer(ia).add_scaled(tp.value_at(ib), g);
                     if (tp.needs_grad(ib)) tp.grad_buffer(ib).add_scaled(tp.value_at(ia), g);
                   });
}

Var dot_const(Var a, const Tensor& c) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  check_same_shape(av, c, "dot_const");
  double s = 0.0;
  for (std::int64_t i = 0; i < av.size(); ++i) s += av[i] * c[i];
  const int ia = a.id;
  return make_node(t, Tensor::scalar(s), t.needs_grad(ia), [ia, c](Tape& tp, int self) {
    tp.grad_buffer(ia).add_scaled(c, tp.grad_at(self)[0]);
  });
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 2, "matmul lhs");
  require_rank(bv, 2, "matmul rhs");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimensions " + av.shape_str() + " x " +
                                bv.shape_str());
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<size_t>(i) * n;
    const double* arow = av.data() + static_cast<size_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const double aval = arow[l];
      if (aval == 0.0) continue;
      const double* brow = bv.data() + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
    }
  }
  const int ia = a.id, ib = b.id;
  return make_node(
      t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
      [ia, ib, m, k, n](Tape& tp, int self) {
        const Tensor& g = tp.grad_at(self); // [m,n]
        const Tensor& av2 = tp.value_at(ia);
        const Tensor& bv2 = tp.value_at(ib);
        if (tp.needs_grad(ia)) { // dA = G * B^T
          Tensor& ga = tp.grad_buffer(ia);
          for (int i = 0; i < m; ++i) {
            const double* grow = g.data() + static_cast<size_t>(i) * n;
            double* garow = ga.data() + static_cast<size_t>(i) * k;
            for (int l = 0; l < k; ++l) {
              const double* brow = bv2.data() + static_cast<size_t>(l) * n;
              double s = 0.0;
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              garow[l] += s;
            }
          }
        }
        if (tp.needs_grad(ib)) { // dB = A^T * G
          Tensor& gb = tp.grad_buffer(ib);
          for (int i = 0; i < m; ++i) {
            const double* arow = av2.data() + static_cast<size_t>(i) * k;
            const double* grow = g.data() + static_cast<size_t>(i) * n;
            for (int l = 0; l < k; ++l) {
              const double aval = arow[l];
              if (aval == 0.0) continue;
              double* gbrow = gb.data() + static_cast<size_t>(l) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
            }
          }
        }
      });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  require_rank(av, 2, "transpose");
  const int r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia, r, c](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self); // [c,r]
    Tensor& ga = tp.grad_buffer(ia);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var row_softmax(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  require_rank(av, 2, "row_softmax");
  const int r = av.dim(0), c = av.dim(1);
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<size_t>(i) * c;
    double* y = out.data() + static_cast<size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia, r, c](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& y = tp.value_at(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (int i = 0; i < r; ++i) {
      const double* grow = g.data() + static_cast<size_t>(i) * c;
      const double* yrow = y.data() + static_cast<size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += grow[j] * yrow[j];
      double* garow = ga.data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) garow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

Var causal_col_softmax(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  require_rank(av, 2, "causal_col_softmax");
  if (av.dim(0) != av.dim(1))
    throw std::invalid_argument("causal_col_softmax: matrix must be square, got " +
                                av.shape_str());
  const int n = av.dim(0);
  Tensor out({n, n}); // zeros; upper part (t' > t) stays exactly 0
  for (int col = 0; col < n; ++col) {
    double mx = av.at(0, col);
    for (int row = 1; row <= col; ++row) mx = std::max(mx, av.at(row, col));
    double z = 0.0;
    for (int row = 0; row <= col; ++row) {
      const double e = std::exp(av.at(row, col) - mx);
      out.at(row, col) = e;
      z += e;
    }
    for (int row = 0; row <= col; ++row) out.at(row, col) /= z;
  }
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& y = tp.value_at(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (int col = 0; col < n; ++col) {
      double dot = 0.0;
      for (int row = 0; row <= col; ++row) dot += g.at(row, col) * y.at(row, col);
      for (int row = 0; row <= col; ++row)
        ga.at(row, col) += y.at(row, col) * (g.at(row, col) - dot);
    }
  });
}

Var add_rowvec(Var m, Var b) {
  Tape& t = tape_of(m);
  check_same_tape(m, b);
  const Tensor& mv = t.value(m);
  const Tensor& bv = t.value(b);
  require_rank(mv, 2, "add_rowvec matrix");
  require_rank(bv, 1, "add_rowvec bias");
  const int r = mv.dim(0), c = mv.dim(1);
  if (bv.dim(0) != c) throw std::invalid_argument("add_rowvec: bias length mismatch");
  Tensor out = mv;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) += bv.at(j);
  const int im = m.id, ib = b.id;
  return make_node(t, std::move(out), t.needs_grad(im) || t.needs_grad(ib),
                   [im, ib, r, c](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     if (tp.needs_grad(im)) tp.grad_buffer(im).add_scaled(g, 1.0);
                     if (tp.needs_grad(ib)) {
                       Tensor& gb = tp.grad_buffer(ib);
                       for (int i = 0; i < r; ++i)
                         for (int j = 0; j < c; ++j) gb.at(j) += g.at(i, j);
                     }
                   });
}

Var reshape(Var a, std::vector<int> shape) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  Tensor out(shape);
  if (out.size() != av.size())
    throw std::invalid_argument("reshape: element count mismatch " + av.shape_str());
  for (std::int64_t i = 0; i < av.size(); ++i) out[i] = av[i];
  const int ia = a.id;
  return make_node(t, std::move(out), t.needs_grad(ia), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// rank-3 / structural
// ---------------------------------------------------------------------------

Var slice_node(Var x3, int node) {
  Tape& t = tape_of(x3);
  const Tensor& xv = t.value(x3);
  require_rank(xv, 3, "slice_node");
  const int n = xv.dim(0), a = xv.dim(1), b = xv.dim(2);
  if (node < 0 || node >= n) throw std::invalid_argument("slice_node: index out of range");
  Tensor out({a, b});
  const std::int64_t block = static_cast<std::int64_t>(a) * b;
  const double* src = xv.data() + block * node;
  for (std::int64_t i = 0; i < block; ++i) out[i] = src[i];
  const int ix = x3.id;
  return make_node(t, std::move(out), t.needs_grad(ix), [ix, node, block](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_buffer(ix);
    double* dst = gx.data() + block * node;
    for (std::int64_t i = 0; i < block; ++i) dst[i] += g[i];
  });
}

Var stack_nodes(Tape& tape, std::span<const Var> nodes2d) {
  if (nodes2d.empty()) throw std::invalid_argument("stack_nodes: empty input");
  const Tensor& first = tape.value(nodes2d[0]);
  require_rank(first, 2, "stack_nodes");
  const int a = first.dim(0), b = first.dim(1);
  const int n = static_cast<int>(nodes2d.size());
  Tensor out({n, a, b});
  bool needs = false;
  std::vector<int> ids(static_cast<size_t>(n));
  const std::int64_t block = static_cast<std::int64_t>(a) * b;
  for (int i = 0; i < n; ++i) {
    check_same_tape(nodes2d[0], nodes2d[static_cast<size_t>(i)]);
    const Tensor& v = tape.value(nodes2d[static_cast<size_t>(i)]);
    check_same_shape(first, v, "stack_nodes");
    double* dst = out.data() + block * i;
    for (std::int64_t j = 0; j < block; ++j) dst[j] = v[j];
    ids[static_cast<size_t>(i)] = nodes2d[static_cast<size_t>(i)].id;
    needs = needs || tape.needs_grad(ids[static_cast<size_t>(i)]);
  }
  return make_node(tape, std::move(out), needs, [ids, block](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (!tp.needs_grad(ids[i])) continue;
      Tensor& gi = tp.grad_buffer(ids[i]);
      const double* src = g.data() + block * static_cast<std::int64_t>(i);
      for (std::int64_t j = 0; j < block; ++j) gi[j] += src[j];
    }
  });
}

Var mean_time(Var x3) {
  Tape& t = tape_of(x3);
  const Tensor& xv = t.value(x3);
  require_rank(xv, 3, "mean_time");
  const int n = xv.dim(0), c = xv.dim(1), steps = xv.dim(2);
  Tensor out({n, c});
  const double inv = 1.0 / steps;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int k = 0; k < steps; ++k) s += xv.at(i, j, k);
      out.at(i, j) = s * inv;
    }
  const int ix = x3.id;
  return make_node(t, std::move(out), t.needs_grad(ix), [ix, n, c, steps, inv](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_buffer(ix);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        const double gv = g.at(i, j) * inv;
        for (int k = 0; k < steps; ++k) gx.at(i, j, k) += gv;
      }
  });
}

Var contract_time(Var x3, Var w) {
  Tape& t = tape_of(x3);
  check_same_tape(x3, w);
  const Tensor& xv = t.value(x3);
  const Tensor& wv = t.value(w);
  require_rank(xv, 3, "contract_time");
  require_rank(wv, 1, "contract_time weight");
  const int n = xv.dim(0), c = xv.dim(1), steps = xv.dim(2);
  if (wv.dim(0) != steps) throw std::invalid_argument("contract_time: weight length mismatch");
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int k = 0; k < steps; ++k) s += xv.at(i, j, k) * wv.at(k);
      out.at(i, j) = s;
    }
  const int ix = x3.id, iw = w.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(iw),
                   [ix, iw, n, c, steps](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& xv2 = tp.value_at(ix);
                     const Tensor& wv2 = tp.value_at(iw);
                     if (tp.needs_grad(ix)) {
                       Tensor& gx = tp.grad_buffer(ix);
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < c; ++j) {
                           const double gv = g.at(i, j);
                           for (int k = 0; k < steps; ++k) gx.at(i, j, k) += gv * wv2.at(k);
                         }
                     }
                     if (tp.needs_grad(iw)) {
                       Tensor& gw = tp.grad_buffer(iw);
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < c; ++j) {
                           const double gv = g.at(i, j);
                           for (int k = 0; k < steps; ++k) gw.at(k) += gv * xv2.at(i, j, k);
                         }
                     }
                   });
}

Var contract_channels(Var x3, Var w) {
  Tape& t = tape_of(x3);
  check_same_tape(x3, w);
  const Tensor& xv = t.value(x3);
  const Tensor& wv = t.value(w);
  require_rank(xv, 3, "contract_channels");
  require_rank(wv, 1, "contract_channels weight");
  const int n = xv.dim(0), c = xv.dim(1), steps = xv.dim(2);
  if (wv.dim(0) != c) throw std::invalid_argument("contract_channels: weight length mismatch");
  Tensor out({n, steps});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < steps; ++k) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += xv.at(i, j, k) * wv.at(j);
      out.at(i, k) = s;
    }
  const int ix = x3.id, iw = w.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(iw),
                   [ix, iw, n, c, steps](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& xv2 = tp.value_at(ix);
                     const Tensor& wv2 = tp.value_at(iw);
                     if (tp.needs_grad(ix)) {
                       Tensor& gx = tp.grad_buffer(ix);
                       for (int i = 0; i < n; ++i)
                         for (int k = 0; k < steps; ++k) {
                           const double gv = g.at(i, k);
                           for (int j = 0; j < c; ++j) gx.at(i, j, k) += gv * wv2.at(j);
                         }
                     }
                     if (tp.needs_grad(iw)) {
                       Tensor& gw = tp.grad_buffer(iw);
                       for (int i = 0; i < n; ++i)
                         for (int k = 0; k < steps; ++k) {
                           const double gv = g.at(i, k);
                           for (int j = 0; j < c; ++j) gw.at(j) += gv * xv2.at(i, j, k);
                         }
                     }
                   });
}

Var matrix_element(Var m, int i, int j) {
  Tape& t = tape_of(m);
  const Tensor& mv = t.value(m);
  require_rank(mv, 2, "matrix_element");
  if (i < 0 || i >= mv.dim(0) || j < 0 || j >= mv.dim(1))
    throw std::invalid_argument("matrix_element: index out of range");
  const int im = m.id;
  return make_node(t, Tensor::scalar(mv.at(i, j)), t.needs_grad(im),
                   [im, i, j](Tape& tp, int self) {
                     tp.grad_buffer(im).at(i, j) += tp.grad_at(self)[0];
                   });
}

Var concat_scalars(Tape& tape, std::span<const Var> scalars) {
  if (scalars.empty()) throw std::invalid_argument("concat_scalars: empty input");
  const int n = static_cast<int>(scalars.size());
  Tensor out({n});
  bool needs = false;
  std::vector<int> ids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    check_same_tape(scalars[0], scalars[static_cast<size_t>(i)]);
    const Tensor& v = tape.value(scalars[static_cast<size_t>(i)]);
    require_scalar(v, "concat_scalars");
    out.at(i) = v[0];
    ids[static_cast<size_t>(i)] = scalars[static_cast<size_t>(i)].id;
    needs = needs || tape.needs_grad(ids[static_cast<size_t>(i)]);
  }
  return make_node(tape, std::move(out), needs, [ids](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    for (size_t i = 0; i < ids.size(); ++i)
      if (tp.needs_grad(ids[i])) tp.grad_buffer(ids[i])[0] += g[static_cast<std::int64_t>(i)];
  });
}

Var softmax_vec(Var v) {
  Tape& t = tape_of(v);
  const Tensor& xv = t.value(v);
  require_rank(xv, 1, "softmax_vec");
  const int n = xv.dim(0);
  Tensor out({n});
  double mx = xv.at(0);
  for (int i = 1; i < n; ++i) mx = std::max(mx, xv.at(i));
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    out.at(i) = std::exp(xv.at(i) - mx);
    z += out.at(i);
  }
  for (int i = 0; i < n; ++i) out.at(i) /= z;
  const int iv = v.id;
  return make_node(t, std::move(out), t.needs_grad(iv), [iv, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& y = tp.value_at(self);
    Tensor& gv = tp.grad_buffer(iv);
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += g.at(i) * y.at(i);
    for (int i = 0; i < n; ++i) gv.at(i) += y.at(i) * (g.at(i) - dot);
  });
}

Var elem_scale(Var vec, int idx, Var x) {
  Tape& t = tape_of(vec);
  check_same_tape(vec, x);
  const Tensor& vv = t.value(vec);
  require_rank(vv, 1, "elem_scale vector");
  if (idx < 0 || idx >= vv.dim(0)) throw std::invalid_argument("elem_scale: index out of range");
  const Tensor& xv = t.value(x);
  Tensor out = xv;
  const double s = vv.at(idx);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  const int iv = vec.id, ix = x.id;
  return make_node(t, std::move(out), t.needs_grad(iv) || t.needs_grad(ix),
                   [iv, ix, idx](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& xv2 = tp.value_at(ix);
                     const double s2 = tp.value_at(iv).at(idx);
                     if (tp.needs_grad(iv)) {
                       double acc = 0.0;
                       for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * xv2[i];
                       tp.grad_buffer(iv).at(idx) += acc;
                     }
                     if (tp.needs_grad(ix)) tp.grad_buffer(ix).add_scaled(g, s2);
                   });
}

Var scale_by_scalar(Var x, Var s) {
  Tape& t = tape_of(x);
  check_same_tape(x, s);
  const Tensor& sv = t.value(s);
  require_scalar(sv, "scale_by_scalar");
  const Tensor& xv = t.value(x);
  Tensor out = xv;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= sv[0];
  const int ix = x.id, is = s.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(is),
                   [ix, is](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& xv2 = tp.value_at(ix);
                     const double s2 = tp.value_at(is)[0];
                     if (tp.needs_grad(is)) {
                       double acc = 0.0;
                       for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * xv2[i];
                       tp.grad_buffer(is)[0] += acc;
                     }
                     if (tp.needs_grad(ix)) tp.grad_buffer(ix).add_scaled(g, s2);
                   });
}

Var add_scalar(Var x, Var s) {
  Tape& t = tape_of(x);
  check_same_tape(x, s);
  const Tensor& sv = t.value(s);
  require_scalar(sv, "add_scalar");
  Tensor out = t.value(x);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += sv[0];
  const int ix = x.id, is = s.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(is),
                   [ix, is](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     if (tp.needs_grad(ix)) tp.grad_buffer(ix).add_scaled(g, 1.0);
                     if (tp.needs_grad(is)) {
                       double acc = 0.0;
                       for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i];
                       tp.grad_buffer(is)[0] += acc;
                     }
                   });
}

Var add_scaled_broadcast(Var x3, const Tensor& c2, Var s) {
  Tape& t = tape_of(x3);
  check_same_tape(x3, s);
  const Tensor& xv = t.value(x3);
  require_rank(xv, 3, "add_scaled_broadcast");
  require_rank(c2, 2, "add_scaled_broadcast const");
  const Tensor& sv = t.value(s);
  require_scalar(sv, "add_scaled_broadcast scale");
  const int n = xv.dim(0);
  const std::int64_t block = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
  if (block != c2.size())
    throw std::invalid_argument("add_scaled_broadcast: const shape mismatch");
  Tensor out = xv;
  for (int i = 0; i < n; ++i) {
    double* dst = out.data() + block * i;
    for (std::int64_t j = 0; j < block; ++j) dst[j] += sv[0] * c2[j];
  }
  const int ix = x3.id, is = s.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(is),
                   [ix, is, n, block, c2](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     if (tp.needs_grad(ix)) tp.grad_buffer(ix).add_scaled(g, 1.0);
                     if (tp.needs_grad(is)) {
                       double acc = 0.0;
                       for (int i = 0; i < n; ++i) {
                         const double* grow = g.data() + block * i;
                         for (std::int64_t j = 0; j < block; ++j) acc += grow[j] * c2[j];
                       }
                       tp.grad_buffer(is)[0] += acc;
                     }
                   });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

Var conv1d_causal(Var x3, Var w, Var b, int dilation) {
  Tape& t = tape_of(x3);
  check_same_tape(x3, w);
  check_same_tape(x3, b);
  const Tensor& xv = t.value(x3);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  require_rank(xv, 3, "conv1d_causal input");
  require_rank(wv, 3, "conv1d_causal weight");
  require_rank(bv, 1, "conv1d_causal bias");
  if (dilation < 1) throw std::invalid_argument("conv1d_causal: dilation must be >= 1");
  const int n = xv.dim(0), ci = xv.dim(1), steps = xv.dim(2);
  const int co = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != ci) throw std::invalid_argument("conv1d_causal: channel mismatch");
  if (bv.dim(0) != co) throw std::invalid_argument("conv1d_causal: bias mismatch");
  // out[n,o,t] = b[o] + sum_{c,q} w[o,c,q] * x[n,c,t - (k-1-q)*d]
  Tensor out({n, co, steps});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < co; ++o)
      for (int tt = 0; tt < steps; ++tt) {
        double s = bv.at(o);
        for (int c = 0; c < ci; ++c)
          for (int q = 0; q < k; ++q) {
            const int src = tt - (k - 1 - q) * dilation;
            if (src >= 0) s += wv.at(o, c, q) * xv.at(in, c, src);
          }
        out.at(in, o, tt) = s;
      }
  const int ix = x3.id, iw = w.id, ib = b.id;
  return make_node(
      t, std::move(out), t.needs_grad(ix) || t.needs_grad(iw) || t.needs_grad(ib),
      [ix, iw, ib, n, ci, co, steps, k, dilation](Tape& tp, int self) {
        const Tensor& g = tp.grad_at(self);
        const Tensor& xv2 = tp.value_at(ix);
        const Tensor& wv2 = tp.value_at(iw);
        if (tp.needs_grad(ib)) {
          Tensor& gb = tp.grad_buffer(ib);
          for (int in = 0; in < n; ++in)
            for (int o = 0; o < co; ++o)
              for (int tt = 0; tt < steps; ++tt) gb.at(o) += g.at(in, o, tt);
        }
        if (tp.needs_grad(iw)) {
          Tensor& gw = tp.grad_buffer(iw);
          for (int in = 0; in < n; ++in)
            for (int o = 0; o < co; ++o)
              for (int tt = 0; tt < steps; ++tt) {
                const double gv = g.at(in, o, tt);
                if (gv == 0.0) continue;
                for (int c = 0; c < ci; ++c)
                  for (int q = 0; q < k; ++q) {
                    const int src = tt - (k - 1 - q) * dilation;
                    if (src >= 0) gw.at(o, c, q) += gv * xv2.at(in, c, src);
                  }
              }
        }
        if (tp.needs_grad(ix)) {
          Tensor& gx = tp.grad_buffer(ix);
          for (int in = 0; in < n; ++in)
            for (int o = 0; o < co; ++o)
              for (int tt = 0; tt < steps; ++tt) {
                const double gv = g.at(in, o, tt);
                if (gv == 0.0) continue;
                for (int c = 0; c < ci; ++c)
                  for (int q = 0; q < k; ++q) {
                    const int src = tt - (k - 1 - q) * dilation;
                    if (src >= 0) gx.at(in, c, src) += gv * wv2.at(o, c, q);
                  }
              }
        }
      });
}

Var depthwise_causal(Var x3, Var w) {
  Tape& t = tape_of(x3);
  check_same_tape(x3, w);
  const Tensor& xv = t.value(x3);
  const Tensor& wv = t.value(w);
  require_rank(xv, 3, "depthwise_causal input");
  require_rank(wv, 2, "depthwise_causal weight");
  const int n = xv.dim(0), f = xv.dim(1), steps = xv.dim(2);
  const int k = wv.dim(1);
  if (wv.dim(0) != f) throw std::invalid_argument("depthwise_causal: band mismatch");
  Tensor out({n, f, steps});
  for (int in = 0; in < n; ++in)
    for (int band = 0; band < f; ++band)
      for (int tt = 0; tt < steps; ++tt) {
        double s = 0.0;
        for (int q = 0; q < k; ++q) {
          const int src = tt - (k - 1 - q);
          if (src >= 0) s += wv.at(band, q) * xv.at(in, band, src);
        }
        out.at(in, band, tt) = s;
      }
  const int ix = x3.id, iw = w.id;
  return make_node(t, std::move(out), t.needs_grad(ix) || t.needs_grad(iw),
                   [ix, iw, n, f, steps, k](Tape& tp, int self) {
                     const Tensor& g = tp.grad_at(self);
                     const Tensor& xv2 = tp.value_at(ix);
                     const Tensor& wv2 = tp.value_at(iw);
                     if (tp.needs_grad(iw)) {
                       Tensor& gw = tp.grad_buffer(iw);
                       for (int in = 0; in < n; ++in)
                         for (int band = 0; band < f; ++band)
                           for (int tt = 0; tt < steps; ++tt) {
                             const double gv = g.at(in, band, tt);
                             if (gv == 0.0) continue;
                             for (int q = 0; q < k; ++q) {
                               const int src = tt - (k - 1 - q);
                               if (src >= 0) gw.at(band, q) += gv * xv2.at(in, band, src);
                             }
                           }
                     }
                     if (tp.needs_grad(ix)) {
                       Tensor& gx = tp.grad_buffer(ix);
                       for (int in = 0; in < n; ++in)
                         for (int band = 0; band < f; ++band)
                           for (int tt = 0; tt < steps; ++tt) {
                             const double gv = g.at(in, band, tt);
                             if (gv == 0.0) continue;
                             for (int q = 0; q < k; ++q) {
                               const int src = tt - (k - 1 - q);
                               if (src >= 0) gx.at(in, band, src) += gv * wv2.at(band, q);
                             }
                           }
                     }
                   });
}

// ---------------------------------------------------------------------------
// selection and losses
// ---------------------------------------------------------------------------

Var topk_keep(Var x, double ratio) {
  Tape& t = tape_of(x);
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("topk_keep: ratio must be in (0, 1]");
  const Tensor& xv = t.value(x);
  const std::int64_t total = xv.size();
  const auto keep =
      static_cast<std::int64_t>(std::ceil(ratio * static_cast<double>(total)));
  Tensor mask = Tensor::zeros_like(xv);
  if (keep >= total) {
    mask.fill(1.0);
  } else {
    std::vector<std::int64_t> order(static_cast<size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + keep, order.end(),
                     [&xv](std::int64_t a, std::int64_t b) {
                       const double fa = std::fabs(xv[a]), fb = std::fabs(xv[b]);
                       if (fa != fb) return fa > fb;
                       return a < b; // ties: lower flat index wins
                     });
    for (std::int64_t i = 0; i < keep; ++i) mask[order[static_cast<size_t>(i)]] = 1.0;
  }
  Tensor out = xv;
  for (std::int64_t i = 0; i < total; ++i) out[i] *= mask[i];
  const int ix = x.id;
  return make_node(t, std::move(out), t.needs_grad(ix), [ix, mask](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_buffer(ix);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var bce_mean(Var scores, const Tensor& labels, double eps) {
  Tape& t = tape_of(scores);
  const Tensor& sv = t.value(scores);
  require_rank(sv, 1, "bce_mean scores");
  check_same_shape(sv, labels, "bce_mean");
  if (!sv.all_finite()) throw std::invalid_argument("bce_mean: non-finite scores");
  const int n = sv.dim(0);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = std::clamp(sv.at(i), eps, 1.0 - eps);
    const double y = labels.at(i);
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  loss /= n;
  const int is = scores.id;
  return make_node(t, Tensor::scalar(loss), t.needs_grad(is),
                   [is, labels, eps, n](Tape& tp, int self) {
                     const double g = tp.grad_at(self)[0];
                     const Tensor& sv2 = tp.value_at(is);
                     Tensor& gs = tp.grad_buffer(is);
                     for (int i = 0; i < n; ++i) {
                       const double raw = sv2.at(i);
                       if (raw < eps || raw > 1.0 - eps) continue; // clamped: zero slope
                       const double y = labels.at(i);
                       gs.at(i) += g * (raw - y) / (raw * (1.0 - raw)) / n;
                     }
                   });
}

Var div_scalars(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_scalar(av, "div_scalars lhs");
  require_scalar(bv, "div_scalars rhs");
  const int ia = a.id, ib = b.id;
  return make_node(t, Tensor::scalar(av[0] / bv[0]), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const double g = tp.grad_at(self)[0];
                     const double a2 = tp.value_at(ia)[0];
                     const double b2 = tp.value_at(ib)[0];
                     if (tp.needs_grad(ia)) tp.grad_buffer(ia)[0] += g / b2;
                     if (tp.needs_grad(ib)) tp.grad_buffer(ib)[0] -= g * a2 / (b2 * b2);
                   });
}

Var mul_scalars(Var a, Var b) {
  Tape& t = tape_of(a);
  check_same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_scalar(av, "mul_scalars lhs");
  require_scalar(bv, "mul_scalars rhs");
  const int ia = a.id, ib = b.id;
  return make_node(t, Tensor::scalar(av[0] * bv[0]), t.needs_grad(ia) || t.needs_grad(ib),
                   [ia, ib](Tape& tp, int self) {
                     const double g = tp.grad_at(self)[0];
                     if (tp.needs_grad(ia)) tp.grad_buffer(ia)[0] += g * tp.value_at(ib)[0];
                     if (tp.needs_grad(ib)) tp.grad_buffer(ib)[0] += g * tp.value_at(ia)[0];
                   });
}

} // namespace sstg::ad
