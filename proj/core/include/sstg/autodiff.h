#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sstg/tensor.h"

namespace sstg::ad {

class Tape;

// Handle into a tape. Cheap to copy; owns nothing.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
};

// Reverse-mode tape. Creation order is a topological order, so backward runs
// the nodes in reverse creation order. One tape per forward pass; not
// thread-safe. With grad disabled no backward closures or gradient buffers
// are created (evaluation mode).
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor value, bool requires_grad = false);

  // Reverse accumulation from a scalar root.
  void backward(Var root);

  const Tensor& value(Var v) const;
  // Gradient of v after backward(); zeros if v never received one.
  Tensor grad(Var v) const;

  void reset(); // drop all nodes, keep vector capacity

  // --- plumbing used by op implementations ---
  int emplace(Tensor value, bool needs_grad);
  void set_back(int id, std::function<void(Tape&)> back);
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  const Tensor& value_at(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad_at(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  Tensor& grad_buffer(int id); // lazily allocated zeros
  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool grad_live = false;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ----- elementwise and scalar ops -----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                         // Hadamard
Var affine(Var a, double scale, double shift); // scale*a + shift
Var mul_const(Var a, const Tensor& m);         // a ⊙ m, m fixed (masks, supports)
Var sigmoid(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var elu(Var a);
Var abs_val(Var a);
Var pow_const(Var a, double p); // caller guarantees a valid domain
Var log_val(Var a);
Var sqrt_eps(Var a, double eps); // sqrt(a + eps)

// ----- reductions -----
Var sum_all(Var a);
Var mean_all(Var a);
Var dot_all(Var a, Var b);             // sum(a ⊙ b)
Var dot_const(Var a, const Tensor& c); // sum(a ⊙ c)

// ----- matrix ops (rank 2) -----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var row_softmax(Var a);
// Softmax down each column over rows t' <= t; entries with t' > t are exactly
// zero in the output. Input must be square.
Var causal_col_softmax(Var a);
Var add_rowvec(Var m, Var b); // m[r,c] + b[c] broadcast over rows
Var reshape(Var a, std::vector<int> shape);

// ----- rank-3 / structural ops -----
Var slice_node(Var x3, int node);                          // [N,A,B] -> [A,B]
Var stack_nodes(Tape& tape, std::span<const Var> nodes2d); // N x [A,B] -> [N,A,B]
Var mean_time(Var x3);                                     // [N,C,T] -> [N,C]
Var contract_time(Var x3, Var w);                          // [N,C,T] x [T] -> [N,C]
Var contract_channels(Var x3, Var w);                      // [N,C,T] x [C] -> [N,T]
Var matrix_element(Var m, int i, int j);                   // -> scalar
Var concat_scalars(Tape& tape, std::span<const Var> scalars); // -> [n]
Var softmax_vec(Var v);
Var elem_scale(Var vec, int idx, Var x); // vec[idx] * x
Var scale_by_scalar(Var x, Var s);       // s scalar
Var add_scalar(Var x, Var s);            // x + s broadcast
Var add_scaled_broadcast(Var x3, const Tensor& c2, Var s); // x3[n] + s*c2 per node

// ----- convolutions (causal over the last axis) -----
Var conv1d_causal(Var x3, Var w, Var b, int dilation); // x[N,Ci,T], w[Co,Ci,k], b[Co]
Var depthwise_causal(Var x3, Var w);                   // x[N,F,T], w[F,k], dilation 1

// ----- selection and losses -----
// Keeps the ceil(ratio*n) largest-|value| entries (ties: lower flat index),
// zeroes the rest. Straight-through: gradient flows only through kept entries.
Var topk_keep(Var x, double ratio);
// Mean binary cross-entropy with probability clamp at [eps, 1-eps].
Var bce_mean(Var scores, const Tensor& labels, double eps);

Var div_scalars(Var a, Var b);
Var mul_scalars(Var a, Var b);

} // namespace sstg::ad
