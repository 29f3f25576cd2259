#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "sftts/common.hpp"
#include "sftts/tensor.hpp"

namespace sftts {

// Handle into a Graph's node table.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. One graph is built per forward pass; backward() walks
// the tape in reverse creation order. Parameter leaves borrow their value
// from an external Tensor and expose accumulated gradients after backward.
class Graph {
 public:
  explicit Graph(bool training = false) : training_(training) { nodes_.reserve(256); }

  bool training() const { return training_; }

  // Leaves.
  Var input(Tensor t);                // constant, owned copy
  Var input_ref(const Tensor* t);     // constant, borrowed
  Var param(Tensor* t);               // differentiable, borrowed; cached per tensor

  const Tensor& val(Var v) const;
  const Tensor& grad(Var v) const;    // zero tensor if no gradient flowed
  bool has_grad(Var v) const;

  // Elementwise / affine.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_scaled(Var a, double ca, Var b, double cb);  // ca*a + cb*b
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var square(Var a);
  Var gelu(Var a);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var linear(Var x, Var w, Var b);  // x [L,in] * w [in,out] + b [out]

  // Convolutions. conv1d: x [L,Cin], w [Cout, Cin*k], b [Cout]; same length,
  // zero padding (centered) or causal (left-only). conv2d: x [Cin,H,W],
  // w [Cout, Cin*kh*kw], square kernel k, pad p, stride s.
  Var conv1d(Var x, Var w, Var b, int k, bool causal = false);
  Var conv2d(Var x, Var w, Var b, int k, int pad, int stride);
  Var upsample2x(Var x);  // nearest neighbour, [C,H,W] -> [C,2H,2W]

  // Normalization.
  Var layer_norm_rows(Var x, double eps = 1e-5);                 // standardize each row
  Var rowwise_affine(Var x, Var gain, Var bias);                 // x*gain + bias, per column
  Var group_norm(Var x, int groups, Var gain, Var bias, double eps = 1e-5);  // [C,H,W]
  Var channel_bias(Var x, Var b);                                // [C,H,W] + b[C]

  // Softmax family. valid_cols < 0 means all columns participate; otherwise
  // only the first valid_cols columns do and the rest are exactly zero.
  Var softmax_rows(Var x, int valid_cols = -1);
  Var log_softmax_rows(Var x);

  // Reductions / reshaping.
  Var mean_all(Var x);
  Var sum_all(Var x);
  Var mean_rows_prefix(Var x, int n_rows);  // [L,d] -> [1,d] over first n_rows
  Var rows_sum_sq(Var x);                   // [L,d] -> [L,1]
  Var reshape(Var x, std::vector<int> shape);
  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var stack_channels(const std::vector<Var>& xs);  // n x [H,W] -> [n,H,W]
  Var pad_cols_grid(Var x, int new_w);             // [C,H,W] -> [C,H,new_w], zero fill
  Var slice_cols_grid(Var x, int w0, int w1);      // [C,H,W] -> [C,H,w1-w0]

  // Broadcast adds for distance matrices: x [T,N] + col [T,1] / row [1,N].
  Var add_col_broadcast(Var x, Var col);
  Var add_row_broadcast(Var x, Var row);

  // Indexed ops.
  Var rows_select(Var table, std::vector<int> ids);       // embedding gather
  Var repeat_rows(Var x, std::vector<int> durations);     // length regulation
  Var pick_per_row(Var x, std::vector<int> idx);          // [T,N] -> [T,1], x[t, idx[t]]

  // Monotonic-alignment forward sum: negative log of the path-sum over all
  // complete monotone segmentations. log_probs is [T,N] (frame-major).
  Var forward_sum_nll(Var log_probs);

  Var dropout(Var x, double p, Rng& rng);

  void backward(Var loss);

  // Parameter leaves touched by this graph: external tensor -> node id.
  const std::unordered_map<Tensor*, int>& param_nodes() const { return param_nodes_; }

 private:
  struct Node {
    Tensor value;
    const Tensor* ext = nullptr;
    Tensor grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void(Graph&, int self)> back;
  };

  const Tensor& v(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ext ? *n.ext : n.value;
  }
  Tensor& grad_buf(int id);
  const Tensor& out_grad(int self) const { return nodes_[static_cast<std::size_t>(self)].grad; }
  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  int make(Tensor value, bool needs_grad, std::function<void(Graph&, int)> back);
  static void check_same_shape(const Tensor& a, const Tensor& b, const char* who);

  std::vector<Node> nodes_;
  std::unordered_map<Tensor*, int> param_nodes_;
  bool training_ = false;
};

}  // namespace sftts
