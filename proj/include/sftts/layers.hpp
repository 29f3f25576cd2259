#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "sftts/graph.hpp"

namespace sftts {

enum class Init { kZero, kOne, kGlorot, kEmbedding };

// Named parameter registry with stable creation order. Adam moments live
// beside the values so checkpoints capture optimizer state naturally.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;  // batch-accumulated gradient, trainer-managed
    Tensor m, v;  // Adam moments
  };

  Tensor* create(const std::string& name, std::vector<int> shape, Init init, Rng& rng);
  Entry* find(const std::string& name);
  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }
  std::int64_t total_params() const;
  void ensure_opt_state();

 private:
  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

Tensor sinusoidal_positions(int length, int dim);
Tensor sinusoidal_time_embedding(double t, int dim);

struct Linear {
  Tensor* w = nullptr;
  Tensor* b = nullptr;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
  Var fwd(Graph& g, Var x) const { return g.linear(x, g.param(w), g.param(b)); }
};

struct Conv1d {
  Tensor* w = nullptr;
  Tensor* b = nullptr;
  int k = 1;
  bool causal = false;
  Conv1d() = default;
  Conv1d(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng,
         bool causal = false);
  Var fwd(Graph& g, Var x) const { return g.conv1d(x, g.param(w), g.param(b), k, causal); }
};

struct Conv2d {
  Tensor* w = nullptr;
  Tensor* b = nullptr;
  int k = 3, pad = 1, stride = 1;
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k, int pad, int stride,
         Rng& rng);
  Var fwd(Graph& g, Var x) const { return g.conv2d(x, g.param(w), g.param(b), k, pad, stride); }
};

// Plain layer norm with learned per-feature affine.
struct LayerNorm {
  Tensor* gain = nullptr;
  Tensor* bias = nullptr;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim, Rng& rng);
  Var fwd(Graph& g, Var x) const {
    return g.rowwise_affine(g.layer_norm_rows(x), g.param(gain), g.param(bias));
  }
};

// Style-adaptive layer normalization: gain and bias are affine maps of the
// style vector. The gain map's bias initializes to one so the layer starts
// as plain layer norm.
struct Saln {
  Linear gain_map, bias_map;
  Saln() = default;
  Saln(ParamStore& ps, const std::string& name, int d_style, int dim, Rng& rng);
  Var fwd(Graph& g, Var x, Var s) const;
};

struct Mhsa {
  Linear q, k, v, o;
  int heads = 2;
  Mhsa() = default;
  Mhsa(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
  // valid_rows masks trailing key/query positions (-1 = none masked).
  Var fwd(Graph& g, Var x, int valid_rows = -1) const;
};

// Feed-forward transformer block: self-attention and a two-layer 1-D
// convolutional feed-forward, each sub-layer wrapped with a residual and
// style-adaptive layer norm (post-norm).
struct FftBlock {
  Mhsa attn;
  Conv1d ff1, ff2;
  Saln norm1, norm2;
  FftBlock() = default;
  FftBlock(ParamStore& ps, const std::string& name, int dim, int d_style, int heads, int kernel,
           Rng& rng);
  Var fwd(Graph& g, Var x, Var s, int valid_rows, double dropout, Rng* drop_rng) const;
};

struct GroupNorm {
  Tensor* gain = nullptr;
  Tensor* bias = nullptr;
  int groups = 8;
  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, int channels, Rng& rng);
  Var fwd(Graph& g, Var x) const {
    return g.group_norm(x, groups, g.param(gain), g.param(bias));
  }
};

// U-Net residual block with per-block time-embedding injection.
struct ResBlock2d {
  GroupNorm gn1, gn2;
  Conv2d conv1, conv2;
  Linear temb;
  Conv2d skip;  // 1x1, only when channel count changes
  bool has_skip = false;
  ResBlock2d() = default;
  ResBlock2d(ParamStore& ps, const std::string& name, int cin, int cout, int temb_dim, Rng& rng);
  Var fwd(Graph& g, Var x, Var temb_vec) const;
};

}  // namespace sftts
