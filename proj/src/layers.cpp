#include "sftts/layers.hpp"

#include <cmath>

namespace sftts {

Tensor* ParamStore::create(const std::string& name, std::vector<int> shape, Init init, Rng& rng) {
  if (index_.count(name)) throw InvalidInput("ParamStore: duplicate parameter " + name);
  Entry e;
  e.name = name;
  e.value = Tensor(std::move(shape));
  switch (init) {
    case Init::kZero:
      break;
    case Init::kOne:
      for (std::int64_t i = 0; i < e.value.numel(); ++i) e.value[i] = 1.0;
      break;
    case Init::kGlorot: {
      const double fan_in = e.value.ndim() == 2 ? e.value.dim(0) : e.value.numel();
      const double fan_out = e.value.ndim() == 2 ? e.value.dim(1) : 1.0;
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] = rng.uniform(-limit, limit);
      break;
    }
    case Init::kEmbedding: {
      const double scale = 1.0 / std::sqrt(static_cast<double>(e.value.cols()));
      for (std::int64_t i = 0; i < e.value.numel(); ++i) e.value[i] = scale * rng.normal();
      break;
    }
  }
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return &entries_.back().value;
}

ParamStore::Entry* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::int64_t ParamStore::total_params() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::ensure_opt_state() {
  for (auto& e : entries_) {
    if (e.grad.numel() != e.value.numel()) e.grad = Tensor(e.value.shape());
    if (e.m.numel() != e.value.numel()) e.m = Tensor(e.value.shape());
    if (e.v.numel() != e.value.numel()) e.v = Tensor(e.value.shape());
  }
}

Tensor sinusoidal_positions(int length, int dim) {
  Tensor pe({length, dim});
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / dim);
      pe.at(pos, 2 * i) = std::sin(pos * freq);
      pe.at(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  return pe;
}

Tensor sinusoidal_time_embedding(double t, int dim) {
  Tensor emb({1, dim});
  const int half = dim / 2;
  const double pos = 1000.0 * t;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / (half - 1));
    emb.at(0, i) = std::sin(pos * freq);
    emb.at(0, half + i) = std::cos(pos * freq);
  }
  return emb;
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
  w = ps.create(name + ".w", {in, out}, Init::kGlorot, rng);
  b = ps.create(name + ".b", {out}, Init::kZero, rng);
}

Conv1d::Conv1d(ParamStore& ps, const std::string& name, int in, int out, int k_, Rng& rng,
               bool causal_) {
  k = k_;
  causal = causal_;
  w = ps.create(name + ".w", {out, in * k_}, Init::kGlorot, rng);
  b = ps.create(name + ".b", {out}, Init::kZero, rng);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k_, int pad_,
               int stride_, Rng& rng) {
  k = k_;
  pad = pad_;
  stride = stride_;
  w = ps.create(name + ".w", {out, in * k_ * k_}, Init::kGlorot, rng);
  b = ps.create(name + ".b", {out}, Init::kZero, rng);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim, Rng& rng) {
  gain = ps.create(name + ".g", {dim}, Init::kOne, rng);
  bias = ps.create(name + ".b", {dim}, Init::kZero, rng);
}

Saln::Saln(ParamStore& ps, const std::string& name, int d_style, int dim, Rng& rng) {
  gain_map.w = ps.create(name + ".gain.w", {d_style, dim}, Init::kGlorot, rng);
  gain_map.b = ps.create(name + ".gain.b", {dim}, Init::kOne, rng);
  bias_map.w = ps.create(name + ".bias.w", {d_style, dim}, Init::kGlorot, rng);
  bias_map.b = ps.create(name + ".bias.b", {dim}, Init::kZero, rng);
}

Var Saln::fwd(Graph& g, Var x, Var s) const {
  Var xh = g.layer_norm_rows(x);
  Var gain = gain_map.fwd(g, s);  // [1, dim]
  Var bias = bias_map.fwd(g, s);
  const int dim = g.val(gain).cols();
  return g.rowwise_affine(xh, g.reshape(gain, {dim}), g.reshape(bias, {dim}));
}

Mhsa::Mhsa(ParamStore& ps, const std::string& name, int dim, int heads_, Rng& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", dim, dim, rng),
      v(ps, name + ".v", dim, dim, rng),
      o(ps, name + ".o", dim, dim, rng),
      heads(heads_) {}

Var Mhsa::fwd(Graph& g, Var x, int valid_rows) const {
  const int dim = g.val(x).cols();
  if (dim % heads != 0) throw ShapeError("mhsa: dim not divisible by heads");
  const int dh = dim / heads;
  Var qs = q.fwd(g, x), ks = k.fwd(g, x), vs = v.fwd(g, x);
  Var merged;
  for (int h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(qs, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(ks, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(vs, h * dh, (h + 1) * dh);
    Var scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Var probs = g.softmax_rows(scores, valid_rows);
    Var ctx = g.matmul(probs, vh);
    merged = h == 0 ? ctx : g.concat_cols(merged, ctx);
  }
  return o.fwd(g, merged);
}

FftBlock::FftBlock(ParamStore& ps, const std::string& name, int dim, int d_style, int heads,
                   int kernel, Rng& rng)
    : attn(ps, name + ".attn", dim, heads, rng),
      ff1(ps, name + ".ff1", dim, dim, kernel, rng),
      ff2(ps, name + ".ff2", dim, dim, kernel, rng),
      norm1(ps, name + ".norm1", d_style, dim, rng),
      norm2(ps, name + ".norm2", d_style, dim, rng) {}

Var FftBlock::fwd(Graph& g, Var x, Var s, int valid_rows, double dropout, Rng* drop_rng) const {
  Var a = attn.fwd(g, x, valid_rows);
  if (drop_rng) a = g.dropout(a, dropout, *drop_rng);
  Var h = norm1.fwd(g, g.add(x, a), s);
  Var f = ff2.fwd(g, g.gelu(ff1.fwd(g, h)));
  if (drop_rng) f = g.dropout(f, dropout, *drop_rng);
  return norm2.fwd(g, g.add(h, f), s);
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, int channels, Rng& rng) {
  groups = channels % 8 == 0 ? 8 : (channels % 4 == 0 ? 4 : 1);
  gain = ps.create(name + ".g", {channels}, Init::kOne, rng);
  bias = ps.create(name + ".b", {channels}, Init::kZero, rng);
}

ResBlock2d::ResBlock2d(ParamStore& ps, const std::string& name, int cin, int cout, int temb_dim,
                       Rng& rng)
    : gn1(ps, name + ".gn1", cin, rng),
      gn2(ps, name + ".gn2", cout, rng),
      conv1(ps, name + ".conv1", cin, cout, 3, 1, 1, rng),
      conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng),
      temb(ps, name + ".temb", temb_dim, cout, rng) {
  if (cin != cout) {
    skip = Conv2d(ps, name + ".skip", cin, cout, 1, 0, 1, rng);
    has_skip = true;
  }
}

Var ResBlock2d::fwd(Graph& g, Var x, Var temb_vec) const {
  Var h = conv1.fwd(g, g.gelu(gn1.fwd(g, x)));
  Var tb = temb.fwd(g, temb_vec);  // [1, cout]
  h = g.channel_bias(h, g.reshape(tb, {g.val(tb).cols()}));
  h = conv2.fwd(g, g.gelu(gn2.fwd(g, h)));
  Var sk = has_skip ? skip.fwd(g, x) : x;
  return g.add(h, sk);
}

}  // namespace sftts
