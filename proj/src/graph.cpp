#include "sftts/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace sftts {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// im2col for 1-D "same" convolution over rows. x [L,C] -> col [L, k*C],
// col(t, j*C + c) = x(t + off_j, c), zero outside. Causal pads left only.
void im2col_1d(const Tensor& x, int k, bool causal, Tensor& col) {
  const int L = x.rows(), C = x.cols();
  for (int t = 0; t < L; ++t) {
    for (int j = 0; j < k; ++j) {
      int src = causal ? t + j - (k - 1) : t + j - k / 2;
      double* dst = col.data() + (static_cast<std::size_t>(t) * k + j) * C;
      if (src < 0 || src >= L) {
        std::fill(dst, dst + C, 0.0);
      } else {
        const double* s = x.data() + static_cast<std::size_t>(src) * C;
        std::copy(s, s + C, dst);
      }
    }
  }
}

void col2im_1d_acc(const Tensor& gcol, int k, bool causal, Tensor& gx) {
  const int L = gx.rows(), C = gx.cols();
  for (int t = 0; t < L; ++t) {
    for (int j = 0; j < k; ++j) {
      int src = causal ? t + j - (k - 1) : t + j - k / 2;
      if (src < 0 || src >= L) continue;
      const double* s = gcol.data() + (static_cast<std::size_t>(t) * k + j) * C;
      double* dst = gx.data() + static_cast<std::size_t>(src) * C;
      for (int c = 0; c < C; ++c) dst[c] += s[c];
    }
  }
}

// im2col (transposed layout) for 2-D convolution. x [Cin,H,W] ->
// colT [Cin*k*k, Ho*Wo].
void im2col_2d(const Tensor& x, int k, int pad, int stride, int ho, int wo, Tensor& colT) {
  const int ci_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int p = ho * wo;
  for (int ci = 0; ci < ci_n; ++ci) {
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx) {
        double* row = colT.data() + static_cast<std::size_t>((ci * k + dy) * k + dx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          int sy = oy * stride + dy - pad;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x.data() + (static_cast<std::size_t>(ci) * h + sy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int sx = ox * stride + dx - pad;
            dst[ox] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_2d_acc(const Tensor& gcolT, int k, int pad, int stride, int ho, int wo, Tensor& gx) {
  const int ci_n = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const int p = ho * wo;
  for (int ci = 0; ci < ci_n; ++ci) {
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx) {
        const double* row = gcolT.data() + static_cast<std::size_t>((ci * k + dy) * k + dx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          int sy = oy * stride + dy - pad;
          if (sy < 0 || sy >= h) continue;
          double* dst = gx.data() + (static_cast<std::size_t>(ci) * h + sy) * w;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            int sx = ox * stride + dx - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[ox];
          }
        }
      }
    }
  }
}
}  // namespace

int Graph::make(Tensor value, bool needs_grad, std::function<void(Graph&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = needs_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Var Graph::input(Tensor t) { return {make(std::move(t), false, nullptr)}; }

Var Graph::input_ref(const Tensor* t) {
  Node n;
  n.ext = t;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Tensor* t) {
  auto it = param_nodes_.find(t);
  if (it != param_nodes_.end()) return {it->second};
  Node n;
  n.ext = t;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[t] = id;
  return {id};
}

const Tensor& Graph::val(Var a) const { return v(a.id); }

bool Graph::has_grad(Var a) const { return nodes_[static_cast<std::size_t>(a.id)].grad_alloc; }

const Tensor& Graph::grad(Var a) const {
  const Node& n = nodes_[static_cast<std::size_t>(a.id)];
  if (!n.grad_alloc) {
    static thread_local Tensor zero;
    zero = Tensor(v(a.id).shape());
    return zero;
  }
  return n.grad;
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Tensor(v(id).shape());
    n.grad_alloc = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  if (v(loss.id).numel() != 1) throw ShapeError("backward: loss must be scalar");
  grad_buf(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad_alloc && n.back) n.back(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and affine ops.

Var Graph::add_scaled(Var a, double ca, Var b, double cb) {
  const Tensor& va = v(a.id);
  const Tensor& vb = v(b.id);
  check_same_shape(va, vb, "add_scaled");
  Tensor y = Tensor::uninit(va.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = ca * va[i] + cb * vb[i];
  int ai = a.id, bi = b.id;
  bool ng = wants(ai) || wants(bi);
  return {make(std::move(y), ng, [ai, bi, ca, cb](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(ai)) {
      Tensor& ga = g.grad_buf(ai);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += ca * go[i];
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += cb * go[i];
    }
  })};
}

Var Graph::add(Var a, Var b) { return add_scaled(a, 1.0, b, 1.0); }
Var Graph::sub(Var a, Var b) { return add_scaled(a, 1.0, b, -1.0); }

Var Graph::mul(Var a, Var b) {
  const Tensor& va = v(a.id);
  const Tensor& vb = v(b.id);
  check_same_shape(va, vb, "mul");
  Tensor y = Tensor::uninit(va.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = va[i] * vb[i];
  int ai = a.id, bi = b.id;
  return {make(std::move(y), wants(ai) || wants(bi), [ai, bi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(ai)) {
      Tensor& ga = g.grad_buf(ai);
      const Tensor& vb2 = g.v(bi);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vb2[i];
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      const Tensor& va2 = g.v(ai);
      for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * va2[i];
    }
  })};
}

Var Graph::scale(Var a, double c) {
  const Tensor& va = v(a.id);
  Tensor y = Tensor::uninit(va.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = c * va[i];
  int ai = a.id;
  return {make(std::move(y), wants(ai), [ai, c](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& ga = g.grad_buf(ai);
    for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += c * go[i];
  })};
}

Var Graph::add_const(Var a, double c) {
  const Tensor& va = v(a.id);
  Tensor y = Tensor::uninit(va.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = va[i] + c;
  int ai = a.id;
  return {make(std::move(y), wants(ai), [ai](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& ga = g.grad_buf(ai);
    for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  })};
}

Var Graph::square(Var a) { return mul(a, a); }

namespace {
// Rational tanh surrogate: u(27+u^2)/(27+9u^2) on |u| <= 3, +-1 outside. The
// value and first derivative are continuous at the joins (both ends meet at
// +-1 with zero slope), and it is several times cheaper than std::tanh.
inline double fast_tanh(double u) {
  if (u >= 3.0) return 1.0;
  if (u <= -3.0) return -1.0;
  const double u2 = u * u;
  return u * (27.0 + u2) / (27.0 + 9.0 * u2);
}
inline double fast_tanh_grad(double u) {
  if (u >= 3.0 || u <= -3.0) return 0.0;
  const double u2 = u * u;
  const double den = 27.0 + 9.0 * u2;
  return ((27.0 + 3.0 * u2) * den - 18.0 * u2 * (27.0 + u2)) / (den * den);
}
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluQ = 0.044715;
}  // namespace

Var Graph::gelu(Var a) {
  const Tensor& va = v(a.id);
  Tensor y = Tensor::uninit(va.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    double x = va[i];
    y[i] = 0.5 * x * (1.0 + fast_tanh(kGeluC * (x + kGeluQ * x * x * x)));
  }
  int ai = a.id;
  return {make(std::move(y), wants(ai), [ai](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& x = g.v(ai);
    Tensor& ga = g.grad_buf(ai);
    for (std::int64_t i = 0; i < go.numel(); ++i) {
      double xi = x[i];
      double u = kGeluC * (xi + kGeluQ * xi * xi * xi);
      double th = fast_tanh(u);
      double d = 0.5 * (1.0 + th) +
                 0.5 * xi * fast_tanh_grad(u) * kGeluC * (1.0 + 3.0 * kGeluQ * xi * xi);
      ga[i] += go[i] * d;
    }
  })};
}

// ---------------------------------------------------------------------------
// Linear algebra.

Var Graph::matmul(Var a, Var b) {
  Tensor y = sftts::matmul(v(a.id), v(b.id));
  int ai = a.id, bi = b.id;
  return {make(std::move(y), wants(ai) || wants(bi), [ai, bi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(ai)) matmul_acc(g.grad_buf(ai), go, g.v(bi), false, true, 1.0);
    if (g.wants(bi)) matmul_acc(g.grad_buf(bi), g.v(ai), go, true, false, 1.0);
  })};
}

Var Graph::transpose(Var a) {
  Tensor y = sftts::transpose(v(a.id));
  int ai = a.id;
  return {make(std::move(y), wants(ai), [ai](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& ga = g.grad_buf(ai);
    for (int r = 0; r < go.rows(); ++r)
      for (int c = 0; c < go.cols(); ++c) ga.at(c, r) += go.at(r, c);
  })};
}

Var Graph::linear(Var x, Var w, Var b) {
  const Tensor& vx = v(x.id);
  const Tensor& vw = v(w.id);
  const Tensor& vb = v(b.id);
  if (vx.cols() != vw.rows()) throw ShapeError("linear: in-dim mismatch");
  if (vb.numel() != vw.cols()) throw ShapeError("linear: bias dim mismatch");
  Tensor y = Tensor::uninit({vx.rows(), vw.cols()});
  for (int r = 0; r < y.rows(); ++r)
    for (int c = 0; c < y.cols(); ++c) y.at(r, c) = vb[c];
  matmul_acc(y, vx, vw, false, false, 1.0);
  int xi = x.id, wi = w.id, bi = b.id;
  return {make(std::move(y), wants(xi) || wants(wi) || wants(bi), [xi, wi, bi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(xi)) matmul_acc(g.grad_buf(xi), go, g.v(wi), false, true, 1.0);
    if (g.wants(wi)) matmul_acc(g.grad_buf(wi), g.v(xi), go, true, false, 1.0);
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < go.cols(); ++c) gb[c] += go.at(r, c);
    }
  })};
}

// ---------------------------------------------------------------------------
// Convolutions.

Var Graph::conv1d(Var x, Var w, Var b, int k, bool causal) {
  const Tensor& vx = v(x.id);
  const Tensor& vw = v(w.id);
  const Tensor& vb = v(b.id);
  const int L = vx.rows(), cin = vx.cols(), cout = vw.rows();
  if (vw.cols() != k * cin) throw ShapeError("conv1d: weight shape mismatch");
  if (vb.numel() != cout) throw ShapeError("conv1d: bias dim mismatch");
  Tensor col = Tensor::uninit({L, k * cin});
  im2col_1d(vx, k, causal, col);
  Tensor y = Tensor::uninit({L, cout});
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < cout; ++c) y.at(r, c) = vb[c];
  matmul_acc(y, col, vw, false, true, 1.0);
  int xi = x.id, wi = w.id, bi = b.id;
  return {make(std::move(y), wants(xi) || wants(wi) || wants(bi),
               [xi, wi, bi, k, causal](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& vx2 = g.v(xi);
    const int L2 = vx2.rows(), cin2 = vx2.cols();
    Tensor col2 = Tensor::uninit({L2, k * cin2});
    im2col_1d(vx2, k, causal, col2);
    if (g.wants(wi)) matmul_acc(g.grad_buf(wi), go, col2, true, false, 1.0);
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < go.cols(); ++c) gb[c] += go.at(r, c);
    }
    if (g.wants(xi)) {
      Tensor gcol = sftts::matmul(go, g.v(wi));
      col2im_1d_acc(gcol, k, causal, g.grad_buf(xi));
    }
  })};
}

Var Graph::conv2d(Var x, Var w, Var b, int k, int pad, int stride) {
  const Tensor& vx = v(x.id);
  const Tensor& vw = v(w.id);
  const Tensor& vb = v(b.id);
  if (vx.ndim() != 3) throw ShapeError("conv2d: expected [C,H,W] input");
  const int cin = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
  const int cout = vw.rows();
  if (vw.cols() != cin * k * k) throw ShapeError("conv2d: weight shape mismatch");
  if (vb.numel() != cout) throw ShapeError("conv2d: bias dim mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  const int p = ho * wo;
  Tensor colT = Tensor::uninit({cin * k * k, p});
  im2col_2d(vx, k, pad, stride, ho, wo, colT);
  Tensor y = Tensor::uninit({cout, p});
  for (int c = 0; c < cout; ++c) {
    double* row = y.data() + static_cast<std::size_t>(c) * p;
    std::fill(row, row + p, vb[c]);
  }
  matmul_acc(y, vw, colT, false, false, 1.0);
  y = y.reshaped({cout, ho, wo});
  int xi = x.id, wi = w.id, bi = b.id;
  auto col_keep = std::make_shared<Tensor>(std::move(colT));
  return {make(std::move(y), wants(xi) || wants(wi) || wants(bi),
               [xi, wi, bi, k, pad, stride, ho, wo, col_keep](Graph& g, int self) {
    const Tensor go2 = g.out_grad(self).reshaped({g.out_grad(self).dim(0), ho * wo});
    if (g.wants(wi)) matmul_acc(g.grad_buf(wi), go2, *col_keep, false, true, 1.0);
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int c = 0; c < go2.rows(); ++c)
        for (int i = 0; i < go2.cols(); ++i) gb[c] += go2.at(c, i);
    }
    if (g.wants(xi)) {
      Tensor gcolT = sftts::matmul(g.v(wi), go2, true, false);
      col2im_2d_acc(gcolT, k, pad, stride, ho, wo, g.grad_buf(xi));
    }
  })};
}

Var Graph::upsample2x(Var x) {
  const Tensor& vx = v(x.id);
  if (vx.ndim() != 3) throw ShapeError("upsample2x: expected [C,H,W]");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  Tensor y = Tensor::uninit({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double val = vx.at3(ci, i, j);
        y.at3(ci, 2 * i, 2 * j) = val;
        y.at3(ci, 2 * i, 2 * j + 1) = val;
        y.at3(ci, 2 * i + 1, 2 * j) = val;
        y.at3(ci, 2 * i + 1, 2 * j + 1) = val;
      }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, c, h, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          gx.at3(ci, i, j) += go.at3(ci, 2 * i, 2 * j) + go.at3(ci, 2 * i, 2 * j + 1) +
                              go.at3(ci, 2 * i + 1, 2 * j) + go.at3(ci, 2 * i + 1, 2 * j + 1);
  })};
}

// ---------------------------------------------------------------------------
// Normalization.

Var Graph::layer_norm_rows(Var x, double eps) {
  const Tensor& vx = v(x.id);
  const int L = vx.rows(), d = vx.cols();
  Tensor y = Tensor::uninit({L, d});
  for (int r = 0; r < L; ++r) {
    double m = 0;
    for (int c = 0; c < d; ++c) m += vx.at(r, c);
    m /= d;
    double var = 0;
    for (int c = 0; c < d; ++c) {
      double dv = vx.at(r, c) - m;
      var += dv * dv;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < d; ++c) y.at(r, c) = (vx.at(r, c) - m) * inv;
  }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, eps](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& xh = g.v(self);  // normalized output
    const Tensor& vx2 = g.v(xi);
    Tensor& gx = g.grad_buf(xi);
    const int L2 = vx2.rows(), d2 = vx2.cols();
    for (int r = 0; r < L2; ++r) {
      double m = 0;
      for (int c = 0; c < d2; ++c) m += vx2.at(r, c);
      m /= d2;
      double var = 0;
      for (int c = 0; c < d2; ++c) {
        double dv = vx2.at(r, c) - m;
        var += dv * dv;
      }
      var /= d2;
      double inv = 1.0 / std::sqrt(var + eps);
      double gsum = 0, gxsum = 0;
      for (int c = 0; c < d2; ++c) {
        gsum += go.at(r, c);
        gxsum += go.at(r, c) * xh.at(r, c);
      }
      gsum /= d2;
      gxsum /= d2;
      for (int c = 0; c < d2; ++c)
        gx.at(r, c) += inv * (go.at(r, c) - gsum - xh.at(r, c) * gxsum);
    }
  })};
}

Var Graph::rowwise_affine(Var x, Var gain, Var bias) {
  const Tensor& vx = v(x.id);
  const Tensor& vg = v(gain.id);
  const Tensor& vb = v(bias.id);
  const int L = vx.rows(), d = vx.cols();
  if (vg.numel() != d || vb.numel() != d) throw ShapeError("rowwise_affine: vector dim mismatch");
  Tensor y = Tensor::uninit({L, d});
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < d; ++c) y.at(r, c) = vx.at(r, c) * vg[c] + vb[c];
  int xi = x.id, gi = gain.id, bi = bias.id;
  return {make(std::move(y), wants(xi) || wants(gi) || wants(bi), [xi, gi, bi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const int L2 = go.rows(), d2 = go.cols();
    if (g.wants(xi)) {
      Tensor& gx = g.grad_buf(xi);
      const Tensor& vg2 = g.v(gi);
      for (int r = 0; r < L2; ++r)
        for (int c = 0; c < d2; ++c) gx.at(r, c) += go.at(r, c) * vg2[c];
    }
    if (g.wants(gi)) {
      Tensor& gg = g.grad_buf(gi);
      const Tensor& vx2 = g.v(xi);
      for (int r = 0; r < L2; ++r)
        for (int c = 0; c < d2; ++c) gg[c] += go.at(r, c) * vx2.at(r, c);
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int r = 0; r < L2; ++r)
        for (int c = 0; c < d2; ++c) gb[c] += go.at(r, c);
    }
  })};
}

Var Graph::group_norm(Var x, int groups, Var gain, Var bias, double eps) {
  const Tensor& vx = v(x.id);
  if (vx.ndim() != 3) throw ShapeError("group_norm: expected [C,H,W]");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const Tensor& vg = v(gain.id);
  const Tensor& vb = v(bias.id);
  if (vg.numel() != c || vb.numel() != c) throw ShapeError("group_norm: affine dim mismatch");
  const int gc = c / groups;
  const std::int64_t slab = static_cast<std::int64_t>(gc) * h * w;
  Tensor y = Tensor::uninit({c, h, w});
  for (int gi2 = 0; gi2 < groups; ++gi2) {
    const double* src = vx.data() + gi2 * slab;
    double m = 0;
    for (std::int64_t i = 0; i < slab; ++i) m += src[i];
    m /= static_cast<double>(slab);
    double var = 0;
    for (std::int64_t i = 0; i < slab; ++i) {
      double dv = src[i] - m;
      var += dv * dv;
    }
    var /= static_cast<double>(slab);
    double inv = 1.0 / std::sqrt(var + eps);
    double* dst = y.data() + gi2 * slab;
    for (std::int64_t i = 0; i < slab; ++i) dst[i] = (src[i] - m) * inv;
  }
  // Affine per channel on the normalized activations.
  for (int ci = 0; ci < c; ++ci) {
    double* row = y.data() + static_cast<std::int64_t>(ci) * h * w;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i)
      row[i] = row[i] * vg[ci] + vb[ci];
  }
  int xi = x.id, gni = gain.id, bni = bias.id;
  return {make(std::move(y), wants(xi) || wants(gni) || wants(bni),
               [xi, gni, bni, groups, eps](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& vx2 = g.v(xi);
    const Tensor& vg2 = g.v(gni);
    const Tensor& vb2 = g.v(bni);
    const int c2 = vx2.dim(0), h2 = vx2.dim(1), w2 = vx2.dim(2);
    const int gc2 = c2 / groups;
    const std::int64_t hw = static_cast<std::int64_t>(h2) * w2;
    const std::int64_t slab = gc2 * hw;
    (void)vb2;
    for (int gi2 = 0; gi2 < groups; ++gi2) {
      const double* src = vx2.data() + gi2 * slab;
      const double* gsrc = go.data() + gi2 * slab;
      double m = 0;
      for (std::int64_t i = 0; i < slab; ++i) m += src[i];
      m /= static_cast<double>(slab);
      double var = 0;
      for (std::int64_t i = 0; i < slab; ++i) {
        double dv = src[i] - m;
        var += dv * dv;
      }
      var /= static_cast<double>(slab);
      double inv = 1.0 / std::sqrt(var + eps);
      // First pass: per-channel affine grads plus slab sums of gxh and gxh*xh,
      // where gxh = go * gain[channel].
      double gsum = 0, gxsum = 0;
      for (int cc = 0; cc < gc2; ++cc) {
        int ci = gi2 * gc2 + cc;
        double sg = 0, sb = 0;
        for (std::int64_t i = cc * hw; i < (cc + 1) * hw; ++i) {
          double xh = (src[i] - m) * inv;
          sg += gsrc[i] * xh;
          sb += gsrc[i];
          double gxh = gsrc[i] * vg2[ci];
          gsum += gxh;
          gxsum += gxh * xh;
        }
        if (g.wants(gni)) g.grad_buf(gni)[ci] += sg;
        if (g.wants(bni)) g.grad_buf(bni)[ci] += sb;
      }
      if (!g.wants(xi)) continue;
      gsum /= static_cast<double>(slab);
      gxsum /= static_cast<double>(slab);
      Tensor& gx = g.grad_buf(xi);
      for (int cc = 0; cc < gc2; ++cc) {
        int ci = gi2 * gc2 + cc;
        for (std::int64_t i = cc * hw; i < (cc + 1) * hw; ++i) {
          double xh = (src[i] - m) * inv;
          double gxh = gsrc[i] * vg2[ci];
          gx[gi2 * slab + i] += inv * (gxh - gsum - xh * gxsum);
        }
      }
    }
  })};
}

Var Graph::channel_bias(Var x, Var b) {
  const Tensor& vx = v(x.id);
  if (vx.ndim() != 3) throw ShapeError("channel_bias: expected [C,H,W]");
  const Tensor& vb = v(b.id);
  const int c = vx.dim(0);
  if (vb.numel() != c) throw ShapeError("channel_bias: bias dim mismatch");
  const std::int64_t hw = static_cast<std::int64_t>(vx.dim(1)) * vx.dim(2);
  Tensor y = Tensor::uninit(vx.shape());
  for (int ci = 0; ci < c; ++ci)
    for (std::int64_t i = 0; i < hw; ++i) y[ci * hw + i] = vx[ci * hw + i] + vb[ci];
  int xi = x.id, bi = b.id;
  return {make(std::move(y), wants(xi) || wants(bi), [xi, bi, c, hw](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(xi)) {
      Tensor& gx = g.grad_buf(xi);
      for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < hw; ++i) gb[ci] += go[ci * hw + i];
    }
  })};
}

// ---------------------------------------------------------------------------
// Softmax family.

Var Graph::softmax_rows(Var x, int valid_cols) {
  const Tensor& vx = v(x.id);
  const int L = vx.rows(), d = vx.cols();
  const int vc = valid_cols < 0 ? d : valid_cols;
  if (vc < 1 || vc > d) throw ShapeError("softmax_rows: bad valid_cols");
  Tensor y({L, d});
  for (int r = 0; r < L; ++r) {
    double mx = kNegInf;
    for (int c = 0; c < vc; ++c) mx = std::max(mx, vx.at(r, c));
    double z = 0;
    for (int c = 0; c < vc; ++c) z += std::exp(vx.at(r, c) - mx);
    for (int c = 0; c < vc; ++c) y.at(r, c) = std::exp(vx.at(r, c) - mx) / z;
  }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, vc](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& yv = g.v(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < go.rows(); ++r) {
      double dot = 0;
      for (int c = 0; c < vc; ++c) dot += go.at(r, c) * yv.at(r, c);
      for (int c = 0; c < vc; ++c) gx.at(r, c) += yv.at(r, c) * (go.at(r, c) - dot);
    }
  })};
}

Var Graph::log_softmax_rows(Var x) {
  const Tensor& vx = v(x.id);
  const int L = vx.rows(), d = vx.cols();
  Tensor y = Tensor::uninit({L, d});
  for (int r = 0; r < L; ++r) {
    double mx = kNegInf;
    for (int c = 0; c < d; ++c) mx = std::max(mx, vx.at(r, c));
    double z = 0;
    for (int c = 0; c < d; ++c) z += std::exp(vx.at(r, c) - mx);
    double lz = mx + std::log(z);
    for (int c = 0; c < d; ++c) y.at(r, c) = vx.at(r, c) - lz;
  }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& yv = g.v(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < go.rows(); ++r) {
      double gsum = 0;
      for (int c = 0; c < go.cols(); ++c) gsum += go.at(r, c);
      for (int c = 0; c < go.cols(); ++c)
        gx.at(r, c) += go.at(r, c) - std::exp(yv.at(r, c)) * gsum;
    }
  })};
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

Var Graph::mean_all(Var x) {
  const Tensor& vx = v(x.id);
  double s = 0;
  for (std::int64_t i = 0; i < vx.numel(); ++i) s += vx[i];
  const double n = static_cast<double>(vx.numel());
  int xi = x.id;
  return {make(Tensor::scalar(s / n), wants(xi), [xi, n](Graph& g, int self) {
    const double go = g.out_grad(self)[0];
    Tensor& gx = g.grad_buf(xi);
    const double d = go / n;
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += d;
  })};
}

Var Graph::sum_all(Var x) {
  const Tensor& vx = v(x.id);
  double s = 0;
  for (std::int64_t i = 0; i < vx.numel(); ++i) s += vx[i];
  int xi = x.id;
  return {make(Tensor::scalar(s), wants(xi), [xi](Graph& g, int self) {
    const double go = g.out_grad(self)[0];
    Tensor& gx = g.grad_buf(xi);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += go;
  })};
}

Var Graph::mean_rows_prefix(Var x, int n_rows) {
  const Tensor& vx = v(x.id);
  const int d = vx.cols();
  if (n_rows < 1 || n_rows > vx.rows()) throw ShapeError("mean_rows_prefix: bad row count");
  Tensor y({1, d});
  for (int r = 0; r < n_rows; ++r)
    for (int c = 0; c < d; ++c) y.at(0, c) += vx.at(r, c);
  for (int c = 0; c < d; ++c) y.at(0, c) /= n_rows;
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, n_rows](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < n_rows; ++r)
      for (int c = 0; c < go.cols(); ++c) gx.at(r, c) += go.at(0, c) / n_rows;
  })};
}

Var Graph::rows_sum_sq(Var x) {
  const Tensor& vx = v(x.id);
  Tensor y = Tensor::uninit({vx.rows(), 1});
  for (int r = 0; r < vx.rows(); ++r) {
    double s = 0;
    for (int c = 0; c < vx.cols(); ++c) s += vx.at(r, c) * vx.at(r, c);
    y.at(r, 0) = s;
  }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& vx2 = g.v(xi);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < vx2.rows(); ++r)
      for (int c = 0; c < vx2.cols(); ++c) gx.at(r, c) += 2.0 * vx2.at(r, c) * go.at(r, 0);
  })};
}

Var Graph::reshape(Var x, std::vector<int> shape) {
  Tensor y = v(x.id).reshaped(shape);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
  })};
}

Var Graph::slice_rows(Var x, int r0, int r1) {
  const Tensor& vx = v(x.id);
  const int d = vx.cols();
  if (r0 < 0 || r1 > vx.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
  Tensor y = Tensor::uninit({r1 - r0, d});
  for (int r = r0; r < r1; ++r)
    for (int c = 0; c < d; ++c) y.at(r - r0, c) = vx.at(r, c);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, r0, r1](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = r0; r < r1; ++r)
      for (int c = 0; c < go.cols(); ++c) gx.at(r, c) += go.at(r - r0, c);
  })};
}

Var Graph::slice_cols(Var x, int c0, int c1) {
  const Tensor& vx = v(x.id);
  if (c0 < 0 || c1 > vx.cols() || c0 >= c1) throw ShapeError("slice_cols: bad range");
  Tensor y = Tensor::uninit({vx.rows(), c1 - c0});
  for (int r = 0; r < vx.rows(); ++r)
    for (int c = c0; c < c1; ++c) y.at(r, c - c0) = vx.at(r, c);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, c0, c1](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < go.rows(); ++r)
      for (int c = c0; c < c1; ++c) gx.at(r, c) += go.at(r, c - c0);
  })};
}

Var Graph::concat_rows(Var a, Var b) {
  const Tensor& va = v(a.id);
  const Tensor& vb = v(b.id);
  if (va.cols() != vb.cols()) throw ShapeError("concat_rows: column mismatch");
  Tensor y = Tensor::uninit({va.rows() + vb.rows(), va.cols()});
  std::copy(va.data(), va.data() + va.numel(), y.data());
  std::copy(vb.data(), vb.data() + vb.numel(), y.data() + va.numel());
  int ai = a.id, bi = b.id;
  const std::int64_t na = va.numel();
  return {make(std::move(y), wants(ai) || wants(bi), [ai, bi, na](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(ai)) {
      Tensor& ga = g.grad_buf(ai);
      for (std::int64_t i = 0; i < na; ++i) ga[i] += go[i];
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (std::int64_t i = na; i < go.numel(); ++i) gb[i - na] += go[i];
    }
  })};
}

Var Graph::concat_cols(Var a, Var b) {
  const Tensor& va = v(a.id);
  const Tensor& vb = v(b.id);
  if (va.rows() != vb.rows()) throw ShapeError("concat_cols: row mismatch");
  const int ca = va.cols(), cb = vb.cols();
  Tensor y = Tensor::uninit({va.rows(), ca + cb});
  for (int r = 0; r < va.rows(); ++r) {
    for (int c = 0; c < ca; ++c) y.at(r, c) = va.at(r, c);
    for (int c = 0; c < cb; ++c) y.at(r, ca + c) = vb.at(r, c);
  }
  int ai = a.id, bi = b.id;
  return {make(std::move(y), wants(ai) || wants(bi), [ai, bi, ca, cb](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(ai)) {
      Tensor& ga = g.grad_buf(ai);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < ca; ++c) ga.at(r, c) += go.at(r, c);
    }
    if (g.wants(bi)) {
      Tensor& gb = g.grad_buf(bi);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < cb; ++c) gb.at(r, c) += go.at(r, ca + c);
    }
  })};
}

Var Graph::stack_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("stack_channels: empty input");
  const Tensor& first = v(xs[0].id);
  if (first.ndim() != 2) throw ShapeError("stack_channels: expected 2-D inputs");
  const int h = first.rows(), w = first.cols();
  Tensor y = Tensor::uninit({static_cast<int>(xs.size()), h, w});
  bool ng = false;
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& t = v(xs[i].id);
    check_same_shape(first, t, "stack_channels");
    std::copy(t.data(), t.data() + t.numel(), y.data() + static_cast<std::int64_t>(i) * h * w);
    ng = ng || wants(xs[i].id);
    ids.push_back(xs[i].id);
  }
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  return {make(std::move(y), ng, [ids, hw](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!g.wants(ids[i])) continue;
      Tensor& gx = g.grad_buf(ids[i]);
      const double* src = go.data() + static_cast<std::int64_t>(i) * hw;
      for (std::int64_t j = 0; j < hw; ++j) gx[j] += src[j];
    }
  })};
}

Var Graph::pad_cols_grid(Var x, int new_w) {
  const Tensor& vx = v(x.id);
  if (vx.ndim() != 3) throw ShapeError("pad_cols_grid: expected [C,H,W]");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  if (new_w < w) throw ShapeError("pad_cols_grid: new width smaller than input");
  Tensor y({c, h, new_w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) y.at3(ci, i, j) = vx.at3(ci, i, j);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, c, h, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) gx.at3(ci, i, j) += go.at3(ci, i, j);
  })};
}

Var Graph::slice_cols_grid(Var x, int w0, int w1) {
  const Tensor& vx = v(x.id);
  if (vx.ndim() != 3) throw ShapeError("slice_cols_grid: expected [C,H,W]");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  if (w0 < 0 || w1 > w || w0 >= w1) throw ShapeError("slice_cols_grid: bad range");
  Tensor y = Tensor::uninit({c, h, w1 - w0});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = w0; j < w1; ++j) y.at3(ci, i, j - w0) = vx.at3(ci, i, j);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, c, h, w0, w1](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = w0; j < w1; ++j) gx.at3(ci, i, j) += go.at3(ci, i, j - w0);
  })};
}

Var Graph::add_col_broadcast(Var x, Var col) {
  const Tensor& vx = v(x.id);
  const Tensor& vc = v(col.id);
  if (vc.rows() != vx.rows() || vc.cols() != 1) throw ShapeError("add_col_broadcast: bad col");
  Tensor y = Tensor::uninit(vx.shape());
  for (int r = 0; r < vx.rows(); ++r)
    for (int c = 0; c < vx.cols(); ++c) y.at(r, c) = vx.at(r, c) + vc.at(r, 0);
  int xi = x.id, ci = col.id;
  return {make(std::move(y), wants(xi) || wants(ci), [xi, ci](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(xi)) {
      Tensor& gx = g.grad_buf(xi);
      for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    }
    if (g.wants(ci)) {
      Tensor& gc = g.grad_buf(ci);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < go.cols(); ++c) gc.at(r, 0) += go.at(r, c);
    }
  })};
}

Var Graph::add_row_broadcast(Var x, Var row) {
  const Tensor& vx = v(x.id);
  const Tensor& vr = v(row.id);
  if (vr.rows() != 1 || vr.cols() != vx.cols()) throw ShapeError("add_row_broadcast: bad row");
  Tensor y = Tensor::uninit(vx.shape());
  for (int r = 0; r < vx.rows(); ++r)
    for (int c = 0; c < vx.cols(); ++c) y.at(r, c) = vx.at(r, c) + vr.at(0, c);
  int xi = x.id, ri = row.id;
  return {make(std::move(y), wants(xi) || wants(ri), [xi, ri](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.wants(xi)) {
      Tensor& gx = g.grad_buf(xi);
      for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    }
    if (g.wants(ri)) {
      Tensor& gr = g.grad_buf(ri);
      for (int r = 0; r < go.rows(); ++r)
        for (int c = 0; c < go.cols(); ++c) gr.at(0, c) += go.at(r, c);
    }
  })};
}

// ---------------------------------------------------------------------------
// Indexed ops.

Var Graph::rows_select(Var table, std::vector<int> ids) {
  const Tensor& vt = v(table.id);
  Tensor y = Tensor::uninit({static_cast<int>(ids.size()), vt.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vt.rows()) throw InvalidInput("rows_select: id out of range");
    for (int c = 0; c < vt.cols(); ++c) y.at(static_cast<int>(i), c) = vt.at(ids[i], c);
  }
  int ti = table.id;
  return {make(std::move(y), wants(ti), [ti, ids](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gt = g.grad_buf(ti);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int c = 0; c < go.cols(); ++c) gt.at(ids[i], c) += go.at(static_cast<int>(i), c);
  })};
}

Var Graph::repeat_rows(Var x, std::vector<int> durations) {
  const Tensor& vx = v(x.id);
  if (static_cast<int>(durations.size()) != vx.rows())
    throw ShapeError("repeat_rows: durations length mismatch");
  std::int64_t total = 0;
  for (int d : durations) {
    if (d < 0) throw InvalidInput("repeat_rows: negative duration");
    total += d;
  }
  if (total < 1) throw InvalidInput("repeat_rows: all durations zero");
  Tensor y = Tensor::uninit({static_cast<int>(total), vx.cols()});
  int r = 0;
  for (int n = 0; n < vx.rows(); ++n)
    for (int rep = 0; rep < durations[static_cast<std::size_t>(n)]; ++rep, ++r)
      for (int c = 0; c < vx.cols(); ++c) y.at(r, c) = vx.at(n, c);
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, durations](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    int r2 = 0;
    for (std::size_t n = 0; n < durations.size(); ++n)
      for (int rep = 0; rep < durations[n]; ++rep, ++r2)
        for (int c = 0; c < go.cols(); ++c) gx.at(static_cast<int>(n), c) += go.at(r2, c);
  })};
}

Var Graph::pick_per_row(Var x, std::vector<int> idx) {
  const Tensor& vx = v(x.id);
  if (static_cast<int>(idx.size()) != vx.rows()) throw ShapeError("pick_per_row: index length");
  Tensor y({vx.rows(), 1});
  for (int r = 0; r < vx.rows(); ++r) {
    if (idx[static_cast<std::size_t>(r)] < 0 || idx[static_cast<std::size_t>(r)] >= vx.cols())
      throw InvalidInput("pick_per_row: index out of range");
    y.at(r, 0) = vx.at(r, idx[static_cast<std::size_t>(r)]);
  }
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, idx](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (int r = 0; r < go.rows(); ++r) gx.at(r, idx[static_cast<std::size_t>(r)]) += go.at(r, 0);
  })};
}

// ---------------------------------------------------------------------------
// Forward-sum over monotone complete alignments.

Var Graph::forward_sum_nll(Var log_probs) {
  const Tensor& lp = v(log_probs.id);
  const int t_n = lp.rows(), n_n = lp.cols();
  if (t_n < n_n) throw InfeasibleAlignment("forward_sum_nll: more phonemes than frames");
  Tensor alpha = Tensor::uninit({t_n, n_n});
  for (std::int64_t i = 0; i < alpha.numel(); ++i) alpha[i] = kNegInf;
  alpha.at(0, 0) = lp.at(0, 0);
  for (int t = 1; t < t_n; ++t) {
    const int lo = std::max(0, n_n - (t_n - t));
    const int hi = std::min(t, n_n - 1);
    for (int n = lo; n <= hi; ++n) {
      double stay = alpha.at(t - 1, n);
      double adv = n > 0 ? alpha.at(t - 1, n - 1) : kNegInf;
      alpha.at(t, n) = log_add(stay, adv) + lp.at(t, n);
    }
  }
  const double log_z = alpha.at(t_n - 1, n_n - 1);
  int li = log_probs.id;
  Tensor alpha_copy = alpha;
  return {make(Tensor::scalar(-log_z), wants(li),
               [li, alpha_copy, log_z, t_n, n_n](Graph& g, int self) {
    const double go = g.out_grad(self)[0];
    const Tensor& lp2 = g.v(li);
    Tensor beta = Tensor::uninit({t_n, n_n});
    for (std::int64_t i = 0; i < beta.numel(); ++i) beta[i] = kNegInf;
    beta.at(t_n - 1, n_n - 1) = 0.0;
    for (int t = t_n - 2; t >= 0; --t) {
      const int lo = std::max(0, n_n - (t_n - t));
      const int hi = std::min(t, n_n - 1);
      for (int n = lo; n <= hi; ++n) {
        double stay = beta.at(t + 1, n) + lp2.at(t + 1, n);
        double adv = n + 1 < n_n ? beta.at(t + 1, n + 1) + lp2.at(t + 1, n + 1) : kNegInf;
        beta.at(t, n) = log_add(stay, adv);
      }
    }
    Tensor& gx = g.grad_buf(li);
    for (int t = 0; t < t_n; ++t)
      for (int n = 0; n < n_n; ++n) {
        double lg = alpha_copy.at(t, n) + beta.at(t, n) - log_z;
        if (lg > -700.0) gx.at(t, n) -= go * std::exp(lg);
      }
  })};
}

Var Graph::dropout(Var x, double p, Rng& rng) {
  if (!training_ || p <= 0.0) return x;
  const Tensor& vx = v(x.id);
  Tensor mask = Tensor::uninit(vx.shape());
  const double keep = 1.0 - p;
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor y = Tensor::uninit(vx.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = vx[i] * mask[i];
  int xi = x.id;
  return {make(std::move(y), wants(xi), [xi, mask](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_buf(xi);
    for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * mask[i];
  })};
}

}  // namespace sftts
