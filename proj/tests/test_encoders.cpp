#include <cmath>

#include "doctest.h"
#include "sftts/model.hpp"
#include "testutil.hpp"

using namespace sftts;
using testutil::random_tensor;

namespace {
ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.vocab = 8;
  cfg.d_h = 16;
  cfg.d_s = 16;
  cfg.heads = 2;
  cfg.ffn_kernel = 3;
  cfg.text_blocks = 2;
  cfg.gen_blocks = 1;
  cfg.aligner_dim = 8;
  cfg.unet_base = 4;
  cfg.temb_dim = 16;
  return cfg;
}

Tensor random_mel(int frames, Rng& rng, double lift = 0.0) {
  Tensor mel({kMelBins, frames});
  for (std::int64_t i = 0; i < mel.numel(); ++i)
    mel[i] = log_floor() + 6.0 * rng.uniform() + lift;
  return mel;
}
}  // namespace

TEST_CASE("encode_style: determinism and too-short input") {
  AcousticModel model(tiny_cfg(), 7);
  Rng rng(1);
  Tensor ref = random_mel(20, rng);
  Graph g1, g2;
  Tensor s1 = g1.val(model.encode_style(g1, ref));
  Tensor s2 = g2.val(model.encode_style(g2, ref));
  for (std::int64_t i = 0; i < s1.numel(); ++i) CHECK(s1[i] == s2[i]);

  Tensor tiny = random_mel(5, rng);
  Graph g3;
  CHECK_THROWS_AS(model.encode_style(g3, tiny), InvalidInput);
}

TEST_CASE("encode_style: trailing log-floor padding leaves the vector unchanged") {
  AcousticModel model(tiny_cfg(), 7);
  Rng rng(3);
  Tensor ref = random_mel(18, rng, 0.5);
  Tensor padded({kMelBins, 26});
  for (int k = 0; k < kMelBins; ++k) {
    for (int t = 0; t < 18; ++t) padded.at(k, t) = ref.at(k, t);
    for (int t = 18; t < 26; ++t) padded.at(k, t) = log_floor();
  }
  Graph g1, g2;
  Tensor s1 = g1.val(model.encode_style(g1, ref));
  Tensor s2 = g2.val(model.encode_style(g2, padded));
  // BLAS blocking differs with the matrix width, so allow last-ulp noise.
  for (std::int64_t i = 0; i < s1.numel(); ++i)
    CHECK(std::abs(s1[i] - s2[i]) <= 1e-12 * std::max(1.0, std::abs(s1[i])));
}

TEST_CASE("encode_style: distinct references give non-identical directions") {
  AcousticModel model(tiny_cfg(), 7);
  Rng rng(5);
  Tensor a = random_mel(16, rng), b = random_mel(16, rng);
  Graph g;
  Tensor sa = g.val(model.encode_style(g, a));
  Tensor sb = g.val(model.encode_style(g, b));
  double dot = 0, na = 0, nb = 0;
  for (std::int64_t i = 0; i < sa.numel(); ++i) {
    dot += sa[i] * sb[i];
    na += sa[i] * sa[i];
    nb += sb[i] * sb[i];
  }
  CHECK(dot / std::sqrt(na * nb) < 1.0 - 1e-9);
}

TEST_CASE("saln: plain layer norm when gain is one and bias zero") {
  Rng rng(7);
  ParamStore ps;
  const int dim = 16;
  Saln saln(ps, "t", 6, dim, rng);
  // Zero the style maps: gain(s) = 1 (bias init), bias(s) = 0 for every s.
  for (auto* t : {saln.gain_map.w, saln.bias_map.w, saln.bias_map.b})
    for (std::int64_t i = 0; i < t->numel(); ++i) (*t)[i] = 0.0;

  Graph g;
  Tensor x = random_tensor({5, dim}, rng, 2.0);
  Tensor s({1, 6});
  for (std::int64_t i = 0; i < s.numel(); ++i) s[i] = rng.normal();
  Tensor y = g.val(saln.fwd(g, g.input(x), g.input(s)));
  for (int r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < dim; ++c) m += y.at(r, c);
    m /= dim;
    for (int c = 0; c < dim; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= dim;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("saln: constant row collapses to bias(s), and affine identity holds") {
  Rng rng(11);
  ParamStore ps;
  Saln saln(ps, "t", 6, 4, rng);
  Tensor s({1, 6});
  for (std::int64_t i = 0; i < 6; ++i) s[i] = rng.normal();

  Graph g;
  Var sv = g.input(s);
  Tensor x_const = Tensor::full({1, 4}, 3.25);
  Tensor y = g.val(saln.fwd(g, g.input(x_const), sv));
  Tensor bias = g.val(saln.bias_map.fwd(g, sv));
  // Zero-variance row: normalized value is 0/sqrt(eps), output = bias.
  for (int c = 0; c < 4; ++c) CHECK(y.at(0, c) == doctest::Approx(bias.at(0, c)).epsilon(1e-9));

  // saln(x, s) == gain(s) * layer_norm(x) + bias(s) element-wise.
  Tensor x = testutil::random_tensor({3, 4}, rng);
  Tensor whole = g.val(saln.fwd(g, g.input(x), sv));
  Tensor unit = g.val(g.layer_norm_rows(g.input(x)));
  Tensor gain = g.val(saln.gain_map.fwd(g, sv));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(whole.at(r, c) ==
            doctest::Approx(gain.at(0, c) * unit.at(r, c) + bias.at(0, c)).epsilon(1e-12));
}

TEST_CASE("encode_text: shape, determinism, style sensitivity, unknown id") {
  AcousticModel model(tiny_cfg(), 13);
  Rng rng(13);
  Tensor s1({1, 16}), s2({1, 16});
  for (int i = 0; i < 16; ++i) {
    s1[i] = rng.normal();
    s2[i] = rng.normal();
  }
  const std::vector<int> ids{0, 3, 2, 6, 1, 5, 7};
  Graph g;
  Tensor h1 = g.val(model.encode_text(g, ids, g.input(s1), 0.0, nullptr));
  CHECK(h1.rows() == 7);
  CHECK(h1.cols() == 16);

  Graph g2;
  Tensor h1b = g2.val(model.encode_text(g2, ids, g2.input(s1), 0.0, nullptr));
  for (std::int64_t i = 0; i < h1.numel(); ++i) CHECK(h1[i] == h1b[i]);

  Graph g3;
  Tensor h2 = g3.val(model.encode_text(g3, ids, g3.input(s2), 0.0, nullptr));
  double max_diff = 0;
  for (std::int64_t i = 0; i < h1.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(h1[i] - h2[i]));
  CHECK(max_diff > 0.0);

  Graph g4;
  CHECK_THROWS_AS(model.encode_text(g4, {0, 99}, g4.input(s1), 0.0, nullptr), InvalidInput);
  Graph g5;
  CHECK_THROWS_AS(model.encode_text(g5, {}, g5.input(s1), 0.0, nullptr), InvalidInput);
}

TEST_CASE("encode_text: permuting the input changes the output") {
  AcousticModel model(tiny_cfg(), 17);
  Rng rng(17);
  Tensor s({1, 16});
  for (int i = 0; i < 16; ++i) s[i] = rng.normal();
  Graph g;
  Tensor a = g.val(model.encode_text(g, {0, 1, 2, 3}, g.input(s), 0.0, nullptr));
  Tensor b = g.val(model.encode_text(g, {3, 2, 1, 0}, g.input(s), 0.0, nullptr));
  // Compare the row multisets loosely: even summed over positions the outputs
  // differ because positional encodings break permutation equivariance.
  double diff = 0;
  for (int c = 0; c < 16; ++c) {
    double sa = 0, sb = 0;
    for (int r = 0; r < 4; ++r) {
      sa += a.at(r, c);
      sb += b.at(r, c);
    }
    diff += std::abs(sa - sb);
  }
  CHECK(diff > 1e-9);
}

TEST_CASE("encode_text: every encoder parameter receives gradient") {
  AcousticModel model(tiny_cfg(), 19);
  Rng rng(19);
  Tensor ref = random_mel(16, rng);
  Graph g(true);
  Var s = model.encode_style(g, ref);
  Var h = model.encode_text(g, {0, 1, 2, 3, 4, 5, 6, 7}, s, 0.0, nullptr);
  g.backward(g.mean_all(g.square(h)));

  for (auto& e : model.params().entries()) {
    if (e.name.rfind("text.", 0) != 0 && e.name.rfind("style.", 0) != 0) continue;
    auto it = g.param_nodes().find(&e.value);
    REQUIRE_MESSAGE(it != g.param_nodes().end(), e.name);
    const Tensor& grad = g.grad({it->second});
    double mx = 0;
    for (std::int64_t i = 0; i < grad.numel(); ++i) mx = std::max(mx, std::abs(grad[i]));
    INFO("param ", e.name);
    CHECK(mx > 0.0);
  }
}
