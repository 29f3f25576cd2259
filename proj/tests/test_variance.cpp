#include <cmath>

#include "doctest.h"
#include "sftts/alignment.hpp"
#include "sftts/corpus.hpp"
#include "sftts/losses.hpp"
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
  cfg.text_blocks = 1;
  cfg.gen_blocks = 1;
  cfg.aligner_dim = 8;
  cfg.unet_base = 4;
  cfg.temb_dim = 16;
  return cfg;
}

Tensor random_mel_td(int frames, Rng& rng) {
  Tensor mel({frames, kMelBins});
  for (std::int64_t i = 0; i < mel.numel(); ++i) mel[i] = log_floor() + 6.0 * rng.uniform();
  return mel;
}
}  // namespace

TEST_CASE("soft alignment: single phoneme takes all the mass") {
  AcousticModel model(tiny_cfg(), 3);
  Rng rng(3);
  Tensor h = random_tensor({1, 16}, rng);
  Tensor mel = random_mel_td(9, rng);
  Graph g;
  Tensor log_soft = g.val(model.soft_alignment_log(g, g.input(h), mel, 0.0));
  REQUIRE(log_soft.rows() == 9);
  REQUIRE(log_soft.cols() == 1);
  for (int t = 0; t < 9; ++t) CHECK(std::exp(log_soft.at(t, 0)) == doctest::Approx(1.0));
}

TEST_CASE("soft alignment: identical keys give uniform columns with the prior off") {
  AcousticModel model(tiny_cfg(), 5);
  Rng rng(5);
  Tensor h({4, 16});
  for (int c = 0; c < 16; ++c) {
    const double v = rng.normal();
    for (int r = 0; r < 4; ++r) h.at(r, c) = v;
  }
  Tensor mel = random_mel_td(10, rng);
  Graph g;
  Tensor log_soft = g.val(model.soft_alignment_log(g, g.input(h), mel, 0.0));
  for (int t = 0; t < 10; ++t)
    for (int n = 0; n < 4; ++n)
      CHECK(std::exp(log_soft.at(t, n)) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("soft alignment: rows are normalized distributions") {
  AcousticModel model(tiny_cfg(), 7);
  Rng rng(7);
  Tensor h = random_tensor({5, 16}, rng);
  Tensor mel = random_mel_td(12, rng);
  Graph g;
  Tensor log_soft = g.val(model.soft_alignment_log(g, g.input(h), mel, 1.0));
  for (int t = 0; t < 12; ++t) {
    double s = 0;
    for (int n = 0; n < 5; ++n) s += std::exp(log_soft.at(t, n));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("soft alignment: infeasible when frames < phonemes") {
  AcousticModel model(tiny_cfg(), 9);
  Rng rng(9);
  Tensor h = random_tensor({6, 16}, rng);
  Tensor mel = random_mel_td(4, rng);
  Graph g;
  CHECK_THROWS_AS(model.soft_alignment_log(g, g.input(h), mel, 0.0), InfeasibleAlignment);
}

TEST_CASE("predict_variances: lengths and determinism") {
  AcousticModel model(tiny_cfg(), 11);
  Rng rng(11);
  Tensor s({1, 16});
  for (int i = 0; i < 16; ++i) s[i] = rng.normal();
  Graph g;
  Var h = model.encode_text(g, {0, 2, 4, 6, 1}, g.input(s), 0.0, nullptr);
  VarianceVars v1 = model.predict_variances(g, h, g.input(s), 0.0, nullptr);
  CHECK(g.val(v1.log_duration).rows() == 5);
  CHECK(g.val(v1.pitch).rows() == 5);
  CHECK(g.val(v1.energy).rows() == 5);
  VarianceVars v2 = model.predict_variances(g, h, g.input(s), 0.0, nullptr);
  for (int i = 0; i < 5; ++i)
    CHECK(g.val(v1.log_duration).at(i, 0) == g.val(v2.log_duration).at(i, 0));
}

TEST_CASE("duration predictor overfits one utterance") {
  ModelConfig cfg = tiny_cfg();
  AcousticModel model(cfg, 13);
  ParamStore& ps = model.params();
  ps.ensure_opt_state();
  Rng rng(13);
  Tensor s({1, 16});
  for (int i = 0; i < 16; ++i) s[i] = rng.normal();
  const std::vector<int> ids{0, 3, 5, 1, 7, 2};
  const std::vector<int> gt_durations{6, 11, 4, 9, 7, 12};

  for (int step = 1; step <= 400; ++step) {
    Graph g(true);
    Var h = model.encode_text(g, ids, g.input(s), 0.0, nullptr);
    VarianceVars preds = model.predict_variances(g, h, g.input(s), 0.0, nullptr);
    Var loss = duration_loss(g, preds.log_duration, gt_durations);
    g.backward(loss);
    const double lr = 5e-3;
    for (auto& e : ps.entries()) {
      auto it = g.param_nodes().find(&e.value);
      if (it == g.param_nodes().end() || !g.has_grad({it->second})) continue;
      const Tensor& grad = g.grad({it->second});
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        e.m[i] = 0.9 * e.m[i] + 0.1 * grad[i];
        e.v[i] = 0.98 * e.v[i] + 0.02 * grad[i] * grad[i];
        e.value[i] -= lr * e.m[i] / (std::sqrt(e.v[i]) + 1e-9);
      }
    }
  }
  Graph g;
  Var h = model.encode_text(g, ids, g.input(s), 0.0, nullptr);
  VarianceVars preds = model.predict_variances(g, h, g.input(s), 0.0, nullptr);
  const Tensor& logd = g.val(preds.log_duration);
  for (int i = 0; i < 6; ++i)
    CHECK(round_duration(std::exp(logd.at(i, 0))) == gt_durations[static_cast<std::size_t>(i)]);
}

TEST_CASE("length regulation: identity, expansion, counting, empty error") {
  Graph g;
  Rng rng(17);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor same = g.val(g.repeat_rows(g.input(x), {1, 1, 1}));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(same[i] == x[i]);

  Tensor two({2, 2}, {1, 2, 3, 4});
  Tensor y = g.val(g.repeat_rows(g.input(two), {2, 3}));
  REQUIRE(y.rows() == 5);
  CHECK(y.at(0, 0) == 1);
  CHECK(y.at(2, 0) == 3);

  for (int rep = 0; rep < 10; ++rep) {
    const int n = 1 + static_cast<int>(rng.below(5));
    std::vector<int> durs(static_cast<std::size_t>(n));
    int total = 0;
    for (auto& d : durs) {
      d = static_cast<int>(rng.below(4));
      total += d;
    }
    if (total == 0) durs[0] = total = 1;
    Tensor v = random_tensor({n, 3}, rng);
    CHECK(g.val(g.repeat_rows(g.input(v), durs)).rows() == total);
  }

  CHECK_THROWS_AS(g.repeat_rows(g.input(two), {0, 0}), InvalidInput);
}

TEST_CASE("length regulation of one-hot rows reproduces the frame-level phoneme map") {
  // Ground-truth durations from a real corpus entry drive the expansion.
  auto ab = make_alphabet(8);
  UtteranceRecord rec = synthesize_utterance({2, 0, 5, 1}, {120, 130, 125, 140},
                                             {0.1, 0.12, 0.1, 0.11}, ab, {1.0, 1.0}, 4);
  const int n = 4;
  Tensor onehot({n, n});
  for (int i = 0; i < n; ++i) onehot.at(i, i) = 1.0;
  Graph g;
  Tensor frames = g.val(g.repeat_rows(g.input(onehot), rec.durations_frames));
  int t = 0;
  for (int ph = 0; ph < n; ++ph)
    for (int d = 0; d < rec.durations_frames[static_cast<std::size_t>(ph)]; ++d, ++t)
      for (int c = 0; c < n; ++c)
        CHECK(frames.at(t, c) == (c == ph ? 1.0 : 0.0));
  CHECK(t == frames.rows());
}

TEST_CASE("build_pathways: zeroed embeddings make the pathways coincide") {
  ModelConfig cfg = tiny_cfg();
  AcousticModel model(cfg, 19);
  for (const char* name : {"var.pitch_emb.w", "var.pitch_emb.b", "var.energy_emb.w",
                           "var.energy_emb.b"}) {
    auto* e = model.params().find(name);
    REQUIRE(e != nullptr);
    for (std::int64_t i = 0; i < e->value.numel(); ++i) e->value[i] = 0.0;
  }
  Rng rng(19);
  Tensor h = random_tensor({4, 16}, rng);
  Tensor pitch = random_tensor({4, 1}, rng);
  Tensor energy = random_tensor({4, 1}, rng);
  Graph g;
  PathwayVars paths = model.build_pathways(g, g.input(h), g.input(pitch), g.input(energy),
                                           {2, 3, 1, 2});
  const Tensor& exc = g.val(paths.excitation_in);
  const Tensor& form = g.val(paths.formant_in);
  REQUIRE(exc.rows() == 8);
  REQUIRE(form.rows() == 8);
  for (std::int64_t i = 0; i < exc.numel(); ++i) CHECK(exc[i] == form[i]);
}

TEST_CASE("pathway isolation: formant input ignores pitch and energy") {
  AcousticModel model(tiny_cfg(), 23);
  Rng rng(23);
  Tensor h = random_tensor({4, 16}, rng);
  Tensor p1 = random_tensor({4, 1}, rng), p2 = random_tensor({4, 1}, rng);
  Tensor e1 = random_tensor({4, 1}, rng), e2 = random_tensor({4, 1}, rng);
  Graph g;
  PathwayVars a = model.build_pathways(g, g.input(h), g.input(p1), g.input(e1), {1, 2, 2, 1});
  PathwayVars b = model.build_pathways(g, g.input(h), g.input(p2), g.input(e2), {1, 2, 2, 1});
  const Tensor& fa = g.val(a.formant_in);
  const Tensor& fb = g.val(b.formant_in);
  for (std::int64_t i = 0; i < fa.numel(); ++i) CHECK(fa[i] == fb[i]);
  // And the excitation pathway does react.
  double diff = 0;
  for (std::int64_t i = 0; i < fa.numel(); ++i)
    diff = std::max(diff, std::abs(g.val(a.excitation_in)[i] - g.val(b.excitation_in)[i]));
  CHECK(diff > 0);
}

TEST_CASE("generators: shapes, isolation, live gradients") {
  AcousticModel model(tiny_cfg(), 29);
  Rng rng(29);
  Tensor h = random_tensor({3, 16}, rng);
  Tensor s({1, 16});
  for (int i = 0; i < 16; ++i) s[i] = rng.normal();
  Tensor p1 = random_tensor({3, 1}, rng), p2 = random_tensor({3, 1}, rng);
  Tensor en = random_tensor({3, 1}, rng);

  Graph g(true);
  Var sv = g.input(s);
  PathwayVars a = model.build_pathways(g, g.input(h), g.input(p1), g.input(en), {2, 2, 3});
  auto [xe_a, xf_a] = model.generate_representations(g, a, sv, 0.0, nullptr);
  CHECK(g.val(xe_a).rows() == 7);
  CHECK(g.val(xe_a).cols() == 80);
  CHECK(g.val(xf_a).rows() == 7);

  PathwayVars b = model.build_pathways(g, g.input(h), g.input(p2), g.input(en), {2, 2, 3});
  auto [xe_b, xf_b] = model.generate_representations(g, b, sv, 0.0, nullptr);
  for (std::int64_t i = 0; i < g.val(xf_a).numel(); ++i)
    CHECK(g.val(xf_a)[i] == g.val(xf_b)[i]);
  (void)xe_b;

  // Nonzero gradient into both generators from a scalar loss on X_E + X_F.
  g.backward(g.mean_all(g.square(g.add(xe_a, xf_a))));
  int live_exc = 0, live_form = 0;
  for (auto& e : model.params().entries()) {
    const bool is_exc = e.name.rfind("gen.exc.", 0) == 0;
    const bool is_form = e.name.rfind("gen.form.", 0) == 0;
    if (!is_exc && !is_form) continue;
    auto it = g.param_nodes().find(&e.value);
    if (it == g.param_nodes().end() || !g.has_grad({it->second})) continue;
    const Tensor& grad = g.grad({it->second});
    for (std::int64_t i = 0; i < grad.numel(); ++i)
      if (grad[i] != 0.0) {
        (is_exc ? live_exc : live_form) += 1;
        break;
      }
  }
  CHECK(live_exc > 0);
  CHECK(live_form > 0);
}

TEST_CASE("ablation: no_ef_generators runs a single generator with zero formant") {
  ModelConfig cfg = tiny_cfg();
  cfg.no_ef_generators = true;
  AcousticModel model(cfg, 31);
  CHECK(model.params().find("gen.form.proj.w") == nullptr);
  Rng rng(31);
  Tensor h = random_tensor({3, 16}, rng);
  Tensor s({1, 16});
  for (int i = 0; i < 16; ++i) s[i] = rng.normal();
  Graph g;
  PathwayVars paths = model.build_pathways(g, g.input(h), g.input(random_tensor({3, 1}, rng)),
                                           g.input(random_tensor({3, 1}, rng)), {2, 1, 2});
  auto [xe, xf] = model.generate_representations(g, paths, g.input(s), 0.0, nullptr);
  (void)xe;
  for (std::int64_t i = 0; i < g.val(xf).numel(); ++i) CHECK(g.val(xf)[i] == 0.0);
}

TEST_CASE("ablation: no_energy drops the energy predictor and embedding") {
  ModelConfig cfg = tiny_cfg();
  cfg.no_energy = true;
  AcousticModel model(cfg, 37);
  CHECK(model.params().find("var.energy.c1.w") == nullptr);
  CHECK(model.params().find("var.energy_emb.w") == nullptr);
  Rng rng(37);
  Tensor h = random_tensor({3, 16}, rng);
  Graph g;
  PathwayVars paths =
      model.build_pathways(g, g.input(h), g.input(random_tensor({3, 1}, rng)), Var{}, {2, 1, 1});
  CHECK(g.val(paths.excitation_in).rows() == 4);
}
