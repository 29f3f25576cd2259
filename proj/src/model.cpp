#include "sftts/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sftts/alignment.hpp"

namespace sftts {

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "vocab=" << vocab << "\nd_h=" << d_h << "\nd_s=" << d_s << "\nheads=" << heads
     << "\nffn_kernel=" << ffn_kernel << "\ntext_blocks=" << text_blocks
     << "\ngen_blocks=" << gen_blocks << "\naligner_dim=" << aligner_dim
     << "\nvar_kernel=" << var_kernel << "\nemb_kernel=" << emb_kernel
     << "\nunet_base=" << unet_base << "\ntemb_dim=" << temb_dim << "\ndropout=" << dropout
     << "\nbeta0=" << beta0 << "\nbeta1=" << beta1
     << "\nno_ef_generators=" << (no_ef_generators ? 1 : 0)
     << "\nno_energy=" << (no_energy ? 1 : 0) << "\n";
  return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "vocab") cfg.vocab = std::stoi(val);
    else if (key == "d_h") cfg.d_h = std::stoi(val);
    else if (key == "d_s") cfg.d_s = std::stoi(val);
    else if (key == "heads") cfg.heads = std::stoi(val);
    else if (key == "ffn_kernel") cfg.ffn_kernel = std::stoi(val);
    else if (key == "text_blocks") cfg.text_blocks = std::stoi(val);
    else if (key == "gen_blocks") cfg.gen_blocks = std::stoi(val);
    else if (key == "aligner_dim") cfg.aligner_dim = std::stoi(val);
    else if (key == "var_kernel") cfg.var_kernel = std::stoi(val);
    else if (key == "emb_kernel") cfg.emb_kernel = std::stoi(val);
    else if (key == "unet_base") cfg.unet_base = std::stoi(val);
    else if (key == "temb_dim") cfg.temb_dim = std::stoi(val);
    else if (key == "dropout") cfg.dropout = std::stod(val);
    else if (key == "beta0") cfg.beta0 = std::stod(val);
    else if (key == "beta1") cfg.beta1 = std::stod(val);
    else if (key == "no_ef_generators") cfg.no_ef_generators = val == "1";
    else if (key == "no_energy") cfg.no_energy = val == "1";
  }
  return cfg;
}

AcousticModel::Predictor AcousticModel::make_predictor(const std::string& name, Rng& rng) {
  Predictor p;
  p.c1 = Conv1d(ps_, name + ".c1", cfg_.d_h, cfg_.d_h, cfg_.var_kernel, rng);
  p.c2 = Conv1d(ps_, name + ".c2", cfg_.d_h, cfg_.d_h, cfg_.var_kernel, rng);
  p.ln1 = LayerNorm(ps_, name + ".ln1", cfg_.d_h, rng);
  p.ln2 = LayerNorm(ps_, name + ".ln2", cfg_.d_h, rng);
  p.head = Linear(ps_, name + ".head", cfg_.d_h, 1, rng);
  return p;
}

AcousticModel::AcousticModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  Rng rng(init_seed);
  const int dh = cfg_.d_h, ds = cfg_.d_s;

  se_c1_ = Conv1d(ps_, "style.c1", kMelBins, dh, 3, rng, /*causal=*/true);
  se_c2_ = Conv1d(ps_, "style.c2", dh, dh, 3, rng, /*causal=*/true);
  se_attn1_ = Mhsa(ps_, "style.attn1", dh, cfg_.heads, rng);
  se_attn2_ = Mhsa(ps_, "style.attn2", dh, cfg_.heads, rng);
  se_ln1a_ = LayerNorm(ps_, "style.ln1a", dh, rng);
  se_ln1b_ = LayerNorm(ps_, "style.ln1b", dh, rng);
  se_ln2a_ = LayerNorm(ps_, "style.ln2a", dh, rng);
  se_ln2b_ = LayerNorm(ps_, "style.ln2b", dh, rng);
  se_ff1a_ = Linear(ps_, "style.ff1a", dh, dh, rng);
  se_ff1b_ = Linear(ps_, "style.ff1b", dh, dh, rng);
  se_ff2a_ = Linear(ps_, "style.ff2a", dh, dh, rng);
  se_ff2b_ = Linear(ps_, "style.ff2b", dh, dh, rng);
  se_out_ = Linear(ps_, "style.out", dh, ds, rng);

  embedding_ = ps_.create("text.embedding", {cfg_.vocab, dh}, Init::kEmbedding, rng);
  for (int i = 0; i < cfg_.text_blocks; ++i)
    text_blocks_.emplace_back(ps_, "text.block" + std::to_string(i), dh, ds, cfg_.heads,
                              cfg_.ffn_kernel, rng);

  al_key1_ = Linear(ps_, "aligner.key1", dh, cfg_.aligner_dim, rng);
  al_key2_ = Linear(ps_, "aligner.key2", cfg_.aligner_dim, cfg_.aligner_dim, rng);
  al_q1_ = Linear(ps_, "aligner.q1", kMelBins, cfg_.aligner_dim, rng);
  al_q2_ = Linear(ps_, "aligner.q2", cfg_.aligner_dim, cfg_.aligner_dim, rng);

  var_cond_ = Linear(ps_, "var.cond", ds, dh, rng);
  dur_pred_ = make_predictor("var.duration", rng);
  pitch_pred_ = make_predictor("var.pitch", rng);
  if (!cfg_.no_energy) energy_pred_ = make_predictor("var.energy", rng);
  pitch_emb_ = Conv1d(ps_, "var.pitch_emb", 1, dh, cfg_.emb_kernel, rng);
  if (!cfg_.no_energy) energy_emb_ = Conv1d(ps_, "var.energy_emb", 1, dh, cfg_.emb_kernel, rng);

  for (int i = 0; i < cfg_.gen_blocks; ++i)
    exc_blocks_.emplace_back(ps_, "gen.exc.block" + std::to_string(i), dh, ds, cfg_.heads,
                             cfg_.ffn_kernel, rng);
  exc_proj_ = Linear(ps_, "gen.exc.proj", dh, kMelBins, rng);
  if (!cfg_.no_ef_generators) {
    for (int i = 0; i < cfg_.gen_blocks; ++i)
      form_blocks_.emplace_back(ps_, "gen.form.block" + std::to_string(i), dh, ds, cfg_.heads,
                                cfg_.ffn_kernel, rng);
    form_proj_ = Linear(ps_, "gen.form.proj", dh, kMelBins, rng);
  }

  const int b = cfg_.unet_base;
  sn_sproj_ = Linear(ps_, "score.sproj", ds, kMelBins, rng);
  sn_xfproj_ = Linear(ps_, "score.xfproj", kMelBins, kMelBins, rng);
  sn_temb1_ = Linear(ps_, "score.temb1", cfg_.temb_dim, cfg_.temb_dim, rng);
  sn_temb2_ = Linear(ps_, "score.temb2", cfg_.temb_dim, cfg_.temb_dim, rng);
  sn_in_ = Conv2d(ps_, "score.in", 4, b, 3, 1, 1, rng);
  sn_down0_ = ResBlock2d(ps_, "score.down0", b, b, cfg_.temb_dim, rng);
  sn_ds0_ = Conv2d(ps_, "score.ds0", b, b, 3, 1, 2, rng);
  sn_down1_ = ResBlock2d(ps_, "score.down1", b, 2 * b, cfg_.temb_dim, rng);
  sn_ds1_ = Conv2d(ps_, "score.ds1", 2 * b, 2 * b, 3, 1, 2, rng);
  sn_down2_ = ResBlock2d(ps_, "score.down2", 2 * b, 2 * b, cfg_.temb_dim, rng);
  sn_mid_ = ResBlock2d(ps_, "score.mid", 2 * b, 2 * b, cfg_.temb_dim, rng);
  sn_up2_ = ResBlock2d(ps_, "score.up2", 4 * b, 2 * b, cfg_.temb_dim, rng);
  sn_us1_ = Conv2d(ps_, "score.us1", 2 * b, 2 * b, 3, 1, 1, rng);
  sn_up1_ = ResBlock2d(ps_, "score.up1", 4 * b, b, cfg_.temb_dim, rng);
  sn_us0_ = Conv2d(ps_, "score.us0", b, b, 3, 1, 1, rng);
  sn_up0_ = ResBlock2d(ps_, "score.up0", 2 * b, b, cfg_.temb_dim, rng);
  sn_out_norm_ = GroupNorm(ps_, "score.out_norm", b, rng);
  sn_out_ = Conv2d(ps_, "score.out", b, 1, 1, 0, 1, rng);
}

int trailing_floor_frames(const Tensor& mel_dt) {
  const double floor = log_floor() + 1e-9;
  int count = 0;
  for (int t = mel_dt.cols() - 1; t >= 0; --t) {
    bool all_floor = true;
    for (int k = 0; k < mel_dt.rows(); ++k)
      if (mel_dt.at(k, t) > floor) {
        all_floor = false;
        break;
      }
    if (!all_floor) break;
    ++count;
  }
  return count;
}

Var AcousticModel::encode_style(Graph& g, const Tensor& reference_dt) const {
  if (reference_dt.rows() != kMelBins) throw ShapeError("encode_style: expected [80 x T] mel");
  const int t_n = reference_dt.cols();
  if (t_n < 8) throw InvalidInput("encode_style: reference shorter than 8 frames");
  int valid = t_n - trailing_floor_frames(reference_dt);
  if (valid < 1) valid = t_n;  // all-silence reference: nothing to mask

  Var x = g.input(sftts::transpose(reference_dt));  // [T, 80]
  x = g.gelu(se_c1_.fwd(g, x));
  x = g.gelu(se_c2_.fwd(g, x));
  // Two transformer layers with key masking on padded frames.
  x = se_ln1a_.fwd(g, g.add(x, se_attn1_.fwd(g, x, valid)));
  x = se_ln1b_.fwd(g, g.add(x, se_ff1b_.fwd(g, g.gelu(se_ff1a_.fwd(g, x)))));
  x = se_ln2a_.fwd(g, g.add(x, se_attn2_.fwd(g, x, valid)));
  x = se_ln2b_.fwd(g, g.add(x, se_ff2b_.fwd(g, g.gelu(se_ff2a_.fwd(g, x)))));
  Var pooled = g.mean_rows_prefix(x, valid);  // [1, d_h]
  return se_out_.fwd(g, pooled);              // [1, d_s]
}

Var AcousticModel::encode_text(Graph& g, const std::vector<int>& phonemes, Var s, double dropout,
                               Rng* drop_rng) const {
  if (phonemes.empty()) throw InvalidInput("encode_text: empty phoneme sequence");
  for (int id : phonemes)
    if (id < 0 || id >= cfg_.vocab) throw InvalidInput("encode_text: phoneme id out of range");
  Var x = g.rows_select(g.param(embedding_), phonemes);
  x = g.add(x, g.input(sinusoidal_positions(static_cast<int>(phonemes.size()), cfg_.d_h)));
  for (const auto& block : text_blocks_) x = block.fwd(g, x, s, -1, dropout, drop_rng);
  return x;
}

Var AcousticModel::soft_alignment_log(Graph& g, Var text_hidden, const Tensor& mel_td,
                                      double prior_weight) const {
  const int n = g.val(text_hidden).rows();
  const int t_n = mel_td.rows();
  if (t_n < n) throw InfeasibleAlignment("soft_alignment: fewer frames than phonemes");
  Var keys = al_key2_.fwd(g, g.gelu(al_key1_.fwd(g, text_hidden)));  // [N, d_a]
  Var queries = al_q2_.fwd(g, g.gelu(al_q1_.fwd(g, g.input_ref(&mel_td))));  // [T, d_a]
  // -||q - k||^2 = 2 q.k - |q|^2 - |k|^2.
  Var logits = g.scale(g.matmul(queries, g.transpose(keys)), 2.0);
  logits = g.add_col_broadcast(logits, g.scale(g.rows_sum_sq(queries), -1.0));
  logits = g.add_row_broadcast(logits, g.transpose(g.scale(g.rows_sum_sq(keys), -1.0)));
  logits = g.scale(logits, 1.0 / std::sqrt(static_cast<double>(cfg_.aligner_dim)));
  if (prior_weight > 0.0)
    logits = g.add(logits, g.input(
        [&] {
          Tensor p = beta_binomial_prior(n, t_n);
          for (std::int64_t i = 0; i < p.numel(); ++i) p[i] *= prior_weight;
          return p;
        }()));
  return g.log_softmax_rows(logits);  // [T, N]
}

Var AcousticModel::run_predictor(Graph& g, const Predictor& p, Var x, double dropout,
                                 Rng* drop_rng) const {
  Var h = p.ln1.fwd(g, g.gelu(p.c1.fwd(g, x)));
  if (drop_rng) h = g.dropout(h, dropout, *drop_rng);
  h = p.ln2.fwd(g, g.gelu(p.c2.fwd(g, h)));
  if (drop_rng) h = g.dropout(h, dropout, *drop_rng);
  return p.head.fwd(g, h);  // [N, 1]
}

VarianceVars AcousticModel::predict_variances(Graph& g, Var text_hidden, Var s, double dropout,
                                              Rng* drop_rng) const {
  const int n = g.val(text_hidden).rows();
  Var cond = var_cond_.fwd(g, s);  // [1, d_h]
  Var x = g.add(text_hidden, g.repeat_rows(cond, std::vector<int>{n}));
  VarianceVars out;
  out.log_duration = run_predictor(g, dur_pred_, x, dropout, drop_rng);
  out.pitch = run_predictor(g, pitch_pred_, x, dropout, drop_rng);
  if (!cfg_.no_energy) out.energy = run_predictor(g, energy_pred_, x, dropout, drop_rng);
  return out;
}

PathwayVars AcousticModel::build_pathways(Graph& g, Var text_hidden, Var pitch, Var energy,
                                          const std::vector<int>& durations) const {
  const int n = g.val(text_hidden).rows();
  if (static_cast<int>(durations.size()) != n)
    throw ShapeError("build_pathways: durations length mismatch");
  if (g.val(pitch).rows() != n) throw ShapeError("build_pathways: pitch length mismatch");
  Var exc = g.add(text_hidden, pitch_emb_.fwd(g, pitch));
  if (!cfg_.no_energy) {
    if (g.val(energy).rows() != n) throw ShapeError("build_pathways: energy length mismatch");
    exc = g.add(exc, energy_emb_.fwd(g, energy));
  }
  PathwayVars out;
  out.excitation_in = g.repeat_rows(exc, durations);
  if (!cfg_.no_ef_generators) out.formant_in = g.repeat_rows(text_hidden, durations);
  return out;
}

std::pair<Var, Var> AcousticModel::generate_representations(Graph& g, const PathwayVars& paths,
                                                            Var s, double dropout,
                                                            Rng* drop_rng) const {
  const int t_n = g.val(paths.excitation_in).rows();
  Var pos = g.input(sinusoidal_positions(t_n, cfg_.d_h));
  Var e = g.add(paths.excitation_in, pos);
  for (const auto& block : exc_blocks_) e = block.fwd(g, e, s, -1, dropout, drop_rng);
  Var x_e = exc_proj_.fwd(g, e);  // [T, 80]
  if (cfg_.no_ef_generators) {
    Var zeros = g.input(Tensor({t_n, kMelBins}));
    return {x_e, zeros};
  }
  Var f = g.add(paths.formant_in, pos);
  for (const auto& block : form_blocks_) f = block.fwd(g, f, s, -1, dropout, drop_rng);
  Var x_f = form_proj_.fwd(g, f);
  return {x_e, x_f};
}

Var AcousticModel::estimate_score(Graph& g, Var x_t, Var mu, Var s, Var x_f, double t) const {
  const Tensor& xv = g.val(x_t);
  const int t_n = xv.rows();
  if (xv.cols() != kMelBins) throw ShapeError("estimate_score: expected [T x 80] input");
  if (!g.val(mu).same_shape(xv) || !g.val(x_f).same_shape(xv))
    throw ShapeError("estimate_score: condition shape mismatch");

  Var temb = g.input(sinusoidal_time_embedding(t, cfg_.temb_dim));
  temb = sn_temb2_.fwd(g, g.gelu(sn_temb1_.fwd(g, temb)));  // [1, temb_dim]

  Var s_chan = g.repeat_rows(sn_sproj_.fwd(g, s), std::vector<int>{t_n});  // [T, 80]
  Var xf_chan = sn_xfproj_.fwd(g, x_f);                                    // [T, 80]

  // Channel-stack as [4, 80, T] grids (mel bins vertical, frames horizontal).
  Var grid = g.stack_channels({g.transpose(x_t), g.transpose(mu), g.transpose(s_chan),
                               g.transpose(xf_chan)});
  const int pad_to = (t_n + 3) / 4 * 4;
  if (pad_to != t_n) grid = g.pad_cols_grid(grid, pad_to);

  Var x = sn_in_.fwd(g, grid);          // [b, 80, T']
  Var a0 = sn_down0_.fwd(g, x, temb);   // [b]
  Var x1 = sn_ds0_.fwd(g, a0);          // [b, 40, T'/2]
  Var a1 = sn_down1_.fwd(g, x1, temb);  // [2b]
  Var x2 = sn_ds1_.fwd(g, a1);          // [2b, 20, T'/4]
  Var a2 = sn_down2_.fwd(g, x2, temb);  // [2b]
  Var m = sn_mid_.fwd(g, a2, temb);     // [2b]

  auto concat_channels = [&](Var a, Var b2) {
    const int ca = g.val(a).dim(0), cb = g.val(b2).dim(0);
    const int h = g.val(a).dim(1), w = g.val(a).dim(2);
    Var fa = g.reshape(a, {ca, h * w});
    Var fb = g.reshape(b2, {cb, h * w});
    return g.reshape(g.concat_rows(fa, fb), {ca + cb, h, w});
  };

  Var u2 = sn_up2_.fwd(g, concat_channels(m, a2), temb);      // [2b, 20, T'/4]
  Var u1in = sn_us1_.fwd(g, g.upsample2x(u2));                // [2b, 40, T'/2]
  Var u1 = sn_up1_.fwd(g, concat_channels(u1in, a1), temb);   // [b]
  Var u0in = sn_us0_.fwd(g, g.upsample2x(u1));                // [b, 80, T']
  Var u0 = sn_up0_.fwd(g, concat_channels(u0in, a0), temb);   // [b]
  Var out = sn_out_.fwd(g, g.gelu(sn_out_norm_.fwd(g, u0)));  // [1, 80, T']
  if (pad_to != t_n) out = g.slice_cols_grid(out, 0, t_n);
  return g.transpose(g.reshape(out, {kMelBins, t_n}));  // [T, 80]
}

SynthesisResult synthesize(AcousticModel& model, const NormStats& stats,
                           const std::vector<int>& phonemes, const Tensor& reference_dt,
                           const SamplerSpec& sampler) {
  (void)stats;  // predictions stay in the normalized domain end to end
  Graph g(false);
  Var s = model.encode_style(g, reference_dt);
  Var h = model.encode_text(g, phonemes, s, 0.0, nullptr);
  VarianceVars preds = model.predict_variances(g, h, s, 0.0, nullptr);

  std::vector<int> durations(phonemes.size());
  const Tensor& logd = g.val(preds.log_duration);
  for (std::size_t i = 0; i < phonemes.size(); ++i)
    durations[i] = round_duration(std::exp(logd.at(static_cast<int>(i), 0)));

  Var energy = model.config().no_energy ? Var{} : preds.energy;
  PathwayVars paths = model.build_pathways(g, h, preds.pitch, energy, durations);
  auto [x_e_v, x_f_v] = model.generate_representations(g, paths, s, 0.0, nullptr);

  const Tensor mu_td = g.val(x_e_v);
  const Tensor xf_td = g.val(x_f_v);
  const Tensor s_val = g.val(s);

  NoiseSchedule sched = model.schedule();
  ScoreFn score_fn = [&model, &mu_td, &xf_td, &s_val](const Tensor& x_td, double t) {
    Graph gs(false);
    Var out = model.estimate_score(gs, gs.input_ref(&x_td), gs.input_ref(&mu_td),
                                   gs.input_ref(&s_val), gs.input_ref(&xf_td), t);
    return gs.val(out);
  };
  Tensor refined_td =
      sample_reverse(mu_td, sampler.steps, sampler.tau, sampler.mode, sched, score_fn,
                     sampler.seed);

  SynthesisResult res;
  res.x_e = sftts::transpose(mu_td);
  res.x_f = sftts::transpose(xf_td);
  res.x_e_refined = sftts::transpose(refined_td);
  res.x_hat = compose_output(res.x_e_refined, res.x_f);
  res.durations = durations;
  const Tensor& pv = g.val(preds.pitch);
  for (int i = 0; i < pv.rows(); ++i) res.pitch.push_back(pv.at(i, 0));
  if (!model.config().no_energy) {
    const Tensor& ev = g.val(preds.energy);
    for (int i = 0; i < ev.rows(); ++i) res.energy.push_back(ev.at(i, 0));
  }
  return res;
}

}  // namespace sftts
