#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sftts/diffusion.hpp"
#include "sftts/features.hpp"
#include "sftts/layers.hpp"

namespace sftts {

struct ModelConfig {
  int vocab = 8;         // alphabet size
  int d_h = 128;         // hidden width
  int d_s = 128;         // style vector width
  int heads = 2;
  int ffn_kernel = 9;    // FFT-block conv feed-forward kernel
  int text_blocks = 4;
  int gen_blocks = 2;    // per generator
  int aligner_dim = 64;
  int var_kernel = 3;    // variance predictor conv kernel
  int emb_kernel = 3;    // pitch/energy embedding conv kernel
  int unet_base = 32;    // U-Net base width; channel multipliers fixed (1,2,2)
  int temb_dim = 128;
  double dropout = 0.1;
  double beta0 = 0.05;
  double beta1 = 20.0;
  bool no_ef_generators = false;  // ablation: single generator, no formant path
  bool no_energy = false;         // ablation: drop energy embedding and loss

  std::string serialize() const;
  static ModelConfig deserialize(const std::string& text);
};

// z-normalization statistics for pitch/energy targets, computed over the
// training corpus and stored in the checkpoint.
struct NormStats {
  double pitch_mean = 0, pitch_std = 1, energy_mean = 0, energy_std = 1;
};

struct VarianceVars {
  Var log_duration;  // [N, 1]
  Var pitch;         // [N, 1]
  Var energy;        // [N, 1], unused when no_energy
};

struct PathwayVars {
  Var excitation_in;  // [T, d_h]
  Var formant_in;     // [T, d_h], unused when no_ef_generators
};

// The acoustic model: style encoder, text encoder, decomposed variance
// adaptor, excitation/formant generators, and the diffusion score network.
class AcousticModel {
 public:
  AcousticModel(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  // Style encoder: [D x T] reference mel -> [1, d_s]. Trailing all-floor
  // frames are masked out of attention and pooling.
  Var encode_style(Graph& g, const Tensor& reference_dt) const;

  // Text encoder: phoneme ids -> [N, d_h] under style conditioning.
  Var encode_text(Graph& g, const std::vector<int>& phonemes, Var s, double dropout,
                  Rng* drop_rng) const;

  // Aligner: log-domain soft alignment [T, N]; each row is a log-softmax over
  // phonemes of -||query_t - key_n||^2 / sqrt(d_a), plus prior_weight times a
  // beta-binomial diagonal prior.
  Var soft_alignment_log(Graph& g, Var text_hidden, const Tensor& mel_td,
                         double prior_weight) const;

  VarianceVars predict_variances(Graph& g, Var text_hidden, Var s, double dropout,
                                 Rng* drop_rng) const;

  // Length-regulated pathway inputs. pitch/energy are normalized per-phoneme
  // scalars [N, 1]; the formant pathway never sees them.
  PathwayVars build_pathways(Graph& g, Var text_hidden, Var pitch, Var energy,
                             const std::vector<int>& durations) const;

  // Excitation/formant generators: [T, d_h] -> [T, 80] each. In the
  // no_ef_generators ablation the second output is all zeros.
  std::pair<Var, Var> generate_representations(Graph& g, const PathwayVars& paths, Var s,
                                               double dropout, Rng* drop_rng) const;

  // Score estimate for x_t under condition (mu, s, x_f); inputs are [T, 80]
  // time-major mel matrices. T is zero-padded to a multiple of 4 internally.
  Var estimate_score(Graph& g, Var x_t, Var mu, Var s, Var x_f, double t) const;

  NoiseSchedule schedule() const { return NoiseSchedule(cfg_.beta0, cfg_.beta1); }

 private:
  ModelConfig cfg_;
  ParamStore ps_;

  // style encoder
  Conv1d se_c1_, se_c2_;
  Mhsa se_attn1_, se_attn2_;
  LayerNorm se_ln1a_, se_ln1b_, se_ln2a_, se_ln2b_;
  Linear se_ff1a_, se_ff1b_, se_ff2a_, se_ff2b_;
  Linear se_out_;

  // text encoder
  Tensor* embedding_ = nullptr;
  std::vector<FftBlock> text_blocks_;

  // aligner
  Linear al_key1_, al_key2_, al_q1_, al_q2_;

  // variance predictors (conv stacks with layer norm and a linear head)
  struct Predictor {
    Conv1d c1, c2;
    LayerNorm ln1, ln2;
    Linear head;
  };
  Predictor dur_pred_, pitch_pred_, energy_pred_;
  Linear var_cond_;  // style conditioning added to predictor inputs
  Conv1d pitch_emb_, energy_emb_;

  // generators
  std::vector<FftBlock> exc_blocks_, form_blocks_;
  Linear exc_proj_, form_proj_;

  // score network (3-resolution U-Net, multipliers 1,2,2)
  Linear sn_sproj_, sn_xfproj_;
  Linear sn_temb1_, sn_temb2_;
  Conv2d sn_in_;
  ResBlock2d sn_down0_, sn_down1_, sn_down2_, sn_mid_, sn_up2_, sn_up1_, sn_up0_;
  Conv2d sn_ds0_, sn_ds1_, sn_us1_, sn_us0_;
  GroupNorm sn_out_norm_;
  Conv2d sn_out_;

  Predictor make_predictor(const std::string& name, Rng& rng);
  Var run_predictor(Graph& g, const Predictor& p, Var x, double dropout, Rng* drop_rng) const;
};

// Number of trailing frames of a [D x T] mel that sit at the log floor.
int trailing_floor_frames(const Tensor& mel_dt);

struct SamplerSpec {
  SolverMode mode = SolverMode::kOde;
  int steps = 50;
  double tau = 1.5;
  std::uint64_t seed = 0;
};

struct SynthesisResult {
  Tensor x_hat;       // [D x T] composed output
  Tensor x_e;         // [D x T] excitation prior mu
  Tensor x_e_refined; // [D x T]
  Tensor x_f;         // [D x T] formant representation (zeros under ablation)
  std::vector<int> durations;
  std::vector<double> pitch, energy;  // normalized predictor outputs
};

// Full inference pipeline: reference mel -> style, text -> variance
// predictions -> pathways -> generators -> diffusion refinement -> output.
SynthesisResult synthesize(AcousticModel& model, const NormStats& stats,
                           const std::vector<int>& phonemes, const Tensor& reference_dt,
                           const SamplerSpec& sampler);

}  // namespace sftts
