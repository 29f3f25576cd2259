#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sftts/corpus.hpp"
#include "sftts/losses.hpp"
#include "sftts/model.hpp"

namespace sftts {

struct TrainConfig {
  int batch_size = 16;
  long max_steps = 20000;
  int warmup_steps = 4000;
  double lr_scale = 1.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  long prior_anneal_steps = 10000;  // diagonal alignment prior active before this step
  int diffusion_crop = 32;          // frames fed to the score network per item
  double t_min = 1e-5;              // lower end of the diffusion time draw
  int log_every = 50;
  long checkpoint_every = 0;  // 0: only the final checkpoint
  int threads = 2;
  LossWeights weights;

  std::string serialize() const;
};

// Inverse-square-root schedule with linear warmup:
// scale * min(step^-1/2, step * warmup^-3/2).
double lr_at(long step, int warmup, double scale);

// Per-utterance precomputed features.
struct ItemFeatures {
  std::vector<int> phonemes;
  Tensor mel_td;  // [T, 80]
  Tensor mel_dt;  // [80, T]
  std::vector<double> f0_frames, energy_frames;
  std::vector<int> gt_durations;
  int speaker = 0;
};

std::vector<ItemFeatures> prepare_features(const CorpusManifest& corpus);
NormStats compute_norm_stats(const std::vector<ItemFeatures>& items);

struct StepRecord {
  long step = 0;
  LossBreakdown losses;
  double lr = 0;
  double wall_ms = 0;
};

struct FitResult {
  std::string checkpoint_path;
  std::vector<StepRecord> log;  // one record per log_every steps plus the final step
};

// Full training loop: Adam, warmup schedule, gradient clipping, periodic
// checkpoints, tab-separated loss log under out_dir.
FitResult fit(const CorpusManifest& corpus, const ModelConfig& model_cfg, const TrainConfig& cfg,
              const std::string& out_dir);

// Versioned checkpoint container (parameters, optimizer state, config echo,
// normalization statistics, step count). Round-trips bitwise.
void save_checkpoint(const std::string& path, const AcousticModel& model, const NormStats& stats,
                     long step, const std::string& train_cfg_echo,
                     const std::string& alphabet_echo, bool with_optimizer);

struct LoadedCheckpoint {
  std::unique_ptr<AcousticModel> model;
  NormStats stats;
  long step = 0;
  std::string train_cfg_echo;
  std::vector<PhonemeSpec> alphabet;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// FNV-1a hash of a file's bytes, for run manifests.
std::uint64_t file_hash(const std::string& path);

}  // namespace sftts
