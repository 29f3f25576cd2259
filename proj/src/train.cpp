#include "sftts/train.hpp"

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "sftts/alignment.hpp"

extern "C" void openblas_set_num_threads(int);

namespace sftts {

namespace fs = std::filesystem;

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "batch_size=" << batch_size << "\nmax_steps=" << max_steps
     << "\nwarmup_steps=" << warmup_steps << "\nlr_scale=" << lr_scale
     << "\ngrad_clip=" << grad_clip << "\nseed=" << seed
     << "\nprior_anneal_steps=" << prior_anneal_steps << "\ndiffusion_crop=" << diffusion_crop
     << "\nt_min=" << t_min << "\nthreads=" << threads << "\n";
  return os.str();
}

double lr_at(long step, int warmup, double scale) {
  if (step < 1) throw DomainError("lr_at: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

std::vector<ItemFeatures> prepare_features(const CorpusManifest& corpus) {
  std::vector<ItemFeatures> items;
  items.reserve(corpus.entries.size());
  for (const auto& e : corpus.entries) {
    ItemFeatures f;
    for (const auto& sym : e.phonemes) f.phonemes.push_back(corpus.phoneme_id(sym));
    Waveform w = read_wav((fs::path(corpus.root) / e.audio_path).string());
    Tensor mag = stft_magnitude(w);
    MelSpectrogram mel = mel_from_magnitude(mag);
    f.mel_dt = mel.values;
    f.mel_td = transpose(mel.values);
    f.f0_frames = extract_f0(w);
    f.energy_frames = compute_energy(mag);
    f.gt_durations = e.durations_frames;
    f.speaker = e.speaker;
    items.push_back(std::move(f));
  }
  return items;
}

NormStats compute_norm_stats(const std::vector<ItemFeatures>& items) {
  NormStats st;
  double psum = 0, psq = 0, esum = 0, esq = 0;
  long pn = 0, en = 0;
  for (const auto& it : items) {
    for (double v : it.f0_frames)
      if (v > 0) {
        psum += v;
        psq += v * v;
        ++pn;
      }
    for (double v : it.energy_frames) {
      esum += v;
      esq += v * v;
      ++en;
    }
  }
  if (pn > 0) {
    st.pitch_mean = psum / pn;
    st.pitch_std = std::max(1e-6, std::sqrt(std::max(0.0, psq / pn - st.pitch_mean * st.pitch_mean)));
  }
  if (en > 0) {
    st.energy_mean = esum / en;
    st.energy_std =
        std::max(1e-6, std::sqrt(std::max(0.0, esq / en - st.energy_mean * st.energy_mean)));
  }
  return st;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  Rng r(seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xd1b54a32d192ed03ULL));
  return r.next_u64();
}

struct ItemResult {
  LossBreakdown losses;
  std::vector<int> hard_durations;
};

// Builds one item's graph, runs backward, and adds gradients into acc
// (indexed like the entry deque). Returns the loss parts.
ItemResult run_item(AcousticModel& model, const NormStats& stats, const ItemFeatures& feats,
                    const TrainConfig& cfg, long step, std::uint64_t item_index,
                    std::vector<Tensor>& acc,
                    const std::unordered_map<Tensor*, std::size_t>& entry_of) {
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step), item_index));
  Graph g(true);
  const ModelConfig& mc = model.config();

  Var s = model.encode_style(g, feats.mel_dt);
  Var h = model.encode_text(g, feats.phonemes, s, mc.dropout, &rng);
  const double prior_w = step <= cfg.prior_anneal_steps ? 1.0 : 0.0;
  Var log_soft = model.soft_alignment_log(g, h, feats.mel_td, prior_w);

  std::vector<int> hard = viterbi_hard_alignment(transpose(g.val(log_soft)));

  const int n = static_cast<int>(feats.phonemes.size());
  auto pitch_ph = average_over_phonemes(feats.f0_frames, hard, /*voiced_only=*/true);
  auto energy_ph = average_over_phonemes(feats.energy_frames, hard, /*voiced_only=*/false);
  Tensor pitch_t({n, 1}), energy_t({n, 1});
  for (int i = 0; i < n; ++i) {
    const double p = pitch_ph[static_cast<std::size_t>(i)];
    pitch_t[i] = p > 0 ? (p - stats.pitch_mean) / stats.pitch_std : 0.0;
    energy_t[i] = (energy_ph[static_cast<std::size_t>(i)] - stats.energy_mean) / stats.energy_std;
  }

  VarianceVars preds = model.predict_variances(g, h, s, mc.dropout, &rng);
  Var pitch_in = g.input(pitch_t);
  Var energy_in = mc.no_energy ? Var{} : g.input(energy_t);
  PathwayVars paths = model.build_pathways(g, h, pitch_in, energy_in, hard);
  auto [x_e, x_f] = model.generate_representations(g, paths, s, mc.dropout, &rng);

  // Diffusion on a random fixed-width crop, padded widths handled by the
  // score net itself when T is short.
  const int t_total = feats.mel_td.rows();
  int crop = std::min(cfg.diffusion_crop, t_total);
  const int t0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(t_total - crop + 1)));
  Var mu_c = g.slice_rows(x_e, t0, t0 + crop);
  Var xf_c = g.slice_rows(x_f, t0, t0 + crop);
  Tensor x0_c({crop, kMelBins});
  for (int r = 0; r < crop; ++r)
    for (int c = 0; c < kMelBins; ++c) x0_c.at(r, c) = feats.mel_td.at(t0 + r, c);

  const double t_diff = rng.uniform(cfg.t_min, 1.0);
  NoiseSchedule sched = model.schedule();
  const double a = sched.meancoef(t_diff);
  const double sd = std::sqrt(sched.lambda(t_diff));
  Tensor eps({crop, kMelBins});
  for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
  Tensor noise_term(eps.shape());
  for (std::int64_t i = 0; i < eps.numel(); ++i) noise_term[i] = a * x0_c[i] + sd * eps[i];
  Var x_t = g.add_scaled(mu_c, 1.0 - a, g.input(noise_term), 1.0);
  Var score = model.estimate_score(g, x_t, mu_c, s, xf_c, t_diff);

  LossInputs in;
  in.log_dur_pred = preds.log_duration;
  in.pitch_pred = preds.pitch;
  in.energy_pred = preds.energy;
  in.pitch_target = pitch_t;
  in.energy_target = energy_t;
  in.hard_durations = hard;
  in.log_soft = log_soft;
  in.mu = x_e;
  in.x_f = x_f;
  in.x = &feats.mel_td;
  in.score_out = score;
  in.eps = eps;
  in.t = t_diff;
  in.sched = sched;
  in.no_energy = mc.no_energy;

  ItemResult res;
  Var total = compute_losses(g, in, cfg.weights, &res.losses);
  res.hard_durations = std::move(hard);
  g.backward(total);

  for (const auto& [tensor, node] : g.param_nodes()) {
    if (!g.has_grad({node})) continue;
    const Tensor& grad = g.grad({node});
    Tensor& dst = acc[entry_of.at(tensor)];
    for (std::int64_t i = 0; i < grad.numel(); ++i) dst[i] += grad[i];
  }
  return res;
}

}  // namespace

FitResult fit(const CorpusManifest& corpus, const ModelConfig& model_cfg, const TrainConfig& cfg,
              const std::string& out_dir) {
  if (corpus.entries.empty()) throw InvalidInput("fit: empty corpus");
  // Per-step graphs allocate tens of MB; keep freed blocks in the arena
  // instead of returning pages to the kernel every step.
  static std::once_flag malloc_tuned;
  std::call_once(malloc_tuned, [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  });
  fs::create_directories(out_dir);

  std::vector<ItemFeatures> items = prepare_features(corpus);
  NormStats stats = compute_norm_stats(items);

  AcousticModel model(model_cfg, cfg.seed);
  ParamStore& ps = model.params();
  ps.ensure_opt_state();

  std::unordered_map<Tensor*, std::size_t> entry_of;
  {
    std::size_t i = 0;
    for (auto& e : ps.entries()) entry_of[&e.value] = i++;
  }

  const int n_threads = std::max(1, cfg.threads);
  if (n_threads > 1) openblas_set_num_threads(1);

  std::ofstream log_os(fs::path(out_dir) / "train_log.tsv");
  log_os << "step\tduration\tpitch\tenergy\talign\tprior\tdiffusion\ttotal\tlr\twall_ms\n";

  Rng batch_rng(mix_seed(cfg.seed, 0xba7c4, 0));
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // force initial shuffle

  // Adam state counter decoupled from the step counter in case of resume.
  const double b1 = 0.9, b2 = 0.98, adam_eps = 1e-9;

  FitResult result;
  const auto t_start = std::chrono::steady_clock::now();

  for (long step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::size_t> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor >= order.size()) {
        for (std::size_t j = order.size(); j > 1; --j)
          std::swap(order[j - 1], order[batch_rng.below(j)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    for (auto& e : ps.entries())
      std::fill(e.grad.vec().begin(), e.grad.vec().end(), 0.0);

    const int workers = std::min<int>(n_threads, static_cast<int>(batch.size()));
    std::vector<std::vector<Tensor>> accs(static_cast<std::size_t>(workers));
    std::vector<LossBreakdown> parts(batch.size());
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            auto& acc = accs[static_cast<std::size_t>(w)];
            acc.reserve(ps.entries().size());
            for (auto& e : ps.entries()) acc.emplace_back(e.value.shape());
            for (std::size_t i = static_cast<std::size_t>(w); i < batch.size();
                 i += static_cast<std::size_t>(workers)) {
              ItemResult r = run_item(model, stats, items[batch[i]], cfg, step,
                                      static_cast<std::uint64_t>(i), acc, entry_of);
              parts[i] = r.losses;
            }
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
    }
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);

    // Deterministic merge in worker order, then average over the batch.
    {
      std::size_t ei = 0;
      for (auto& e : ps.entries()) {
        for (int w = 0; w < workers; ++w) {
          const Tensor& a = accs[static_cast<std::size_t>(w)][ei];
          for (std::int64_t i = 0; i < a.numel(); ++i) e.grad[i] += a[i];
        }
        for (std::int64_t i = 0; i < e.grad.numel(); ++i)
          e.grad[i] /= static_cast<double>(batch.size());
        ++ei;
      }
    }

    double grad_norm_sq = 0;
    for (auto& e : ps.entries())
      for (std::int64_t i = 0; i < e.grad.numel(); ++i) grad_norm_sq += e.grad[i] * e.grad[i];
    if (!std::isfinite(grad_norm_sq))
      throw TrainingDivergence("fit: non-finite gradient at step " + std::to_string(step));
    const double gscale =
        grad_norm_sq > cfg.grad_clip * cfg.grad_clip ? cfg.grad_clip / std::sqrt(grad_norm_sq) : 1.0;

    const double lr = lr_at(step, cfg.warmup_steps, cfg.lr_scale);
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (auto& e : ps.entries()) {
      for (std::int64_t i = 0; i < e.value.numel(); ++i) {
        const double gi = e.grad[i] * gscale;
        e.m[i] = b1 * e.m[i] + (1.0 - b1) * gi;
        e.v[i] = b2 * e.v[i] + (1.0 - b2) * gi * gi;
        e.value[i] -= lr * (e.m[i] / bc1) / (std::sqrt(e.v[i] / bc2) + adam_eps);
      }
    }

    LossBreakdown avg;
    for (const auto& p : parts) {
      avg.duration += p.duration;
      avg.pitch += p.pitch;
      avg.energy += p.energy;
      avg.align += p.align;
      avg.prior += p.prior;
      avg.diffusion += p.diffusion;
      avg.total += p.total;
    }
    const double inv = 1.0 / static_cast<double>(parts.size());
    avg.duration *= inv;
    avg.pitch *= inv;
    avg.energy *= inv;
    avg.align *= inv;
    avg.prior *= inv;
    avg.diffusion *= inv;
    avg.total *= inv;
    if (!std::isfinite(avg.total))
      throw TrainingDivergence("fit: non-finite loss at step " + std::to_string(step));

    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
            .count();
    if (step % cfg.log_every == 0 || step == 1 || step == cfg.max_steps) {
      log_os << step << '\t' << avg.duration << '\t' << avg.pitch << '\t' << avg.energy << '\t'
             << avg.align << '\t' << avg.prior << '\t' << avg.diffusion << '\t' << avg.total
             << '\t' << lr << '\t' << wall_ms << '\n';
      log_os.flush();
      result.log.push_back({step, avg, lr, wall_ms});
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.max_steps) {
      save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(step) + ".sfck")).string(),
                      model, stats, step, cfg.serialize(), serialize_alphabet(corpus.alphabet),
                      true);
    }
  }

  if (n_threads > 1) openblas_set_num_threads(2);

  result.checkpoint_path = (fs::path(out_dir) / "model.sfck").string();
  save_checkpoint(result.checkpoint_path, model, stats, cfg.max_steps, cfg.serialize(),
                  serialize_alphabet(corpus.alphabet), true);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint container.

namespace {
void put_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ofstream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
void put_f64(std::ofstream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_blob(std::ofstream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint32_t get_u32(std::ifstream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t get_u64(std::ifstream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double get_f64(std::ifstream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string get_blob(std::ifstream& is) {
  const std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}
void put_tensor(std::ofstream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * 8));
}
Tensor get_tensor(std::ifstream& is) {
  const std::uint32_t nd = get_u32(is);
  if (nd > 4) throw IoError("checkpoint: implausible tensor rank");
  std::vector<int> shape(nd);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
  return t;
}
}  // namespace

void save_checkpoint(const std::string& path, const AcousticModel& model, const NormStats& stats,
                     long step, const std::string& train_cfg_echo,
                     const std::string& alphabet_echo, bool with_optimizer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  os.write("SFCK", 4);
  put_u32(os, 1);
  put_u64(os, static_cast<std::uint64_t>(step));
  put_blob(os, model.config().serialize());
  put_blob(os, train_cfg_echo);
  put_blob(os, alphabet_echo);
  put_f64(os, stats.pitch_mean);
  put_f64(os, stats.pitch_std);
  put_f64(os, stats.energy_mean);
  put_f64(os, stats.energy_std);
  const auto& entries = model.params().entries();
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  put_u32(os, with_optimizer ? 1 : 0);
  for (const auto& e : entries) {
    put_blob(os, e.name);
    put_tensor(os, e.value);
    if (with_optimizer) {
      put_tensor(os, e.m);
      put_tensor(os, e.v);
    }
  }
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SFCK", 4) != 0)
    throw IoError("load_checkpoint: bad magic in " + path);
  if (get_u32(is) != 1) throw IoError("load_checkpoint: unsupported version");
  LoadedCheckpoint out;
  out.step = static_cast<long>(get_u64(is));
  const ModelConfig cfg = ModelConfig::deserialize(get_blob(is));
  out.train_cfg_echo = get_blob(is);
  const std::string alphabet_echo = get_blob(is);
  if (!alphabet_echo.empty()) out.alphabet = parse_alphabet(alphabet_echo);
  out.stats.pitch_mean = get_f64(is);
  out.stats.pitch_std = get_f64(is);
  out.stats.energy_mean = get_f64(is);
  out.stats.energy_std = get_f64(is);
  out.model = std::make_unique<AcousticModel>(cfg, /*init_seed=*/0);
  out.model->params().ensure_opt_state();
  const std::uint32_t n = get_u32(is);
  const bool with_opt = get_u32(is) == 1;
  if (n != out.model->params().entries().size())
    throw IoError("load_checkpoint: parameter count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = get_blob(is);
    auto* entry = out.model->params().find(name);
    if (!entry) throw IoError("load_checkpoint: unknown parameter " + name);
    Tensor value = get_tensor(is);
    if (!value.same_shape(entry->value))
      throw IoError("load_checkpoint: shape mismatch for " + name);
    entry->value = std::move(value);
    if (with_opt) {
      entry->m = get_tensor(is);
      entry->v = get_tensor(is);
    }
  }
  if (!is) throw IoError("load_checkpoint: truncated file " + path);
  return out;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("file_hash: cannot open " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!is) break;
  }
  return h;
}

}  // namespace sftts
