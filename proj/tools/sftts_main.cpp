#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sftts/eval.hpp"
#include "sftts/train.hpp"

using namespace sftts;
namespace fs = std::filesystem;

namespace {

std::uint64_t text_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string default_data_root() {
  const char* env = std::getenv("SFTTS_DATA_ROOT");
  return env ? env : "";
}

std::vector<SolverMode> parse_solvers(const std::string& csv) {
  std::vector<SolverMode> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "pf")
      out.push_back(SolverMode::kOde);
    else if (tok == "ml")
      out.push_back(SolverMode::kSde);
    else
      throw CLI::ValidationError("--solvers", "unknown solver '" + tok + "' (expected pf or ml)");
  }
  return out;
}

template <typename T>
std::vector<T> parse_csv_nums(const std::string& csv) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(static_cast<T>(std::stoll(tok)));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy diffusion source-filter text-to-speech testbed"};
  app.require_subcommand(1);

  // gen-corpus ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic source-filter corpus");
  int g_alphabet = 8, g_utterances = 16, g_speakers = 4;
  std::uint64_t g_seed = 1;
  std::string g_out;
  gen->add_option("--alphabet", g_alphabet, "Alphabet size (4..16)");
  gen->add_option("--utterances", g_utterances, "Number of utterances");
  gen->add_option("--speakers", g_speakers, "Number of speakers");
  gen->add_option("--seed", g_seed, "Corpus seed");
  gen->add_option("--out", g_out, "Output directory")->required();

  // train ---------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train the acoustic model on a corpus");
  train->set_config("--config", "", "Key-value config file overriding defaults");
  std::string t_data = default_data_root(), t_out;
  ModelConfig mc;
  TrainConfig tc;
  train->add_option("--data", t_data, "Corpus directory");
  train->add_option("--out", t_out, "Output directory")->required();
  train->add_option("--steps", tc.max_steps, "Training steps");
  train->add_option("--batch", tc.batch_size, "Batch size");
  train->add_option("--seed", tc.seed, "Training seed");
  train->add_option("--lr-scale", tc.lr_scale, "Learning-rate scale");
  train->add_option("--warmup", tc.warmup_steps, "Warmup steps");
  train->add_option("--prior-anneal", tc.prior_anneal_steps, "Alignment prior anneal step");
  train->add_option("--crop", tc.diffusion_crop, "Diffusion crop frames");
  train->add_option("--threads", tc.threads, "Worker threads");
  train->add_option("--log-every", tc.log_every, "Log cadence");
  train->add_option("--checkpoint-every", tc.checkpoint_every, "Checkpoint cadence (0 = final only)");
  train->add_option("--d-h", mc.d_h, "Hidden width");
  train->add_option("--d-s", mc.d_s, "Style vector width");
  train->add_option("--heads", mc.heads, "Attention heads");
  train->add_option("--ffn-kernel", mc.ffn_kernel, "FFT-block feed-forward kernel");
  train->add_option("--unet-base", mc.unet_base, "Score-net base width");
  train->add_option("--dropout", mc.dropout, "Dropout probability");
  train->add_flag("--no-ef-generators", mc.no_ef_generators,
                  "Ablation: single generator, no formant pathway");
  train->add_flag("--no-energy", mc.no_energy, "Ablation: drop energy predictor and loss");

  // synth ----------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Synthesize a mel spectrogram");
  std::string s_ckpt, s_text, s_ref, s_solver = "pf", s_out;
  int s_steps = 50;
  double s_tau = 1.5;
  std::uint64_t s_seed = 0;
  bool s_dump_parts = false;
  synth->add_option("--ckpt", s_ckpt, "Checkpoint file")->required();
  synth->add_option("--text", s_text, "Space-separated phoneme symbols")->required();
  synth->add_option("--ref", s_ref, "Reference wav for style")->required();
  synth->add_option("--solver", s_solver, "pf (ODE) or ml (SDE)");
  synth->add_option("--steps", s_steps, "Reverse steps");
  synth->add_option("--tau", s_tau, "Initial-noise temperature");
  synth->add_option("--seed", s_seed, "Sampling seed");
  synth->add_option("--out", s_out, "Output .melbin path")->required();
  synth->add_flag("--dump-parts", s_dump_parts, "Also write excitation/formant parts");

  // eval -----------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  std::string e_ckpt, e_data = default_data_root(), e_out, e_solvers = "pf,ml",
              e_steps = "5,10,50,100", e_seeds = "1";
  double e_tau = 1.5;
  ev->add_option("--ckpt", e_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", e_data, "Corpus directory");
  ev->add_option("--out", e_out, "Output directory")->required();
  ev->add_option("--solvers", e_solvers, "Comma list: pf,ml");
  ev->add_option("--steps", e_steps, "Comma list of reverse step counts");
  ev->add_option("--seeds", e_seeds, "Comma list of sampling seeds");
  ev->add_option("--tau", e_tau, "Temperature");

  // sweep ----------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "CER-ratio sweep over solvers and reverse steps");
  std::string w_ckpt, w_data = default_data_root(), w_out, w_solvers = "pf,ml",
              w_steps = "5,10,50,100", w_seeds = "1";
  double w_tau = 1.5;
  sw->add_option("--ckpt", w_ckpt, "Checkpoint file")->required();
  sw->add_option("--data", w_data, "Corpus directory");
  sw->add_option("--out", w_out, "Output directory")->required();
  sw->add_option("--solvers", w_solvers, "Comma list: pf,ml");
  sw->add_option("--steps", w_steps, "Comma list of reverse step counts");
  sw->add_option("--seeds", w_seeds, "Comma list of sampling seeds");
  sw->add_option("--tau", w_tau, "Temperature");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      CorpusManifest m = generate_corpus(g_alphabet, g_utterances, g_speakers, g_seed, g_out);
      write_run_manifest(g_out, {{"command", "gen-corpus"},
                                 {"config_hash", hex64(text_hash(std::to_string(g_alphabet) + "," +
                                                                 std::to_string(g_utterances) + "," +
                                                                 std::to_string(g_speakers)))},
                                 {"seed", std::to_string(g_seed)},
                                 {"entries", std::to_string(m.entries.size())}});
      std::cout << "wrote " << m.entries.size() << " utterances to " << g_out << "\n";
    } else if (train->parsed()) {
      if (t_data.empty())
        throw InvalidInput("train: no corpus directory (--data or SFTTS_DATA_ROOT)");
      CorpusManifest corpus = load_manifest(t_data);
      mc.vocab = static_cast<int>(corpus.alphabet.size());
      mc.beta0 = NoiseSchedule().beta0;
      mc.beta1 = NoiseSchedule().beta1;
      FitResult res = fit(corpus, mc, tc, t_out);
      write_run_manifest(t_out, {{"command", "train"},
                                 {"config_hash", hex64(text_hash(mc.serialize() + tc.serialize()))},
                                 {"seed", std::to_string(tc.seed)},
                                 {"checkpoint_id", hex64(file_hash(res.checkpoint_path))},
                                 {"data", t_data}});
      std::cout << "checkpoint: " << res.checkpoint_path << "\n";
    } else if (synth->parsed()) {
      LoadedCheckpoint ckpt = load_checkpoint(s_ckpt);
      if (ckpt.alphabet.empty()) throw IoError("synth: checkpoint carries no alphabet");
      std::vector<int> ids;
      std::stringstream ss(s_text);
      std::string sym;
      while (ss >> sym) {
        int id = -1;
        for (std::size_t i = 0; i < ckpt.alphabet.size(); ++i)
          if (ckpt.alphabet[i].symbol == sym) id = static_cast<int>(i);
        if (id < 0) throw InvalidInput("synth: unknown phoneme symbol '" + sym + "'");
        ids.push_back(id);
      }
      if (ids.empty()) throw InvalidInput("synth: empty text");
      MelSpectrogram ref = compute_mel(read_wav(s_ref));
      SamplerSpec sampler;
      sampler.mode = s_solver == "ml" ? SolverMode::kSde : SolverMode::kOde;
      if (s_solver != "pf" && s_solver != "ml")
        throw InvalidInput("synth: unknown solver '" + s_solver + "'");
      sampler.steps = s_steps;
      sampler.tau = s_tau;
      sampler.seed = s_seed;
      SynthesisResult res = synthesize(*ckpt.model, ckpt.stats, ids, ref.values, sampler);
      write_melbin(s_out, MelSpectrogram{res.x_hat});
      if (s_dump_parts) {
        write_melbin(s_out + ".x_e.melbin", MelSpectrogram{res.x_e});
        write_melbin(s_out + ".x_e_refined.melbin", MelSpectrogram{res.x_e_refined});
        write_melbin(s_out + ".x_f.melbin", MelSpectrogram{res.x_f});
      }
      const std::string out_dir = fs::path(s_out).has_parent_path()
                                      ? fs::path(s_out).parent_path().string()
                                      : ".";
      write_run_manifest(out_dir,
                         {{"command", "synth"},
                          {"config_hash", hex64(text_hash(s_text + s_solver +
                                                          std::to_string(s_steps) +
                                                          std::to_string(s_tau)))},
                          {"seed", std::to_string(s_seed)},
                          {"checkpoint_id", hex64(file_hash(s_ckpt))}});
      std::cout << "wrote " << s_out << "\n";
    } else if (ev->parsed() || sw->parsed()) {
      const bool is_sweep = sw->parsed();
      const std::string ckpt_path = is_sweep ? w_ckpt : e_ckpt;
      const std::string data = is_sweep ? w_data : e_data;
      const std::string out = is_sweep ? w_out : e_out;
      if (data.empty())
        throw InvalidInput("no corpus directory given (--data or SFTTS_DATA_ROOT)");
      LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
      CorpusManifest split = load_manifest(data);
      SweepSpec spec;
      spec.solvers = parse_solvers(is_sweep ? w_solvers : e_solvers);
      spec.step_counts = parse_csv_nums<int>(is_sweep ? w_steps : e_steps);
      spec.seeds = parse_csv_nums<std::uint64_t>(is_sweep ? w_seeds : e_seeds);
      spec.tau = is_sweep ? w_tau : e_tau;
      if (spec.solvers.empty() || spec.step_counts.empty() || spec.seeds.empty())
        throw InvalidInput("empty solver/step/seed list");
      fs::create_directories(out);
      if (is_sweep) {
        SweepResult res = sweep_cer_ratio(*ckpt.model, ckpt.stats, split, spec);
        write_sweep_table(res, (fs::path(out) / "sweep_table.tsv").string());
        write_sweep_plot(res, (fs::path(out) / "sweep_plot.svg").string());
        std::cout << "sweep table + plot in " << out << "\n";
      } else {
        EvalReport report = evaluate(*ckpt.model, ckpt.stats, split, spec);
        write_report(report, out);
        std::cout << "report in " << out << "\n";
      }
      write_run_manifest(out, {{"command", is_sweep ? "sweep" : "eval"},
                               {"config_hash",
                                hex64(text_hash((is_sweep ? w_solvers : e_solvers) +
                                                (is_sweep ? w_steps : e_steps) +
                                                (is_sweep ? w_seeds : e_seeds)))},
                               {"seed", is_sweep ? w_seeds : e_seeds},
                               {"checkpoint_id", hex64(file_hash(ckpt_path))},
                               {"data", data}});
    }
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
