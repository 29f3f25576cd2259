#pragma once

#include <string>
#include <vector>

#include "sftts/corpus.hpp"
#include "sftts/model.hpp"

namespace sftts {

struct SweepSpec {
  std::vector<SolverMode> solvers = {SolverMode::kOde, SolverMode::kSde};
  std::vector<int> step_counts = {5, 10, 50, 100};
  double tau = 1.5;
  std::vector<std::uint64_t> seeds = {1};
};

struct EvalRow {
  std::string id;
  std::string solver;
  int steps = 0;
  std::uint64_t seed = 0;
  double cer = 0, mel_l2 = 0, pitch_rmse = 0;
};

struct EvalAggregate {
  std::string solver;
  int steps = 0;
  int n = 0;
  double cer_mean = 0, cer_ci = 0;
  double mel_l2_mean = 0, mel_l2_ci = 0;
  double pitch_rmse_mean = 0, pitch_rmse_ci = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalAggregate> aggregates;
};

// 95% normal-approximation confidence half-width.
double ci95(const std::vector<double>& values);

// Per-(solver, steps) aggregates recomputed from the stored rows.
std::vector<EvalAggregate> aggregate_rows(const std::vector<EvalRow>& rows);

// For every (solver, steps, seed, utterance): synthesize the utterance's
// phonemes with a held-out reference from the same speaker, run the proxy
// recognizer, and score CER / mel distance / pitch RMSE on voiced frames.
EvalReport evaluate(AcousticModel& model, const NormStats& stats, const CorpusManifest& split,
                    const SweepSpec& spec);

void write_report(const EvalReport& report, const std::string& dir);
EvalReport read_report_rows(const std::string& dir);

struct SweepRow {
  std::string solver;
  int steps = 0;
  double cer_mean = 0, cer_ci = 0;
  double ratio = 0;
  bool ratio_defined = true;
};

struct SweepResult {
  double cer0_mean = 0, cer0_ci = 0;  // zero-step baseline: mu + x_f
  std::vector<SweepRow> rows;
};

SweepResult sweep_cer_ratio(AcousticModel& model, const NormStats& stats,
                            const CorpusManifest& split, const SweepSpec& spec);

void write_sweep_table(const SweepResult& sweep, const std::string& path);
void write_sweep_plot(const SweepResult& sweep, const std::string& svg_path);

// Coarse F0 estimate from a log-mel matrix by harmonic-comb scoring; used for
// the pitch RMSE metric where no waveform exists.
std::vector<double> estimate_f0_from_mel(const Tensor& mel_dt);

// Key-value run manifest written next to every command's outputs.
void write_run_manifest(const std::string& dir,
                        const std::vector<std::pair<std::string, std::string>>& fields);

}  // namespace sftts
