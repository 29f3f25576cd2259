#include "sftts/eval.hpp"

#include "sftts/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace sftts {

namespace fs = std::filesystem;

double ci95(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size() - 1);
  return 1.96 * std::sqrt(var / static_cast<double>(values.size()));
}

std::vector<EvalAggregate> aggregate_rows(const std::vector<EvalRow>& rows) {
  std::map<std::pair<std::string, int>, std::vector<const EvalRow*>> groups;
  for (const auto& r : rows) groups[{r.solver, r.steps}].push_back(&r);
  std::vector<EvalAggregate> out;
  for (const auto& [key, grp] : groups) {
    EvalAggregate a;
    a.solver = key.first;
    a.steps = key.second;
    a.n = static_cast<int>(grp.size());
    std::vector<double> cers, l2s, prmses;
    for (const auto* r : grp) {
      cers.push_back(r->cer);
      l2s.push_back(r->mel_l2);
      prmses.push_back(r->pitch_rmse);
    }
    auto mean = [](const std::vector<double>& v) {
      double m = 0;
      for (double x : v) m += x;
      return m / static_cast<double>(v.size());
    };
    a.cer_mean = mean(cers);
    a.cer_ci = ci95(cers);
    a.mel_l2_mean = mean(l2s);
    a.mel_l2_ci = ci95(l2s);
    a.pitch_rmse_mean = mean(prmses);
    a.pitch_rmse_ci = ci95(prmses);
    out.push_back(a);
  }
  return out;
}

std::vector<double> estimate_f0_from_mel(const Tensor& mel_dt) {
  auto to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  const double m_lo = to_mel(kFmin), m_hi = to_mel(kFmax);
  auto bin_of = [&](double hz) {
    const double b = (to_mel(hz) - m_lo) / (m_hi - m_lo) * (kMelBins + 1) - 1.0;
    return std::clamp(static_cast<int>(std::lround(b)), 0, kMelBins - 1);
  };
  std::vector<double> f0(static_cast<std::size_t>(mel_dt.cols()), 0.0);
  for (int t = 0; t < mel_dt.cols(); ++t) {
    double best_f = 0, best_score = -1e30;
    for (double f = 60.0; f <= 400.0; f += 2.0) {
      double score = 0;
      for (int k = 1; k <= 4; ++k) score += mel_dt.at(bin_of(k * f), t);
      score /= 4.0;
      if (score > best_score) {
        best_score = score;
        best_f = f;
      }
    }
    f0[static_cast<std::size_t>(t)] = best_f;
  }
  return f0;
}

namespace {

// Reference for zero-shot style conditioning: another utterance of the same
// speaker, deterministic by manifest order; falls back to the item itself.
std::size_t pick_reference(const CorpusManifest& split, std::size_t item) {
  for (std::size_t j = 0; j < split.entries.size(); ++j)
    if (j != item && split.entries[j].speaker == split.entries[item].speaker) return j;
  return item;
}

struct ItemContext {
  std::vector<int> phonemes;
  Tensor ref_mel_dt;
  Tensor gt_mel_dt;
  std::vector<double> gt_f0;
};

std::vector<ItemContext> load_items(const CorpusManifest& split) {
  std::vector<Tensor> mels;
  std::vector<std::vector<double>> f0s;
  for (const auto& e : split.entries) {
    Waveform w = read_wav((fs::path(split.root) / e.audio_path).string());
    mels.push_back(compute_mel(w).values);
    f0s.push_back(extract_f0(w));
  }
  std::vector<ItemContext> out;
  for (std::size_t i = 0; i < split.entries.size(); ++i) {
    ItemContext c;
    for (const auto& sym : split.entries[i].phonemes)
      c.phonemes.push_back(split.phoneme_id(sym));
    c.ref_mel_dt = mels[pick_reference(split, i)];
    c.gt_mel_dt = mels[i];
    c.gt_f0 = f0s[i];
    out.push_back(std::move(c));
  }
  return out;
}

double mel_l2_overlap(const Tensor& a_dt, const Tensor& b_dt) {
  const int l = std::min(a_dt.cols(), b_dt.cols());
  double sum = 0;
  for (int t = 0; t < l; ++t)
    for (int k = 0; k < kMelBins; ++k) {
      const double d = a_dt.at(k, t) - b_dt.at(k, t);
      sum += d * d;
    }
  return std::sqrt(sum / (static_cast<double>(l) * kMelBins));
}

double pitch_rmse_voiced(const Tensor& mel_dt, const std::vector<double>& gt_f0) {
  const auto est = estimate_f0_from_mel(mel_dt);
  const std::size_t l = std::min(est.size(), gt_f0.size());
  double sum = 0;
  int n = 0;
  for (std::size_t t = 0; t < l; ++t) {
    if (gt_f0[t] <= 0) continue;
    const double d = est[t] - gt_f0[t];
    sum += d * d;
    ++n;
  }
  return n > 0 ? std::sqrt(sum / n) : 0.0;
}

EvalRow score_item(const CorpusManifest& split, std::size_t item, const ItemContext& ctx,
                   const Tensor& x_hat_dt, const std::string& solver, int steps,
                   std::uint64_t seed) {
  EvalRow row;
  row.id = split.entries[item].id;
  row.solver = solver;
  row.steps = steps;
  row.seed = seed;
  MelSpectrogram synth{x_hat_dt};
  // Generated mels may dip below the feature log floor; clamp for the
  // recognizer, which expects feature-domain values.
  for (std::int64_t i = 0; i < synth.values.numel(); ++i)
    synth.values[i] = std::max(synth.values[i], log_floor());
  auto hyp = ids_to_symbols(recognize(synth, split.alphabet), split.alphabet);
  row.cer = cer(split.entries[item].phonemes, hyp);
  row.mel_l2 = mel_l2_overlap(x_hat_dt, ctx.gt_mel_dt);
  row.pitch_rmse = pitch_rmse_voiced(x_hat_dt, ctx.gt_f0);
  return row;
}

}  // namespace

EvalReport evaluate(AcousticModel& model, const NormStats& stats, const CorpusManifest& split,
                    const SweepSpec& spec) {
  if (split.entries.empty()) throw InvalidInput("evaluate: empty split");
  if (spec.solvers.empty() || spec.step_counts.empty())
    throw InvalidInput("evaluate: empty solver or step list");
  const auto items = load_items(split);
  EvalReport report;
  for (SolverMode mode : spec.solvers) {
    for (int steps : spec.step_counts) {
      for (std::uint64_t seed : spec.seeds) {
        for (std::size_t i = 0; i < items.size(); ++i) {
          SamplerSpec sampler{mode, steps, spec.tau, seed + 977 * i};
          SynthesisResult res =
              synthesize(model, stats, items[i].phonemes, items[i].ref_mel_dt, sampler);
          report.rows.push_back(score_item(split, i, items[i], res.x_hat, solver_name(mode),
                                           steps, seed));
        }
      }
    }
  }
  report.aggregates = aggregate_rows(report.rows);
  return report;
}

void write_report(const EvalReport& report, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream rows(fs::path(dir) / "eval_rows.tsv");
  rows << "id\tsolver\tsteps\tseed\tcer\tmel_l2\tpitch_rmse\n";
  for (const auto& r : report.rows)
    rows << r.id << '\t' << r.solver << '\t' << r.steps << '\t' << r.seed << '\t' << r.cer << '\t'
         << r.mel_l2 << '\t' << r.pitch_rmse << '\n';
  std::ofstream agg(fs::path(dir) / "eval_aggregates.tsv");
  agg << "solver\tsteps\tn\tcer_mean\tcer_ci95\tmel_l2_mean\tmel_l2_ci95\tpitch_rmse_mean\t"
         "pitch_rmse_ci95\n";
  for (const auto& a : report.aggregates)
    agg << a.solver << '\t' << a.steps << '\t' << a.n << '\t' << a.cer_mean << '\t' << a.cer_ci
        << '\t' << a.mel_l2_mean << '\t' << a.mel_l2_ci << '\t' << a.pitch_rmse_mean << '\t'
        << a.pitch_rmse_ci << '\n';
  if (!rows || !agg) throw IoError("write_report: write failed in " + dir);
}

EvalReport read_report_rows(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "eval_rows.tsv");
  if (!is) throw IoError("read_report_rows: missing eval_rows.tsv in " + dir);
  EvalReport report;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    EvalRow r;
    ls >> r.id >> r.solver >> r.steps >> r.seed >> r.cer >> r.mel_l2 >> r.pitch_rmse;
    report.rows.push_back(r);
  }
  report.aggregates = aggregate_rows(report.rows);
  return report;
}

SweepResult sweep_cer_ratio(AcousticModel& model, const NormStats& stats,
                            const CorpusManifest& split, const SweepSpec& spec) {
  if (split.entries.empty()) throw InvalidInput("sweep: empty split");
  const auto items = load_items(split);

  // Zero-step baseline: the prior composition mu + x_f, no reverse process.
  std::vector<double> cer0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Graph g(false);
    Var s = model.encode_style(g, items[i].ref_mel_dt);
    Var h = model.encode_text(g, items[i].phonemes, s, 0.0, nullptr);
    VarianceVars preds = model.predict_variances(g, h, s, 0.0, nullptr);
    std::vector<int> durations(items[i].phonemes.size());
    const Tensor& logd = g.val(preds.log_duration);
    for (std::size_t k = 0; k < durations.size(); ++k)
      durations[k] = round_duration(std::exp(logd.at(static_cast<int>(k), 0)));
    Var energy = model.config().no_energy ? Var{} : preds.energy;
    PathwayVars paths = model.build_pathways(g, h, preds.pitch, energy, durations);
    auto [x_e, x_f] = model.generate_representations(g, paths, s, 0.0, nullptr);
    Tensor x0_dt = transpose(g.val(x_e));
    Tensor xf_dt = transpose(g.val(x_f));
    Tensor prior_dt = compose_output(x0_dt, xf_dt);
    EvalRow row = score_item(split, i, items[i], prior_dt, "prior", 0, 0);
    cer0.push_back(row.cer);
  }
  SweepResult out;
  double m0 = 0;
  for (double c : cer0) m0 += c;
  out.cer0_mean = m0 / static_cast<double>(cer0.size());
  out.cer0_ci = ci95(cer0);

  EvalReport report = evaluate(model, stats, split, spec);
  for (const auto& a : report.aggregates) {
    SweepRow row;
    row.solver = a.solver;
    row.steps = a.steps;
    row.cer_mean = a.cer_mean;
    row.cer_ci = a.cer_ci;
    row.ratio_defined = out.cer0_mean > 0;
    row.ratio = row.ratio_defined ? a.cer_mean / out.cer0_mean : a.cer_mean;
    out.rows.push_back(row);
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.solver != b.solver ? a.solver < b.solver : a.steps < b.steps;
  });
  return out;
}

void write_sweep_table(const SweepResult& sweep, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_sweep_table: cannot open " + path);
  os << "#cer0_mean\t" << sweep.cer0_mean << "\tcer0_ci95\t" << sweep.cer0_ci << "\n";
  os << "solver\tsteps\tcer_mean\tcer_ci95\tcer_ratio\tratio_defined\n";
  for (const auto& r : sweep.rows)
    os << r.solver << '\t' << r.steps << '\t' << r.cer_mean << '\t' << r.cer_ci << '\t' << r.ratio
       << '\t' << (r.ratio_defined ? 1 : 0) << '\n';
}

void write_sweep_plot(const SweepResult& sweep, const std::string& svg_path) {
  std::map<std::string, std::vector<const SweepRow*>> by_solver;
  std::vector<int> steps_axis;
  for (const auto& r : sweep.rows) {
    by_solver[r.solver].push_back(&r);
    if (std::find(steps_axis.begin(), steps_axis.end(), r.steps) == steps_axis.end())
      steps_axis.push_back(r.steps);
  }
  std::sort(steps_axis.begin(), steps_axis.end());
  double ymax = 1.0;
  for (const auto& r : sweep.rows) ymax = std::max(ymax, r.ratio);
  ymax *= 1.1;

  const int w = 640, h = 420, ml = 70, mr = 30, mt = 40, mb = 60;
  auto x_of = [&](int steps) {
    const auto it = std::find(steps_axis.begin(), steps_axis.end(), steps);
    const double idx = static_cast<double>(it - steps_axis.begin());
    return ml + idx / std::max<std::size_t>(1, steps_axis.size() - 1) * (w - ml - mr);
  };
  auto y_of = [&](double v) { return h - mb - v / ymax * (h - mt - mb); };

  std::ofstream os(svg_path);
  if (!os) throw IoError("write_sweep_plot: cannot open " + svg_path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='16'>"
     << "CER ratio vs reverse steps</text>\n";
  // Axes.
  os << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
     << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
     << "' stroke='black'/>\n";
  for (int s : steps_axis)
    os << "<text x='" << x_of(s) << "' y='" << h - mb + 20 << "' text-anchor='middle' "
       << "font-size='12'>" << s << "</text>\n";
  for (double v = 0.0; v <= ymax; v += ymax / 4)
    os << "<text x='" << ml - 8 << "' y='" << y_of(v) + 4 << "' text-anchor='end' "
       << "font-size='12'>" << std::round(v * 100) / 100 << "</text>\n";
  // Reference line at ratio 1.
  os << "<line x1='" << ml << "' y1='" << y_of(1.0) << "' x2='" << w - mr << "' y2='" << y_of(1.0)
     << "' stroke='#bbbbbb' stroke-dasharray='4 3'/>\n";
  const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd"};
  int ci = 0;
  for (const auto& [solver, rows] : by_solver) {
    std::ostringstream pts;
    for (const auto* r : rows) pts << x_of(r->steps) << "," << y_of(r->ratio) << " ";
    os << "<polyline points='" << pts.str() << "' fill='none' stroke='" << colors[ci % 4]
       << "' stroke-width='2'/>\n";
    for (const auto* r : rows)
      os << "<circle cx='" << x_of(r->steps) << "' cy='" << y_of(r->ratio) << "' r='3' fill='"
         << colors[ci % 4] << "'/>\n";
    os << "<text x='" << w - mr - 5 << "' y='" << mt + 16 * (ci + 1) << "' text-anchor='end' "
       << "font-size='13' fill='" << colors[ci % 4] << "'>" << solver << "</text>\n";
    ++ci;
  }
  os << "<text x='" << w / 2 << "' y='" << h - 16 << "' text-anchor='middle' font-size='13'>"
     << "reverse steps</text>\n";
  os << "</svg>\n";
}

void write_run_manifest(const std::string& dir,
                        const std::vector<std::pair<std::string, std::string>>& fields) {
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "run_manifest.txt");
  for (const auto& [k, v] : fields) os << k << "=" << v << "\n";
}

}  // namespace sftts
