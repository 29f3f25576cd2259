#include <algorithm>
#include <cmath>

#include "sftts/corpus.hpp"
#include "sftts/features.hpp"

namespace sftts {

namespace {

// Formant-informative band; excitation harmonics below and the source
// cutoff above carry no template identity.
constexpr double kBandLo = 220.0;
constexpr double kBandHi = 3600.0;

double bin_center_hz(double bin, int n_mels, double fmin, double fmax) {
  auto to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double m_lo = to_mel(fmin), m_hi = to_mel(fmax);
  return to_hz(m_lo + (m_hi - m_lo) * (bin + 1.0) / (n_mels + 1));
}

// Log magnitude response of one second-order resonator section, matching the
// synthesis filter exactly.
double log_resonator(double f, double center, double bw) {
  const double r = std::exp(-M_PI * bw / kSampleRate);
  const double a1 = 2.0 * r * std::cos(2.0 * M_PI * center / kSampleRate);
  const double a2 = -r * r;
  const double b = (1.0 - r) *
                   std::sqrt(1.0 - 2.0 * r * std::cos(4.0 * M_PI * center / kSampleRate) + r * r);
  const double w = 2.0 * M_PI * f / kSampleRate;
  const double re = 1.0 - a1 * std::cos(w) - a2 * std::cos(2.0 * w);
  const double im = a1 * std::sin(w) + a2 * std::sin(2.0 * w);
  return std::log(b) - 0.5 * std::log(re * re + im * im + 1e-300);
}

struct TemplateBank {
  std::vector<int> bins;                       // informative mel bins
  std::vector<std::vector<double>> envelopes;  // [template][bin], log domain
};

TemplateBank build_bank(const std::vector<PhonemeSpec>& alphabet, double scale) {
  TemplateBank bank;
  for (int k = 0; k < kMelBins; ++k) {
    const double hz = bin_center_hz(k, kMelBins, kFmin, kFmax);
    if (hz >= kBandLo && hz <= kBandHi) bank.bins.push_back(k);
  }
  for (const auto& ph : alphabet) {
    std::vector<double> env;
    env.reserve(bank.bins.size());
    for (int k : bank.bins) {
      const double hz = bin_center_hz(k, kMelBins, kFmin, kFmax);
      env.push_back(log_resonator(hz, scale * ph.f1, ph.bw1) +
                    log_resonator(hz, scale * ph.f2, ph.bw2));
    }
    bank.envelopes.push_back(std::move(env));
  }
  return bank;
}

// Indices into bank.bins of the frame's spectral tops: local maxima of the
// mel column. The excitation comb samples the vocal-tract envelope at its
// harmonic tops; valleys carry only comb depth, which is template noise.
std::vector<int> frame_tops(const MelSpectrogram& mel, int t, const TemplateBank& bank) {
  std::vector<int> tops;
  double fmax = log_floor();
  for (int k = 0; k < mel.bins(); ++k) fmax = std::max(fmax, mel.values.at(k, t));
  for (std::size_t i = 0; i < bank.bins.size(); ++i) {
    const int k = bank.bins[i];
    const double x = mel.values.at(k, t);
    if (x < fmax - 8.0) continue;
    const double left = k > 0 ? mel.values.at(k - 1, t) : x;
    const double right = k + 1 < mel.bins() ? mel.values.at(k + 1, t) : x;
    if (x >= left && x >= right) tops.push_back(static_cast<int>(i));
  }
  if (tops.size() < 4) {
    tops.clear();
    for (std::size_t i = 0; i < bank.bins.size(); ++i)
      if (mel.values.at(bank.bins[i], t) >= fmax - 6.0) tops.push_back(static_cast<int>(i));
  }
  return tops;
}

// Level-invariant spectral distance: variance of (observed - template) over
// the frame's tops. Adding a constant to the mel leaves it unchanged.
double frame_distance(const MelSpectrogram& mel, int t, const TemplateBank& bank, int tpl,
                      const std::vector<int>& tops) {
  const auto& env = bank.envelopes[static_cast<std::size_t>(tpl)];
  if (tops.empty()) return 0.0;
  double mean = 0.0;
  for (int i : tops) mean += mel.values.at(bank.bins[static_cast<std::size_t>(i)], t) -
                             env[static_cast<std::size_t>(i)];
  mean /= static_cast<double>(tops.size());
  double var = 0.0;
  for (int i : tops) {
    const double d = mel.values.at(bank.bins[static_cast<std::size_t>(i)], t) -
                     env[static_cast<std::size_t>(i)] - mean;
    var += d * d;
  }
  return var / static_cast<double>(tops.size());
}

}  // namespace

std::vector<int> recognize(const MelSpectrogram& mel, const std::vector<PhonemeSpec>& alphabet) {
  if (alphabet.empty()) throw InvalidInput("recognize: empty alphabet");
  mel.validate();
  const int t_n = mel.frames();

  double utt_peak = log_floor();
  for (std::int64_t i = 0; i < mel.values.numel(); ++i)
    utt_peak = std::max(utt_peak, mel.values[i]);
  const double silence_level = std::max(log_floor() + 1.0, utt_peak - 5.0);

  std::vector<bool> silent(static_cast<std::size_t>(t_n), true);
  for (int t = 0; t < t_n; ++t) {
    double m = log_floor();
    for (int k = 0; k < mel.bins(); ++k) m = std::max(m, mel.values.at(k, t));
    silent[static_cast<std::size_t>(t)] = m < silence_level;
  }

  // Speakers shift all formants by one utterance-wide factor; grid-search it
  // against the whole utterance, then label frames under the best factor.
  double best_cost = 0.0;
  std::vector<int> labels(static_cast<std::size_t>(t_n), -1);
  std::vector<double> dists(static_cast<std::size_t>(t_n), 0.0);
  bool first = true;
  for (double scale = 0.78; scale <= 1.281; scale += 0.02) {
    const TemplateBank bank = build_bank(alphabet, scale);
    double cost = 0.0;
    std::vector<int> cur(static_cast<std::size_t>(t_n), -1);
    std::vector<double> cur_d(static_cast<std::size_t>(t_n), 0.0);
    for (int t = 0; t < t_n; ++t) {
      if (silent[static_cast<std::size_t>(t)]) continue;
      const std::vector<int> tops = frame_tops(mel, t, bank);
      int arg = 0;
      double bd = frame_distance(mel, t, bank, 0, tops);
      for (std::size_t a = 1; a < alphabet.size(); ++a) {
        const double d = frame_distance(mel, t, bank, static_cast<int>(a), tops);
        if (d < bd) {
          bd = d;
          arg = static_cast<int>(a);
        }
      }
      cur[static_cast<std::size_t>(t)] = arg;
      cur_d[static_cast<std::size_t>(t)] = bd;
      cost += bd;
    }
    if (first || cost < best_cost) {
      best_cost = cost;
      labels = cur;
      dists = cur_d;
      first = false;
    }
  }

  // Reject frames fitting no template well (phoneme-boundary blends smeared
  // by the 1024-sample analysis window).
  std::vector<double> voiced_d;
  for (int t = 0; t < t_n; ++t)
    if (labels[static_cast<std::size_t>(t)] >= 0) voiced_d.push_back(dists[static_cast<std::size_t>(t)]);
  if (!voiced_d.empty()) {
    std::nth_element(voiced_d.begin(), voiced_d.begin() + voiced_d.size() / 2, voiced_d.end());
    const double cutoff = 3.0 * voiced_d[voiced_d.size() / 2] + 0.2;
    for (int t = 0; t < t_n; ++t)
      if (labels[static_cast<std::size_t>(t)] >= 0 && dists[static_cast<std::size_t>(t)] > cutoff)
        labels[static_cast<std::size_t>(t)] = -1;
  }

  // Single-frame flips between equal neighbours are measurement noise.
  for (int t = 1; t + 1 < t_n; ++t) {
    auto& l = labels[static_cast<std::size_t>(t)];
    const int a = labels[static_cast<std::size_t>(t - 1)], b = labels[static_cast<std::size_t>(t + 1)];
    if (a == b && l != a) l = a;
  }

  // Run-length collapse: drop silence, drop runs shorter than 3 frames,
  // merge consecutive repeats.
  std::vector<std::pair<int, int>> runs;
  for (int t = 0; t < t_n; ++t) {
    const int l = labels[static_cast<std::size_t>(t)];
    if (!runs.empty() && runs.back().first == l)
      runs.back().second += 1;
    else
      runs.push_back({l, 1});
  }
  std::vector<int> out;
  for (const auto& [label, len] : runs) {
    if (label < 0 || len < 3) continue;
    if (!out.empty() && out.back() == label) continue;
    out.push_back(label);
  }
  return out;
}

}  // namespace sftts
