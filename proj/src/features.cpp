#include "sftts/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <mutex>

namespace sftts {

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Index folding for reflection padding; valid for any n >= 1.
int reflect_index(long i, int n) {
  if (n == 1) return 0;
  const long period = 2L * n - 2;
  i = ((i % period) + period) % period;
  return static_cast<int>(i < n ? i : period - i);
}

struct FftPlan {
  fftw_plan plan;
  FftPlan() {
    std::vector<double> in(kFftSize);
    std::vector<fftw_complex> out(kFftSize / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(kFftSize, in.data(), out.data(),
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
};

fftw_plan shared_plan() {
  static FftPlan p;
  return p.plan;
}

std::once_flag plan_once;

// Extract the centered frame around t*hop with reflection padding.
void fill_frame(const std::vector<double>& x, int t, std::vector<double>& frame) {
  const int n = static_cast<int>(x.size());
  const long start = static_cast<long>(t) * kHopSize - kWinSize / 2;
  for (int i = 0; i < kWinSize; ++i) frame[i] = x[reflect_index(start + i, n)];
}

}  // namespace

Tensor mel_filterbank(int n_mels, int n_fft, double sr, double fmin, double fmax) {
  const int bins = n_fft / 2 + 1;
  Tensor fb({n_mels, bins});
  const double m_lo = hz_to_mel(fmin), m_hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (n_mels + 1));
  for (int m = 0; m < n_mels; ++m) {
    const double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double fk = sr * k / n_fft;
      double w = 0.0;
      if (fk > f0 && fk <= f1)
        w = (fk - f0) / (f1 - f0);
      else if (fk > f1 && fk < f2)
        w = (f2 - fk) / (f2 - f1);
      fb.at(m, k) = w;
    }
  }
  return fb;
}

Tensor stft_magnitude(const Waveform& w) {
  w.validate();
  const int t_n = frame_count(w.samples.size());
  const int bins = kFftSize / 2 + 1;
  Tensor mag({bins, t_n});
  std::vector<double> window(kWinSize);
  for (int i = 0; i < kWinSize; ++i)
    window[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / kWinSize));
  std::call_once(plan_once, [] { shared_plan(); });
  std::vector<double> frame(kWinSize);
  std::vector<fftw_complex> spec(bins);
  for (int t = 0; t < t_n; ++t) {
    fill_frame(w.samples, t, frame);
    for (int i = 0; i < kWinSize; ++i) frame[i] *= window[i];
    fftw_execute_dft_r2c(shared_plan(), frame.data(), spec.data());
    for (int k = 0; k < bins; ++k)
      mag.at(k, t) = std::sqrt(spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1]);
  }
  return mag;
}

MelSpectrogram mel_from_magnitude(const Tensor& magnitude) {
  static const Tensor fb = mel_filterbank();
  if (magnitude.rows() != kFftSize / 2 + 1) throw ShapeError("mel_from_magnitude: bad bin count");
  Tensor melamp = matmul(fb, magnitude);
  for (std::int64_t i = 0; i < melamp.numel(); ++i)
    melamp[i] = std::log(std::max(melamp[i], kAmpFloor));
  MelSpectrogram mel{std::move(melamp)};
  return mel;
}

MelSpectrogram compute_mel(const Waveform& w) { return mel_from_magnitude(stft_magnitude(w)); }

std::vector<double> extract_f0(const Waveform& w) {
  w.validate();
  const int t_n = frame_count(w.samples.size());
  const int lag_min = static_cast<int>(std::ceil(kSampleRate / kF0Max));   // 37
  const int lag_max = static_cast<int>(std::floor(kSampleRate / kF0Min)); // 441
  std::vector<double> f0(t_n, 0.0);
  std::vector<double> raw(kWinSize);
  std::vector<double> frame(kWinSize);
  std::vector<double> r(lag_max + 2, 0.0);
  std::vector<double> energy_prefix(kWinSize + 1, 0.0);
  // Small Gaussian pre-smoothing keeps sample-quantized pulse trains
  // correlating at the true period despite +-1 sample jitter.
  double kernel[9];
  for (int j = -4; j <= 4; ++j) kernel[j + 4] = std::exp(-j * j / 8.0);
  for (int t = 0; t < t_n; ++t) {
    fill_frame(w.samples, t, raw);
    for (int i = 0; i < kWinSize; ++i) {
      double acc = 0.0;
      for (int j = -4; j <= 4; ++j) {
        const int src = i + j;
        if (src >= 0 && src < kWinSize) acc += kernel[j + 4] * raw[src];
      }
      frame[i] = acc;
    }
    for (int i = 0; i < kWinSize; ++i)
      energy_prefix[i + 1] = energy_prefix[i] + frame[i] * frame[i];
    if (energy_prefix[kWinSize] < 1e-10) continue;
    // Normalized cross-correlation over the overlapping region, so peak
    // height is lag-independent and the first strong peak marks the period.
    double best = 0.0;
    for (int lag = lag_min - 1; lag <= lag_max + 1; ++lag) {
      double s = 0.0;
      for (int i = 0; i + lag < kWinSize; ++i) s += frame[i] * frame[i + lag];
      const double e1 = energy_prefix[kWinSize - lag];
      const double e2 = energy_prefix[kWinSize] - energy_prefix[lag];
      r[lag] = s / std::sqrt(e1 * e2 + 1e-12);
      if (lag >= lag_min && lag <= lag_max) best = std::max(best, r[lag]);
    }
    if (best < kVoicingThreshold) continue;
    // Pick the smallest lag whose peak is close to the maximum; this guards
    // against octave errors from the equal peaks at period multiples.
    int lag_pick = 0;
    for (int lag = lag_min; lag <= lag_max; ++lag) {
      if (r[lag] >= 0.85 * best && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1]) {
        lag_pick = lag;
        break;
      }
    }
    if (lag_pick == 0) continue;
    // Parabolic refinement around the integer lag.
    const double ym = r[lag_pick - 1], y0 = r[lag_pick], yp = r[lag_pick + 1];
    const double denom = ym - 2.0 * y0 + yp;
    double shift = 0.0;
    if (std::abs(denom) > 1e-12) shift = std::clamp(0.5 * (ym - yp) / denom, -0.5, 0.5);
    const double lag_ref = lag_pick + shift;
    f0[t] = std::clamp(kSampleRate / lag_ref, kF0Min, kF0Max);
  }
  return f0;
}

std::vector<double> compute_energy(const Tensor& magnitude) {
  if (magnitude.ndim() != 2) throw ShapeError("compute_energy: expected [F x T] matrix");
  for (std::int64_t i = 0; i < magnitude.numel(); ++i)
    if (magnitude[i] < 0.0) throw InvalidInput("compute_energy: negative magnitude");
  std::vector<double> e(magnitude.cols(), 0.0);
  for (int k = 0; k < magnitude.rows(); ++k)
    for (int t = 0; t < magnitude.cols(); ++t) e[t] += magnitude.at(k, t) * magnitude.at(k, t);
  for (double& v : e) v = std::sqrt(v);
  return e;
}

std::vector<double> average_over_phonemes(const std::vector<double>& frames,
                                          const std::vector<int>& durations, bool voiced_only) {
  std::int64_t total = 0;
  for (int d : durations) {
    if (d < 1) throw InvalidInput("average_over_phonemes: durations must be >= 1");
    total += d;
  }
  if (total != static_cast<std::int64_t>(frames.size()))
    throw ShapeError("average_over_phonemes: durations do not sum to frame count");
  std::vector<double> out(durations.size(), 0.0);
  std::size_t pos = 0;
  for (std::size_t n = 0; n < durations.size(); ++n) {
    double sum = 0.0;
    int count = 0;
    for (int i = 0; i < durations[n]; ++i, ++pos) {
      if (voiced_only && frames[pos] == 0.0) continue;
      sum += frames[pos];
      ++count;
    }
    out[n] = count > 0 ? sum / count : 0.0;
  }
  return out;
}

void write_melbin(const std::string& path, const MelSpectrogram& mel) {
  if (mel.values.ndim() != 2 || mel.bins() < 1 || mel.frames() < 1)
    throw ShapeError("write_melbin: expected a [D x T] matrix");
  if (!mel.values.all_finite()) throw InvalidInput("write_melbin: non-finite entries");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_melbin: cannot open " + path);
  const std::uint32_t version = 1, d = static_cast<std::uint32_t>(mel.bins()),
                      t = static_cast<std::uint32_t>(mel.frames());
  os.write("MELB", 4);
  auto put = [&](std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
  };
  put(version);
  put(d);
  put(t);
  for (std::int64_t i = 0; i < mel.values.numel(); ++i) {
    float f = static_cast<float>(mel.values[i]);
    static_assert(sizeof(float) == 4);
    char b[4];
    std::memcpy(b, &f, 4);
    os.write(b, 4);
  }
  if (!os) throw IoError("write_melbin: write failed for " + path);
}

MelSpectrogram read_melbin(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_melbin: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MELB", 4) != 0)
    throw IoError("read_melbin: bad magic in " + path);
  auto get = [&]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (b[1] << 8) | (b[2] << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  };
  const std::uint32_t version = get(), d = get(), t = get();
  if (version != 1) throw IoError("read_melbin: unsupported version");
  if (d == 0 || t == 0 || d > 1 << 16 || t > 1 << 24)
    throw IoError("read_melbin: implausible dimensions");
  MelSpectrogram mel{Tensor({static_cast<int>(d), static_cast<int>(t)})};
  for (std::int64_t i = 0; i < mel.values.numel(); ++i) {
    char b[4];
    is.read(b, 4);
    float f;
    std::memcpy(&f, b, 4);
    mel.values[i] = f;
  }
  if (!is) throw IoError("read_melbin: truncated file " + path);
  return mel;
}

}  // namespace sftts
