#pragma once

#include <string>
#include <vector>

#include "sftts/audio.hpp"
#include "sftts/tensor.hpp"

namespace sftts {

inline constexpr int kMelBins = 80;
inline constexpr int kFftSize = 1024;
inline constexpr int kWinSize = 1024;
inline constexpr int kHopSize = 256;
inline constexpr double kAmpFloor = 1e-5;   // amplitudes clamped here before log
inline constexpr double kFmin = 0.0;
inline constexpr double kFmax = 8000.0;
inline constexpr double kF0Min = 50.0;
inline constexpr double kF0Max = 600.0;
inline constexpr double kVoicingThreshold = 0.3;

inline double log_floor() { return std::log(kAmpFloor); }

// Log-amplitude mel spectrogram, [D x T] with D = 80.
struct MelSpectrogram {
  Tensor values;

  int bins() const { return values.rows(); }
  int frames() const { return values.cols(); }
  void validate() const {
    if (values.ndim() != 2 || values.rows() != kMelBins)
      throw ShapeError("mel: expected 80 x T matrix");
    if (values.cols() < 1) throw ShapeError("mel: must have at least one frame");
    for (std::int64_t i = 0; i < values.numel(); ++i) {
      if (!std::isfinite(values[i])) throw InvalidInput("mel: non-finite entry");
      if (values[i] < log_floor() - 1e-9) throw InvalidInput("mel: entry below log floor");
    }
  }
};

// Number of centered frames for a signal of `len` samples.
inline int frame_count(std::size_t len) { return 1 + static_cast<int>(len / kHopSize); }

// Mel filterbank [n_mels x (n_fft/2 + 1)], HTK-style triangular filters.
Tensor mel_filterbank(int n_mels = kMelBins, int n_fft = kFftSize, double sr = kSampleRate,
                      double fmin = kFmin, double fmax = kFmax);

// Linear magnitude STFT, [(n_fft/2 + 1) x T]; centered frames, reflection
// padding, periodic Hann window.
Tensor stft_magnitude(const Waveform& w);

MelSpectrogram mel_from_magnitude(const Tensor& magnitude);
MelSpectrogram compute_mel(const Waveform& w);

// Per-frame F0 (Hz) aligned with mel frames; 0 marks unvoiced frames.
std::vector<double> extract_f0(const Waveform& w);

// Per-frame L2 norm over frequency bins of a linear magnitude STFT.
std::vector<double> compute_energy(const Tensor& magnitude);

// Phoneme-level means of a frame-aligned sequence. With voiced_only, zero
// frames are excluded (result 0 when a phoneme has no voiced frame).
std::vector<double> average_over_phonemes(const std::vector<double>& frames,
                                          const std::vector<int>& durations, bool voiced_only);

// Binary mel container: magic "MELB", u32 version, u32 D, u32 T, then D*T
// row-major little-endian float32.
void write_melbin(const std::string& path, const MelSpectrogram& mel);
MelSpectrogram read_melbin(const std::string& path);

}  // namespace sftts
