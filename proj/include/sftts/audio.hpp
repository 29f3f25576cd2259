#pragma once

#include <string>
#include <vector>

#include "sftts/common.hpp"

namespace sftts {

inline constexpr int kSampleRate = 22050;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;

  void validate() const {
    if (samples.empty()) throw InvalidInput("waveform: empty");
    if (sample_rate != kSampleRate) throw InvalidInput("waveform: sample rate must be 22050");
    for (double s : samples)
      if (!std::isfinite(s)) throw InvalidInput("waveform: non-finite sample");
  }
};

// 16-bit PCM mono RIFF files.
void write_wav(const std::string& path, const Waveform& w);
Waveform read_wav(const std::string& path);

}  // namespace sftts
