#pragma once

#include <string>
#include <vector>

#include "sftts/audio.hpp"
#include "sftts/common.hpp"
#include "sftts/features.hpp"

namespace sftts {

// One synthetic phoneme: a two-resonator vocal-tract template.
struct PhonemeSpec {
  std::string symbol;
  double f1 = 0, f2 = 0;    // formant centers, Hz
  double bw1 = 0, bw2 = 0;  // resonator bandwidths, Hz
  bool voiced = true;

  void validate() const {
    if (!(200.0 <= f1 && f1 < f2 && f2 <= 3000.0))
      throw InvalidInput("phoneme " + symbol + ": formants out of range");
    if (bw1 <= 0 || bw2 <= 0) throw InvalidInput("phoneme " + symbol + ": bandwidths must be > 0");
  }
};

// Well-separated formant templates; exactly one unvoiced entry.
std::vector<PhonemeSpec> make_alphabet(int size);

struct SpeakerScales {
  double f0_scale = 1.0;
  double formant_scale = 1.0;
};

struct UtteranceRecord {
  std::string id;
  std::vector<int> phonemes;
  Waveform waveform;
  std::vector<int> durations_frames;  // hop-aligned, sums to the mel frame count
  std::vector<double> f0_hz;          // effective per-phoneme F0 (0 for unvoiced)
};

// Classical source-filter synthesis: harmonic pulse train (or noise for the
// unvoiced phoneme) through cascaded second-order resonators per phoneme.
UtteranceRecord synthesize_utterance(const std::vector<int>& phonemes,
                                     const std::vector<double>& f0_targets,
                                     const std::vector<double>& durations_s,
                                     const std::vector<PhonemeSpec>& alphabet,
                                     SpeakerScales speaker, std::uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::vector<std::string> phonemes;
  std::vector<int> durations_frames;
  std::vector<double> f0_hz;
  std::string audio_path;  // relative to the manifest directory
  int speaker = 0;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::vector<PhonemeSpec> alphabet;
  std::vector<SpeakerScales> speakers;
  std::string root;  // directory holding the audio files

  int phoneme_id(const std::string& symbol) const;
};

CorpusManifest generate_corpus(int alphabet_size, int n_utterances, int n_speakers,
                               std::uint64_t seed, const std::string& out_dir);

void save_manifest(const CorpusManifest& m, const std::string& dir);
CorpusManifest load_manifest(const std::string& dir);

// One PhonemeSpec per line, the alphabet.tsv body format.
std::string serialize_alphabet(const std::vector<PhonemeSpec>& alphabet);
std::vector<PhonemeSpec> parse_alphabet(const std::string& text);

// Levenshtein distance normalized by reference length.
double cer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

// Proxy recognizer: frame-wise nearest-template classification on spectral
// peak positions, with a per-utterance formant-scale search, then run-length
// collapsing. Returns phoneme ids into `alphabet`.
std::vector<int> recognize(const MelSpectrogram& mel, const std::vector<PhonemeSpec>& alphabet);

std::vector<std::string> ids_to_symbols(const std::vector<int>& ids,
                                        const std::vector<PhonemeSpec>& alphabet);

}  // namespace sftts
