#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "sftts/corpus.hpp"
#include "sftts/features.hpp"
#include "testutil.hpp"

using namespace sftts;
namespace fs = std::filesystem;

namespace {
std::string tmp_dir(const char* name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}
}  // namespace

TEST_CASE("synthesize_utterance: f0 and formants are recoverable") {
  auto alphabet = make_alphabet(8);
  // Use a template with (f1, f2) = (700, 1200)-ish: entry with known values.
  PhonemeSpec custom{"z", 700.0, 1200.0, 70.0, 110.0, true};
  std::vector<PhonemeSpec> ab = alphabet;
  ab.push_back(custom);
  const int id = static_cast<int>(ab.size()) - 1;

  UtteranceRecord rec = synthesize_utterance({id}, {120.0}, {0.3}, ab, {1.0, 1.0}, 42);
  auto f0 = extract_f0(rec.waveform);
  int voiced = 0, good = 0;
  for (double v : f0) {
    if (v == 0.0) continue;
    ++voiced;
    if (std::abs(v - 120.0) <= 3.0) ++good;
  }
  CHECK(voiced > 10);
  CHECK(good >= voiced * 9 / 10);

  // Spectral peaks near the formants: inspect the linear spectrum directly.
  Tensor mag = stft_magnitude(rec.waveform);
  const int t_mid = mag.cols() / 2;
  auto peak_near = [&](double target) {
    // Strongest bin within a +-20% window around the target frequency.
    int k_lo = static_cast<int>(0.7 * target * kFftSize / kSampleRate);
    int k_hi = static_cast<int>(1.3 * target * kFftSize / kSampleRate);
    int arg = k_lo;
    for (int k = k_lo; k <= k_hi; ++k)
      if (mag.at(k, t_mid) > mag.at(arg, t_mid)) arg = k;
    return arg * static_cast<double>(kSampleRate) / kFftSize;
  };
  CHECK(std::abs(peak_near(700.0) - 700.0) / 700.0 < 0.05);
  CHECK(std::abs(peak_near(1200.0) - 1200.0) / 1200.0 < 0.05);
}

TEST_CASE("synthesize_utterance: validation and duration arithmetic") {
  auto ab = make_alphabet(8);
  CHECK_THROWS_AS(synthesize_utterance({}, {}, {}, ab, {1.0, 1.0}, 1), InvalidInput);
  UtteranceRecord rec = synthesize_utterance({0, 1}, {120.0, 130.0}, {0.2, 0.3}, ab, {1.0, 1.0}, 1);
  CHECK(rec.waveform.samples.size() == 11025);
  long total = 0;
  for (int d : rec.durations_frames) total += d;
  CHECK(total == frame_count(rec.waveform.samples.size()));
  for (int d : rec.durations_frames) CHECK(d >= 2);
}

TEST_CASE("generate_corpus: counting, determinism, ground-truth consistency") {
  const std::string dir_a = tmp_dir("sftts_corpus_a");
  const std::string dir_b = tmp_dir("sftts_corpus_b");
  CorpusManifest a = generate_corpus(8, 16, 4, 1, dir_a);
  CorpusManifest b = generate_corpus(8, 16, 4, 1, dir_b);
  CHECK(a.entries.size() == 16);
  CHECK(a.speakers.size() == 4);
  int wavs = 0;
  for (auto& e : fs::directory_iterator(dir_a))
    if (e.path().extension() == ".wav") ++wavs;
  CHECK(wavs == 16);
  CHECK(file_bytes(dir_a + "/manifest.tsv") == file_bytes(dir_b + "/manifest.tsv"));
  CHECK(file_bytes(dir_a + "/alphabet.tsv") == file_bytes(dir_b + "/alphabet.tsv"));
  for (const auto& e : a.entries) {
    Waveform w = read_wav((fs::path(dir_a) / e.audio_path).string());
    long total = 0;
    for (int d : e.durations_frames) total += d;
    CHECK(total == compute_mel(w).frames());
  }
  // Round trip through save/load.
  CorpusManifest loaded = load_manifest(dir_a);
  REQUIRE(loaded.entries.size() == a.entries.size());
  CHECK(loaded.entries[3].phonemes == a.entries[3].phonemes);
  CHECK(loaded.alphabet.size() == a.alphabet.size());
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("generate_corpus: unwritable output directory raises an io error") {
  const std::string blocker = (fs::temp_directory_path() / "sftts_blocker").string();
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(generate_corpus(8, 2, 1, 1, blocker + "/sub"), IoError);
  fs::remove(blocker);
}

TEST_CASE("cer: identities") {
  CHECK(cer({"a", "b", "c"}, {"a", "b", "c"}) == 0.0);
  CHECK(cer({"a", "b", "c"}, {"a", "x", "c"}) == doctest::Approx(1.0 / 3.0));
  CHECK(cer({"a", "b"}, {}) == 1.0);
  CHECK_THROWS_AS(cer({}, {"a"}), InvalidInput);
}

TEST_CASE("recognize: clean round trip over a corpus") {
  const std::string dir = tmp_dir("sftts_corpus_rec");
  CorpusManifest m = generate_corpus(8, 24, 4, 7, dir);
  int perfect = 0;
  for (const auto& e : m.entries) {
    Waveform w = read_wav((fs::path(dir) / e.audio_path).string());
    auto hyp = ids_to_symbols(recognize(compute_mel(w), m.alphabet), m.alphabet);
    if (cer(e.phonemes, hyp) == 0.0) ++perfect;
  }
  INFO("perfect round trips: ", perfect, "/24");
  CHECK(perfect >= 23);  // >= 95%
  fs::remove_all(dir);
}

TEST_CASE("recognize: silence gives an empty sequence") {
  MelSpectrogram mel{Tensor::full({80, 30}, log_floor())};
  CHECK(recognize(mel, make_alphabet(8)).empty());
}

TEST_CASE("recognize: swapped formants change the label") {
  auto ab = make_alphabet(8);
  UtteranceRecord as_b = synthesize_utterance({1}, {130.0}, {0.25}, ab, {1.0, 1.0}, 3);
  auto hyp = recognize(compute_mel(as_b.waveform), ab);
  REQUIRE(hyp.size() == 1);
  CHECK(hyp[0] == 1);
}

TEST_CASE("recognize: loudness invariance") {
  auto ab = make_alphabet(8);
  UtteranceRecord rec = synthesize_utterance({0, 5, 2}, {140.0, 150.0, 140.0},
                                             {0.15, 0.15, 0.15}, ab, {1.0, 1.0}, 9);
  MelSpectrogram mel = compute_mel(rec.waveform);
  auto base = recognize(mel, ab);
  MelSpectrogram louder{mel.values};
  for (std::int64_t i = 0; i < louder.values.numel(); ++i) louder.values[i] += 1.5;
  CHECK(recognize(louder, ab) == base);
}
