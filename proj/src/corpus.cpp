#include "sftts/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace sftts {

namespace fs = std::filesystem;

std::vector<PhonemeSpec> make_alphabet(int size) {
  if (size < 4 || size > 16) throw InvalidInput("make_alphabet: size must be in [4, 16]");
  // 4x4 grid of (F1, F2) templates; any two entries differ by >= 150 Hz in F1
  // or >= 400 Hz in F2. The F2 level runs against the F1 level so that no two
  // templates share an F2/F1 ratio reachable from another by a speaker-wide
  // formant scale: a scaled-down (f1+1, f2+1) diagonal neighbour would mimic
  // (f1, f2), an anti-diagonal one cannot.
  static const double f1s[4] = {280.0, 450.0, 620.0, 800.0};
  static const double f2s[4] = {1000.0, 1450.0, 1950.0, 2500.0};
  std::vector<PhonemeSpec> out;
  out.reserve(size);
  for (int i = 0; i < size; ++i) {
    PhonemeSpec p;
    p.symbol = std::string(1, static_cast<char>('a' + i));
    p.f1 = f1s[i % 4];
    p.f2 = f2s[(3 * (i % 4) + i / 4) % 4];
    p.bw1 = 130.0;
    p.bw2 = 180.0;
    p.voiced = i != size - 1;  // exactly one noise-excited phoneme
    p.validate();
    out.push_back(p);
  }
  return out;
}

namespace {

// One second-order resonator section, y[n] = b x[n] + a1 y[n-1] + a2 y[n-2].
struct Resonator {
  double a1 = 0, a2 = 0, b = 1, y1 = 0, y2 = 0;
  void tune(double freq, double bw) {
    const double r = std::exp(-M_PI * bw / kSampleRate);
    a1 = 2.0 * r * std::cos(2.0 * M_PI * freq / kSampleRate);
    a2 = -r * r;
    // Near-unit gain at the resonance frequency.
    b = (1.0 - r) * std::sqrt(1.0 - 2.0 * r * std::cos(4.0 * M_PI * freq / kSampleRate) + r * r);
  }
  double step(double x) {
    const double y = b * x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace

UtteranceRecord synthesize_utterance(const std::vector<int>& phonemes,
                                     const std::vector<double>& f0_targets,
                                     const std::vector<double>& durations_s,
                                     const std::vector<PhonemeSpec>& alphabet,
                                     SpeakerScales speaker, std::uint64_t seed) {
  const std::size_t n = phonemes.size();
  if (n == 0) throw InvalidInput("synthesize_utterance: empty phoneme sequence");
  if (f0_targets.size() != n || durations_s.size() != n)
    throw InvalidInput("synthesize_utterance: sequence lengths differ");
  for (double d : durations_s)
    if (d < 0.05) throw InvalidInput("synthesize_utterance: durations must be >= 0.05 s");
  if (speaker.f0_scale < 0.8 || speaker.f0_scale > 1.25 || speaker.formant_scale < 0.8 ||
      speaker.formant_scale > 1.25)
    throw InvalidInput("synthesize_utterance: speaker scales must be in [0.8, 1.25]");
  for (int id : phonemes)
    if (id < 0 || id >= static_cast<int>(alphabet.size()))
      throw InvalidInput("synthesize_utterance: phoneme id out of range");

  // Sample boundaries from cumulative rounding so the total length is exact.
  std::vector<long> bounds(n + 1, 0);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += durations_s[i];
    bounds[i + 1] = std::lround(acc * kSampleRate);
  }
  const long total = bounds[n];

  Rng rng(seed);
  UtteranceRecord rec;
  rec.phonemes = phonemes;
  rec.waveform.samples.assign(static_cast<std::size_t>(total), 0.0);
  rec.f0_hz.resize(n);

  constexpr double kHarmonicCutoff = 5000.0;
  double phase = 0.0;
  Resonator r1, r2;
  for (std::size_t i = 0; i < n; ++i) {
    const PhonemeSpec& ph = alphabet[static_cast<std::size_t>(phonemes[i])];
    const double f0 = speaker.f0_scale * f0_targets[i];
    rec.f0_hz[i] = ph.voiced ? f0 : 0.0;
    r1.tune(speaker.formant_scale * ph.f1, ph.bw1);
    r2.tune(speaker.formant_scale * ph.f2, ph.bw2);
    const int n_harm = ph.voiced ? std::max(1, static_cast<int>(kHarmonicCutoff / f0)) : 0;
    for (long s = bounds[i]; s < bounds[i + 1]; ++s) {
      double src;
      if (ph.voiced) {
        phase += 2.0 * M_PI * f0 / kSampleRate;
        if (phase > 2.0 * M_PI) phase -= 2.0 * M_PI;
        double sum = 0.0;
        for (int k = 1; k <= n_harm; ++k) sum += std::cos(k * phase);
        src = sum / n_harm;
      } else {
        src = 0.5 * (2.0 * rng.uniform() - 1.0);
      }
      rec.waveform.samples[static_cast<std::size_t>(s)] = r2.step(r1.step(src));
    }
  }

  // Normalize peak level.
  double peak = 0.0;
  for (double s : rec.waveform.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0) {
    const double g = 0.8 / peak;
    for (double& s : rec.waveform.samples) s *= g;
  }

  // Hop-aligned ground-truth durations: frame t belongs to the phoneme whose
  // sample span contains the frame center t*hop.
  const int t_frames = frame_count(rec.waveform.samples.size());
  rec.durations_frames.assign(n, 0);
  for (int t = 0; t < t_frames; ++t) {
    const long center = static_cast<long>(t) * kHopSize;
    std::size_t idx = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (center < bounds[i + 1]) {
        idx = i;
        break;
      }
    }
    rec.durations_frames[idx] += 1;
  }
  return rec;
}

int CorpusManifest::phoneme_id(const std::string& symbol) const {
  for (std::size_t i = 0; i < alphabet.size(); ++i)
    if (alphabet[i].symbol == symbol) return static_cast<int>(i);
  throw InvalidInput("unknown phoneme symbol: " + symbol);
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, const char* sep, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += fmt(xs[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string serialize_alphabet(const std::vector<PhonemeSpec>& alphabet) {
  std::string out;
  for (const auto& p : alphabet)
    out += p.symbol + '\t' + fmt_double(p.f1) + '\t' + fmt_double(p.f2) + '\t' +
           fmt_double(p.bw1) + '\t' + fmt_double(p.bw2) + '\t' + (p.voiced ? "1" : "0") + '\n';
  return out;
}

std::vector<PhonemeSpec> parse_alphabet(const std::string& text) {
  std::vector<PhonemeSpec> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    if (f.size() != 6) throw IoError("parse_alphabet: malformed line");
    PhonemeSpec p;
    p.symbol = f[0];
    p.f1 = std::stod(f[1]);
    p.f2 = std::stod(f[2]);
    p.bw1 = std::stod(f[3]);
    p.bw2 = std::stod(f[4]);
    p.voiced = f[5] == "1";
    out.push_back(p);
  }
  return out;
}

void save_manifest(const CorpusManifest& m, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "manifest.tsv");
  if (!os) throw IoError("save_manifest: cannot write manifest in " + dir);
  os << "#corpus-manifest\tv1\n";
  for (const auto& e : m.entries) {
    os << e.id << '\t' << join(e.phonemes, " ", [](const std::string& s) { return s; }) << '\t'
       << join(e.durations_frames, ",", [](int d) { return std::to_string(d); }) << '\t'
       << join(e.f0_hz, ",", fmt_double) << '\t' << e.audio_path << '\t' << e.speaker << '\n';
  }
  std::ofstream as(fs::path(dir) / "alphabet.tsv");
  as << "#alphabet\tv1\n";
  as << serialize_alphabet(m.alphabet);
  std::ofstream ss(fs::path(dir) / "speakers.tsv");
  ss << "#speakers\tv1\n";
  for (const auto& sp : m.speakers)
    ss << fmt_double(sp.f0_scale) << '\t' << fmt_double(sp.formant_scale) << '\n';
  if (!os || !as || !ss) throw IoError("save_manifest: write failed in " + dir);
}

CorpusManifest load_manifest(const std::string& dir) {
  CorpusManifest m;
  m.root = dir;
  std::ifstream as(fs::path(dir) / "alphabet.tsv");
  if (!as) throw IoError("load_manifest: missing alphabet.tsv in " + dir);
  std::string line;
  std::getline(as, line);
  if (line.rfind("#alphabet", 0) != 0) throw IoError("load_manifest: bad alphabet header");
  std::string body((std::istreambuf_iterator<char>(as)), std::istreambuf_iterator<char>());
  m.alphabet = parse_alphabet(body);
  std::ifstream ss(fs::path(dir) / "speakers.tsv");
  if (ss) {
    std::getline(ss, line);
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      auto f = split(line, '\t');
      if (f.size() != 2) throw IoError("load_manifest: malformed speakers line");
      m.speakers.push_back({std::stod(f[0]), std::stod(f[1])});
    }
  }
  std::ifstream is(fs::path(dir) / "manifest.tsv");
  if (!is) throw IoError("load_manifest: missing manifest.tsv in " + dir);
  std::getline(is, line);
  if (line.rfind("#corpus-manifest", 0) != 0) throw IoError("load_manifest: bad manifest header");
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split(line, '\t');
    if (f.size() != 6) throw IoError("load_manifest: malformed manifest line");
    ManifestEntry e;
    e.id = f[0];
    if (!seen.insert(e.id).second) throw IoError("load_manifest: duplicate id " + e.id);
    for (const auto& s : split(f[1], ' '))
      if (!s.empty()) e.phonemes.push_back(s);
    for (const auto& s : split(f[2], ','))
      if (!s.empty()) e.durations_frames.push_back(std::stoi(s));
    for (const auto& s : split(f[3], ','))
      if (!s.empty()) e.f0_hz.push_back(std::stod(s));
    e.audio_path = f[4];
    e.speaker = std::stoi(f[5]);
    if (!fs::exists(fs::path(dir) / e.audio_path))
      throw IoError("load_manifest: missing audio file " + e.audio_path);
    m.entries.push_back(std::move(e));
  }
  return m;
}

CorpusManifest generate_corpus(int alphabet_size, int n_utterances, int n_speakers,
                               std::uint64_t seed, const std::string& out_dir) {
  if (n_utterances < 1 || n_speakers < 1)
    throw InvalidInput("generate_corpus: counts must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_corpus: cannot create " + out_dir);

  CorpusManifest m;
  m.root = out_dir;
  m.alphabet = make_alphabet(alphabet_size);

  Rng rng(seed);
  for (int s = 0; s < n_speakers; ++s) {
    SpeakerScales sp;
    sp.f0_scale = rng.uniform(0.8, 1.25);
    sp.formant_scale = rng.uniform(0.8, 1.25);
    m.speakers.push_back(sp);
  }

  for (int u = 0; u < n_utterances; ++u) {
    Rng item = rng.fork(static_cast<std::uint64_t>(u) + 1);
    const int speaker = static_cast<int>(item.below(static_cast<std::uint64_t>(n_speakers)));
    const int len = 3 + static_cast<int>(item.below(10));  // 3..12 phonemes
    std::vector<int> ids(static_cast<std::size_t>(len));
    std::vector<double> f0s(static_cast<std::size_t>(len));
    std::vector<double> durs(static_cast<std::size_t>(len));
    const double base_f0 = item.uniform(100.0, 160.0);
    for (int i = 0; i < len; ++i) {
      // Uniform draw, rejecting immediate repeats: the recognizer collapses
      // consecutive identical labels, so repeats could never round-trip.
      int id;
      do {
        id = static_cast<int>(item.below(static_cast<std::uint64_t>(alphabet_size)));
      } while (i > 0 && id == ids[static_cast<std::size_t>(i - 1)]);
      ids[static_cast<std::size_t>(i)] = id;
      f0s[static_cast<std::size_t>(i)] = base_f0 * item.uniform(0.92, 1.08);
      durs[static_cast<std::size_t>(i)] = item.uniform(0.09, 0.16);
    }
    UtteranceRecord rec = synthesize_utterance(ids, f0s, durs, m.alphabet, m.speakers[speaker],
                                               item.next_u64());
    char name[32];
    std::snprintf(name, sizeof name, "u%04d", u);
    rec.id = name;
    const std::string rel = std::string(name) + ".wav";
    write_wav((fs::path(out_dir) / rel).string(), rec.waveform);

    ManifestEntry e;
    e.id = rec.id;
    for (int id : rec.phonemes) e.phonemes.push_back(m.alphabet[id].symbol);
    e.durations_frames = rec.durations_frames;
    e.f0_hz = rec.f0_hz;
    e.audio_path = rel;
    e.speaker = speaker;
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, out_dir);
  return m;
}

double cer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  if (reference.empty()) throw InvalidInput("cer: empty reference");
  const std::size_t nr = reference.size(), nh = hypothesis.size();
  std::vector<std::vector<int>> d(nr + 1, std::vector<int>(nh + 1, 0));
  for (std::size_t i = 0; i <= nr; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= nh; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= nr; ++i)
    for (std::size_t j = 1; j <= nh; ++j) {
      const int sub = d[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  return static_cast<double>(d[nr][nh]) / static_cast<double>(nr);
}

std::vector<std::string> ids_to_symbols(const std::vector<int>& ids,
                                        const std::vector<PhonemeSpec>& alphabet) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(alphabet[static_cast<std::size_t>(id)].symbol);
  return out;
}

}  // namespace sftts
