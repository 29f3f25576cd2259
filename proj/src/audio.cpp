#include "sftts/audio.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace sftts {

namespace {
void put_u32(std::ofstream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}
void put_u16(std::ofstream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}
std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
  w.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_wav: cannot open " + path);
  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put_u32(os, 16);
  put_u16(os, 1);  // PCM
  put_u16(os, 1);  // mono
  put_u32(os, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(os, static_cast<std::uint32_t>(w.sample_rate * 2));
  put_u16(os, 2);
  put_u16(os, 16);
  os.write("data", 4);
  put_u32(os, data_bytes);
  for (double s : w.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    char b[2] = {static_cast<char>(q & 0xff), static_cast<char>((q >> 8) & 0xff)};
    os.write(b, 2);
  }
  if (!os) throw IoError("write_wav: write failed for " + path);
}

Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_wav: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError("read_wav: not a RIFF/WAVE file: " + path);
  std::size_t pos = 12;
  int sample_rate = 0, channels = 0, bits = 0;
  std::size_t data_off = 0, data_len = 0;
  while (pos + 8 <= buf.size()) {
    const unsigned char* hd = buf.data() + pos;
    std::uint32_t len = get_u32(hd + 4);
    if (std::memcmp(hd, "fmt ", 4) == 0 && len >= 16) {
      channels = get_u16(hd + 10);
      sample_rate = static_cast<int>(get_u32(hd + 12));
      bits = get_u16(hd + 22);
    } else if (std::memcmp(hd, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (channels != 1 || bits != 16 || data_off == 0)
    throw IoError("read_wav: expected 16-bit PCM mono: " + path);
  if (sample_rate != kSampleRate) throw IoError("read_wav: expected 22050 Hz: " + path);
  if (data_off + data_len > buf.size()) data_len = buf.size() - data_off;
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    std::int16_t q = static_cast<std::int16_t>(get_u16(buf.data() + data_off + 2 * i));
    w.samples[i] = static_cast<double>(q) / 32767.0;
  }
  return w;
}

}  // namespace sftts
