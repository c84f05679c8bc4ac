// Mono PCM16 WAV I/O.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spexplus {

class AudioFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = 8000;

  std::size_t size() const { return samples.size(); }
  double seconds() const { return double(samples.size()) / double(sample_rate); }
  friend bool operator==(const AudioBuffer&, const AudioBuffer&) = default;
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | p[1] << 8);
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}

}  // namespace detail

inline std::int16_t float_to_pcm16(float x) {
  const double v = std::round(double(x) * 32768.0);
  return std::int16_t(std::clamp(v, -32768.0, 32767.0));
}

inline float pcm16_to_float(std::int16_t s) { return float(s) / 32768.0f; }

// Parses a RIFF/WAVE PCM16 mono file held in memory.
inline AudioBuffer decode_wav(const std::string& bytes, int expected_rate = 8000,
                              const std::string& label = "wav") {
  auto fail = [&](const std::string& m) { throw AudioFormatError(label + ": " + m); };
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) fail("truncated file (no RIFF header)");
  if (std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.data() + pos, 4);
    const std::uint32_t len = detail::read_u32(p + pos + 4);
    pos += 8;
    if (id == "fmt ") {
      if (len < 16 || pos + len > bytes.size()) fail("truncated fmt chunk");
      const std::uint16_t format = detail::read_u16(p + pos);
      channels = detail::read_u16(p + pos + 2);
      rate = detail::read_u32(p + pos + 4);
      bits = detail::read_u16(p + pos + 14);
      if (format != 1) fail("unsupported codec " + std::to_string(format) + " (PCM required)");
      if (channels != 1) fail("mono required, file has " + std::to_string(channels) + " channels");
      if (bits != 16) fail("16-bit samples required, file has " + std::to_string(bits));
      if (expected_rate > 0 && int(rate) != expected_rate)
        fail("sample rate " + std::to_string(rate) + " Hz, expected " + std::to_string(expected_rate));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail("data chunk before fmt chunk");
      if (pos + len > bytes.size()) fail("truncated data chunk");
      if (len % 2 != 0) fail("odd data chunk length");
      AudioBuffer out;
      out.sample_rate = int(rate);
      out.samples.resize(len / 2);
      for (std::size_t i = 0; i < out.samples.size(); ++i)
        out.samples[i] = pcm16_to_float(std::int16_t(detail::read_u16(p + pos + 2 * i)));
      return out;
    }
    pos += len + (len & 1);
  }
  fail(have_fmt ? "truncated file (no data chunk)" : "truncated file (no fmt chunk)");
  return {};
}

inline std::string encode_wav(const AudioBuffer& audio) {
  const std::uint32_t data_len = std::uint32_t(audio.samples.size() * 2);
  std::string s;
  s.reserve(44 + data_len);
  s += "RIFF";
  detail::put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, 1);
  detail::put_u16(s, 1);
  detail::put_u32(s, std::uint32_t(audio.sample_rate));
  detail::put_u32(s, std::uint32_t(audio.sample_rate) * 2);
  detail::put_u16(s, 2);
  detail::put_u16(s, 16);
  s += "data";
  detail::put_u32(s, data_len);
  for (float x : audio.samples) detail::put_u16(s, std::uint16_t(float_to_pcm16(x)));
  return s;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline AudioBuffer read_wav(const std::filesystem::path& path, int expected_rate = 8000) {
  return decode_wav(read_file(path), expected_rate, path.string());
}

inline void write_wav(const std::filesystem::path& path, const AudioBuffer& audio) {
  write_file(path, encode_wav(audio));
}

}  // namespace spexplus
