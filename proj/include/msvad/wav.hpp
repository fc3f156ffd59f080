#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

struct WavData {
  int sample_rate = 0;
  std::vector<double> samples;  // mono, in [-1, 1]
};

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

/// Writes mono PCM 16-bit WAV.
inline void wav_write(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
  std::string out;
  const std::uint32_t n = static_cast<std::uint32_t>(samples.size());
  const std::uint32_t data_bytes = n * 2;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double x : samples) {
    double c = std::clamp(x, -1.0, 1.0);
    auto v = static_cast<std::int16_t>(std::lrint(c * 32767.0));
    detail::put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav_write: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("wav_write: write failed for " + path);
}

/// Reads a mono (or first-channel of multichannel) PCM 16-bit WAV.
inline WavData wav_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav_read: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error("wav_read: not a RIFF/WAVE file: " + path);
  }
  std::size_t pos = 12;
  int sample_rate = 0;
  int channels = 0;
  int bits = 0;
  WavData out;
  bool got_fmt = false;
  while (pos + 8 <= buf.size()) {
    const char* id = reinterpret_cast<const char*>(buf.data() + pos);
    const std::uint32_t sz = detail::get_u32(buf.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0 && body + 16 <= buf.size()) {
      const std::uint16_t fmt = detail::get_u16(buf.data() + body);
      channels = detail::get_u16(buf.data() + body + 2);
      sample_rate = static_cast<int>(detail::get_u32(buf.data() + body + 4));
      bits = detail::get_u16(buf.data() + body + 14);
      if (fmt != 1 || bits != 16) {
        throw std::runtime_error("wav_read: only PCM 16-bit supported: " + path);
      }
      got_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!got_fmt) throw std::runtime_error("wav_read: data before fmt: " + path);
      const std::size_t avail = std::min<std::size_t>(sz, buf.size() - body);
      const std::size_t n_frames = avail / (2 * static_cast<std::size_t>(channels));
      out.samples.resize(n_frames);
      for (std::size_t i = 0; i < n_frames; ++i) {
        const unsigned char* p = buf.data() + body + i * 2 * channels;
        auto v = static_cast<std::int16_t>(detail::get_u16(p));
        out.samples[i] = static_cast<double>(v) / 32768.0;
      }
      out.sample_rate = sample_rate;
      return out;
    }
    pos = body + sz + (sz & 1);
  }
  throw std::runtime_error("wav_read: no data chunk: " + path);
}

/// Linear resampling; identity if rates match.
inline std::vector<double> resample_linear(const std::vector<double>& x, int from_rate,
                                           int to_rate) {
  if (from_rate == to_rate || x.empty()) return x;
  const double ratio = static_cast<double>(from_rate) / static_cast<double>(to_rate);
  const auto n_out = static_cast<std::size_t>(
      std::floor(static_cast<double>(x.size() - 1) / ratio)) + 1;
  std::vector<double> y(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = static_cast<double>(i) * ratio;
    const auto i0 = static_cast<std::size_t>(t);
    const std::size_t i1 = std::min(i0 + 1, x.size() - 1);
    const double frac = t - static_cast<double>(i0);
    y[i] = x[i0] * (1.0 - frac) + x[i1] * frac;
  }
  return y;
}

}  // namespace msvad
