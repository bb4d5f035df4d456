#include "poisonlab/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace poisonlab {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
}

std::int16_t quantize_sample(double s) {
  const double clamped = std::clamp(s, -1.0, 1.0);
  long q = std::lround(clamped * 32768.0);
  q = std::clamp(q, -32768L, 32767L);
  return static_cast<std::int16_t>(q);
}

}  // namespace

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_wav: cannot open " + path);
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (data.size() < 12 || std::memcmp(data.data(), "RIFF", 4) != 0 ||
      std::memcmp(data.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("load_wav: not a RIFF/WAVE file: " + path);

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  const unsigned char* pcm = nullptr;
  std::uint32_t pcm_bytes = 0;

  std::size_t pos = 12;
  while (pos + 8 <= data.size()) {
    const char* id = reinterpret_cast<const char*>(data.data() + pos);
    const std::uint32_t chunk_size = read_u32(data.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > data.size())
      throw std::runtime_error("load_wav: truncated chunk in " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw std::runtime_error("load_wav: bad fmt chunk in " + path);
      format = read_u16(data.data() + body);
      channels = read_u16(data.data() + body + 2);
      sample_rate = read_u32(data.data() + body + 4);
      bits = read_u16(data.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      pcm = data.data() + body;
      pcm_bytes = chunk_size;
    }
    pos = body + chunk_size + (chunk_size & 1);  // chunks are word-aligned
  }

  if (!have_fmt || pcm == nullptr)
    throw std::runtime_error("load_wav: missing fmt or data chunk in " + path);
  if (format != 1) throw std::runtime_error("load_wav: not PCM (format " +
                                            std::to_string(format) + "): " + path);
  if (channels != 1)
    throw std::runtime_error("load_wav: expected mono, got " +
                             std::to_string(channels) + " channels: " + path);
  if (bits != 16)
    throw std::runtime_error("load_wav: expected 16-bit PCM, got " +
                             std::to_string(bits) + "-bit: " + path);
  if (sample_rate == 0) throw std::runtime_error("load_wav: zero sample rate: " + path);

  Waveform w;
  w.sample_rate = static_cast<int>(sample_rate);
  const std::size_t n = pcm_bytes / 2;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int16_t q =
        static_cast<std::int16_t>(pcm[2 * i] | (pcm[2 * i + 1] << 8));
    w.samples[i] = static_cast<double>(q) / 32768.0;
  }
  return w;
}

void save_wav(const Waveform& w, const std::string& path) {
  if (w.samples.empty()) throw std::invalid_argument("save_wav: empty waveform");
  if (w.sample_rate <= 0) throw std::invalid_argument("save_wav: bad sample rate");

  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_u16(out, 2);   // block align
  put_u16(out, 16);  // bits per sample
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (double s : w.samples) {
    const std::int16_t q = quantize_sample(s);
    out.push_back(static_cast<unsigned char>(q & 0xff));
    out.push_back(static_cast<unsigned char>((q >> 8) & 0xff));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_wav: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_wav: write failed: " + path);
}

Waveform quantize16(const Waveform& w) {
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    out.samples[i] = static_cast<double>(quantize_sample(w.samples[i])) / 32768.0;
  return out;
}

}  // namespace poisonlab
