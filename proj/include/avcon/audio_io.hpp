#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "avcon/error.hpp"

namespace avcon {

inline constexpr int kSampleRate = 16000;

struct AudioWaveform {
  std::vector<float> samples;
  int sample_rate_hz = kSampleRate;
  std::string track_id;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

// Interleaved multichannel PCM as decoded from a container, before mixing.
struct PcmBuffer {
  std::vector<float> interleaved;
  int channels = 1;
  int sample_rate_hz = kSampleRate;

  std::size_t frames() const { return channels > 0 ? interleaved.size() / static_cast<std::size_t>(channels) : 0; }
};

namespace detail {

inline double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

// Kaiser window w(r), r in [0, 1], tabulated once.
inline double kaiser_lookup(double r) {
  constexpr int kTable = 4096;
  static const std::vector<double> table = [] {
    std::vector<double> t(kTable + 2);
    const double i0_beta = bessel_i0(8.6);
    for (int i = 0; i <= kTable + 1; ++i) {
      const double x = std::min(1.0, static_cast<double>(i) / kTable);
      t[static_cast<std::size_t>(i)] = bessel_i0(8.6 * std::sqrt(std::max(0.0, 1.0 - x * x))) / i0_beta;
    }
    return t;
  }();
  const double pos = std::min(1.0, std::abs(r)) * kTable;
  const auto i = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(i);
  return table[i] + frac * (table[i + 1] - table[i]);
}

}  // namespace detail

// Band-limited resampling with a Kaiser-windowed sinc kernel.
// Quality is fixed: 16 zero crossings per side, beta = 8.6.
// Output length is round(n * out_rate / in_rate).
inline std::vector<float> resample(std::span<const float> in, double in_rate, double out_rate) {
  if (!(in_rate > 0.0 && out_rate > 0.0)) fail(ErrorKind::invalid_input, "resample: rates must be positive");
  if (in.empty()) return {};
  if (in_rate == out_rate) return {in.begin(), in.end()};

  constexpr int kZeros = 16;
  const double ratio = out_rate / in_rate;
  const double cutoff = std::min(1.0, ratio);  // relative to input Nyquist
  const double half_width = kZeros / cutoff;    // input samples
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(in.size()) * ratio));
  const auto n_in = static_cast<std::ptrdiff_t>(in.size());

  std::vector<float> out(n_out);
  for (std::size_t m = 0; m < n_out; ++m) {
    const double x = static_cast<double>(m) / ratio;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(x - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(n_in - 1, static_cast<std::ptrdiff_t>(std::floor(x + half_width)));
    double acc = 0.0;
    for (std::ptrdiff_t n = lo; n <= hi; ++n) {
      const double u = x - static_cast<double>(n);
      const double arg = cutoff * u;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double w = detail::kaiser_lookup(u / half_width);
      acc += in[static_cast<std::size_t>(n)] * cutoff * sinc * w;
    }
    out[m] = static_cast<float>(acc);
  }
  return out;
}

// Parses a RIFF/WAVE byte image: PCM 8/16/24/32-bit integer and 32/64-bit float,
// including WAVE_FORMAT_EXTENSIBLE.
inline PcmBuffer parse_wav(std::span<const unsigned char> bytes, const std::string& origin) {
  auto bad = [&](const std::string& why) -> PcmBuffer { fail(ErrorKind::decode, origin + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    return bad("not a RIFF/WAVE file");

  int format = 0, channels = 0, rate = 0, bits = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = bytes.size() - body;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16 || avail < 16) return bad("truncated fmt chunk");
      format = detail::read_u16(chunk + 8);
      channels = detail::read_u16(chunk + 10);
      rate = static_cast<int>(detail::read_u32(chunk + 12));
      bits = detail::read_u16(chunk + 22);
      if (format == 0xFFFE && len >= 26 && avail >= 26) format = detail::read_u16(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = std::min<std::size_t>(len, avail);
    }
    pos = body + len + (len & 1u);
  }
  if (format == 0) return bad("missing fmt chunk");
  if (!data) return bad("missing data chunk");
  if (channels <= 0 || rate <= 0) return bad("invalid channel count or sample rate");

  const int bytes_per = bits / 8;
  if (bytes_per <= 0) return bad("invalid bit depth");
  const bool is_float = format == 3;
  if (format != 1 && !is_float) return bad("unsupported WAV format code " + std::to_string(format));
  if (is_float && bits != 32 && bits != 64) return bad("unsupported float bit depth");
  if (!is_float && (bits != 8 && bits != 16 && bits != 24 && bits != 32)) return bad("unsupported PCM bit depth");

  PcmBuffer buf;
  buf.channels = channels;
  buf.sample_rate_hz = rate;
  const std::size_t n = data_len / static_cast<std::size_t>(bytes_per);
  buf.interleaved.resize(n - n % static_cast<std::size_t>(channels));
  for (std::size_t i = 0; i < buf.interleaved.size(); ++i) {
    const unsigned char* p = data + i * static_cast<std::size_t>(bytes_per);
    double v = 0.0;
    if (is_float && bits == 32) {
      float f;
      std::memcpy(&f, p, 4);
      v = f;
    } else if (is_float) {
      double d;
      std::memcpy(&d, p, 8);
      v = d;
    } else if (bits == 8) {
      v = (static_cast<int>(p[0]) - 128) / 128.0;
    } else if (bits == 16) {
      v = static_cast<std::int16_t>(detail::read_u16(p)) / 32768.0;
    } else if (bits == 24) {
      std::int32_t s = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) | (std::int32_t(p[2]) << 16);
      if (s & 0x800000) s |= ~0xFFFFFF;
      v = s / 8388608.0;
    } else {
      v = static_cast<std::int32_t>(detail::read_u32(p)) / 2147483648.0;
    }
    if (!std::isfinite(v)) return bad("non-finite sample");
    buf.interleaved[i] = static_cast<float>(v);
  }
  return buf;
}

// Channel mean, band-limited resample to 16 kHz, clamp to [-1, 1].
inline AudioWaveform to_model_waveform(const PcmBuffer& pcm, std::string track_id) {
  const std::size_t frames = pcm.frames();
  std::vector<float> mono(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (int c = 0; c < pcm.channels; ++c) acc += pcm.interleaved[f * static_cast<std::size_t>(pcm.channels) + c];
    mono[f] = static_cast<float>(acc / pcm.channels);
  }
  AudioWaveform w;
  w.track_id = std::move(track_id);
  w.samples = resample(mono, pcm.sample_rate_hz, kSampleRate);
  for (float& s : w.samples) s = std::clamp(s, -1.0f, 1.0f);
  return w;
}

inline AudioWaveform decode_audio(const std::filesystem::path& path, std::string track_id = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::decode, path.string() + ": cannot open audio file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto w = to_model_waveform(parse_wav(bytes, path.string()), track_id.empty() ? path.stem().string() : track_id);
  if (w.samples.empty()) fail(ErrorKind::decode, path.string() + ": no audio samples");
  return w;
}

// 16-bit PCM writer (interleaved input).
inline void write_wav16(const std::filesystem::path& path, std::span<const float> interleaved, int channels,
                        int sample_rate) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  auto u32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  auto u16 = [&](std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
  };
  const auto data_bytes = static_cast<std::uint32_t>(interleaved.size() * 2);
  os.write("RIFF", 4);
  u32(36 + data_bytes);
  os.write("WAVEfmt ", 8);
  u32(16);
  u16(1);
  u16(static_cast<std::uint16_t>(channels));
  u32(static_cast<std::uint32_t>(sample_rate));
  u32(static_cast<std::uint32_t>(sample_rate * channels * 2));
  u16(static_cast<std::uint16_t>(channels * 2));
  u16(16);
  os.write("data", 4);
  u32(data_bytes);
  for (float s : interleaved) {
    const auto q = static_cast<std::int16_t>(std::lrint(std::clamp(s, -1.0f, 1.0f) * 32767.0f));
    u16(static_cast<std::uint16_t>(q));
  }
}

}  // namespace avcon
