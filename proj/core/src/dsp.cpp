#include "nlcnn/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "nlcnn/error.hpp"

namespace nlcnn::dsp {

namespace {

constexpr int kWindowSamples = 400;  // 25 ms @ 16 kHz
constexpr int kHopSamples = 160;     // 10 ms @ 16 kHz

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

std::int64_t frame_count(std::int64_t num_samples) {
  if (num_samples < kWindowSamples) return 0;
  return (num_samples - kWindowSamples) / kHopSamples + 1;
}

AudioBuffer load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DecodeError(DecodeError::Kind::NotRiff, path + ": not a RIFF/WAVE file");
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* pcm = nullptr;
  std::size_t pcm_len = 0;

  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + off);
    const std::uint32_t len = read_u32(bytes.data() + off + 4);
    if (off + 8 + len > bytes.size()) {
      throw DecodeError(DecodeError::Kind::Truncated, path + ": chunk extends past end of file");
    }
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw DecodeError(DecodeError::Kind::Truncated, path + ": fmt chunk too short");
      const unsigned char* f = bytes.data() + off + 8;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
    } else if (std::memcmp(id, "data", 4) == 0) {
      pcm = bytes.data() + off + 8;
      pcm_len = len;
    }
    off += 8 + len + (len & 1);  // chunks are word-aligned
  }

  if (pcm == nullptr) throw DecodeError(DecodeError::Kind::Truncated, path + ": no data chunk");
  if (format != 1 || bits != 16) {
    throw DecodeError(DecodeError::Kind::UnsupportedCodec,
                      path + ": only PCM 16-bit supported (format=" + std::to_string(format) +
                          ", bits=" + std::to_string(bits) + ")");
  }
  if (rate != kSampleRate) {
    throw DecodeError(DecodeError::Kind::UnsupportedRate,
                      path + ": sample rate " + std::to_string(rate) + " != 16000");
  }
  if (channels != 1 && channels != 2) {
    throw DecodeError(DecodeError::Kind::UnsupportedLayout,
                      path + ": " + std::to_string(channels) + " channels unsupported");
  }
  if (pcm_len % (2u * channels) != 0) {
    throw DecodeError(DecodeError::Kind::Truncated, path + ": data chunk not sample-aligned");
  }

  const std::size_t num_frames = pcm_len / (2u * channels);
  AudioBuffer out;
  out.sample_rate = static_cast<int>(rate);
  out.samples.resize(num_frames);
  for (std::size_t i = 0; i < num_frames; ++i) {
    double acc = 0.0;
    for (unsigned ch = 0; ch < channels; ++ch) {
      const unsigned char* p = pcm + 2 * (i * channels + ch);
      const auto s = static_cast<std::int16_t>(p[0] | (p[1] << 8));
      acc += static_cast<double>(s);
    }
    out.samples[i] = acc / (32768.0 * channels);
  }
  return out;
}

void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_wav: cannot open " + path);
  const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
  const std::uint32_t riff_len = 36 + data_len;
  auto put_u32 = [&](std::uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    out.write(b, 4);
  };
  auto put_u16 = [&](std::uint16_t v) {
    char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
    out.write(b, 2);
  };
  out.write("RIFF", 4);
  put_u32(riff_len);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(static_cast<std::uint32_t>(sample_rate));
  put_u32(static_cast<std::uint32_t>(sample_rate * 2));
  put_u16(2);
  put_u16(16);
  out.write("data", 4);
  put_u32(data_len);
  for (double s : samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    auto q = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
    put_u16(static_cast<std::uint16_t>(q));
  }
  if (!out) throw IoError("write_wav: write failed for " + path);
}

void fft_radix2(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ContractError("fft_radix2: size must be a power of two");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = buf[i + k];
        const std::complex<double> v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

const std::vector<double>& mel_filterbank() {
  static const std::vector<double> bank = [] {
    std::vector<double> fb(static_cast<std::size_t>(kNumFilters) * kNumBins, 0.0);
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kSampleRate / 2.0);
    // 42 boundary points delimit 40 overlapping triangles.
    std::vector<double> edges(kNumFilters + 2);
    for (int i = 0; i < kNumFilters + 2; ++i) {
      edges[static_cast<std::size_t>(i)] =
          mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kNumFilters + 1));
    }
    const double bin_hz = static_cast<double>(kSampleRate) / kFftSize;
    for (int f = 0; f < kNumFilters; ++f) {
      const double left = edges[static_cast<std::size_t>(f)];
      const double center = edges[static_cast<std::size_t>(f) + 1];
      const double right = edges[static_cast<std::size_t>(f) + 2];
      for (int k = 0; k < kNumBins; ++k) {
        const double hz = k * bin_hz;
        double w = 0.0;
        if (hz >= left && hz <= center) {
          w = (hz - left) / (center - left);
        } else if (hz > center && hz <= right) {
          w = (right - hz) / (right - center);
        }
        if (w > 0.0) fb[static_cast<std::size_t>(f * kNumBins + k)] = w;
      }
    }
    return fb;
  }();
  return bank;
}

double mel_filter_center_hz(int filter) {
  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(kSampleRate / 2.0);
  return mel_to_hz(mel_lo + (mel_hi - mel_lo) * (filter + 1) / (kNumFilters + 1));
}

LfbeFrames extract_lfbe(const AudioBuffer& audio) {
  if (audio.sample_rate != kSampleRate) {
    throw DecodeError(DecodeError::Kind::UnsupportedRate,
                      "extract_lfbe: sample rate must be 16000");
  }
  const std::int64_t n = static_cast<std::int64_t>(audio.samples.size());
  const std::int64_t t = frame_count(n);
  if (t <= 0) {
    throw ContractError("extract_lfbe: audio shorter than one 25 ms window (" +
                        std::to_string(n) + " samples)");
  }

  // Symmetric Hamming window over the 400-sample frame.
  static const std::vector<double> window = [] {
    std::vector<double> w(kWindowSamples);
    for (int i = 0; i < kWindowSamples; ++i) {
      w[static_cast<std::size_t>(i)] =
          0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (kWindowSamples - 1));
    }
    return w;
  }();

  const auto& fb = mel_filterbank();
  LfbeFrames out;
  out.num_frames = t;
  out.values.resize(static_cast<std::size_t>(t) * kNumFilters);

  std::vector<std::complex<double>> buf(kFftSize);
  std::vector<double> power(kNumBins);
  for (std::int64_t fr = 0; fr < t; ++fr) {
    const double* src = audio.samples.data() + fr * kHopSamples;
    for (int i = 0; i < kWindowSamples; ++i) {
      buf[static_cast<std::size_t>(i)] = {src[i] * window[static_cast<std::size_t>(i)], 0.0};
    }
    std::fill(buf.begin() + kWindowSamples, buf.end(), std::complex<double>(0.0, 0.0));
    fft_radix2(buf);
    for (int k = 0; k < kNumBins; ++k) power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
    for (int f = 0; f < kNumFilters; ++f) {
      double e = 0.0;
      const double* row = fb.data() + f * kNumBins;
      for (int k = 0; k < kNumBins; ++k) e += row[k] * power[static_cast<std::size_t>(k)];
      out.values[static_cast<std::size_t>(fr * kNumFilters + f)] = std::log(std::max(e, kEnergyFloor));
    }
  }
  return out;
}

AudioBuffer crop_segment(const AudioBuffer& audio, double start_s, double duration_s) {
  if (audio.samples.empty()) throw ContractError("crop_segment: empty audio");
  if (start_s < 0.0 || duration_s <= 0.0) {
    throw ContractError("crop_segment: start must be >= 0 and duration > 0");
  }
  const std::int64_t n = static_cast<std::int64_t>(audio.samples.size());
  const auto start = static_cast<std::int64_t>(std::llround(start_s * audio.sample_rate));
  const auto len = static_cast<std::int64_t>(std::llround(duration_s * audio.sample_rate));
  AudioBuffer out;
  out.sample_rate = audio.sample_rate;
  out.samples.resize(static_cast<std::size_t>(len));
  for (std::int64_t i = 0; i < len; ++i) {
    out.samples[static_cast<std::size_t>(i)] = audio.samples[static_cast<std::size_t>((start + i) % n)];
  }
  return out;
}

Tensor LfbeFrames::to_input_tensor(DType dt) const {
  // Stored frame-major (T x 40); the network wants [1, 1, 40, T].
  Tensor out = make_tensor({1, 1, kNumFilters, num_frames}, dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.mut_data<T>();
    for (std::int64_t fr = 0; fr < num_frames; ++fr) {
      for (int f = 0; f < kNumFilters; ++f) {
        dst[static_cast<std::size_t>(f * num_frames + fr)] =
            static_cast<T>(values[static_cast<std::size_t>(fr * kNumFilters + f)]);
      }
    }
  });
  return out;
}

}  // namespace nlcnn::dsp

