#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "nlcnn/tensor.hpp"

namespace nlcnn::dsp {

// Decoded audio. Samples are in [-1, 1] after PCM normalization.
struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

inline constexpr int kSampleRate = 16000;
inline constexpr int kNumFilters = 40;
inline constexpr double kFrameLengthS = 0.025;  // 400 samples
inline constexpr double kFrameShiftS = 0.010;   // 160 samples
inline constexpr int kFftSize = 512;
inline constexpr int kNumBins = kFftSize / 2 + 1;  // 257
inline constexpr double kEnergyFloor = 1e-10;

// Log mel filterbank energies, one row of 40 per frame.
struct LfbeFrames {
  std::int64_t num_frames = 0;
  std::vector<double> values;  // num_frames x 40, row-major

  double at(std::int64_t frame, int coeff) const { return values[static_cast<std::size_t>(frame * kNumFilters + coeff)]; }
  // [1, 1, 40, T] network input (frequency is the image height axis).
  Tensor to_input_tensor(DType dt) const;
};

// Number of frames for a sample count: floor((n - window)/hop) + 1.
std::int64_t frame_count(std::int64_t num_samples);

// Reads a RIFF/WAVE file: PCM 16-bit little-endian, 16 kHz, mono or stereo
// (stereo is downmixed by averaging). Samples scaled by 1/32768.
// Throws DecodeError with a specific kind for every malformed case.
AudioBuffer load_wav(const std::string& path);

// Writes a mono PCM 16-bit WAV (used by fixtures and the synthetic dataset).
// Samples are clamped to [-1, 1] before quantization.
void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate);

// Hamming window, zero-padded 512-point FFT, power spectrum, 40 triangular
// mel filters over 0..8000 Hz (HTK scale), natural log with a 1e-10 floor.
// Audio must contain at least one 25 ms window.
LfbeFrames extract_lfbe(const AudioBuffer& audio);

// Returns the span [start_s, start_s + duration_s). Reads past the end wrap
// around, so short utterances come back repeated to the requested length.
AudioBuffer crop_segment(const AudioBuffer& audio, double start_s, double duration_s);

// In-place iterative radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& buf);

// The 40 x 257 triangular filterbank matrix, row-major.
const std::vector<double>& mel_filterbank();

// Center frequency in Hz of a mel filter (for diagnostics/tests).
double mel_filter_center_hz(int filter);

}  // namespace nlcnn::dsp
