#pragma once

#include <string>
#include <vector>

#include "m2l2/config.hpp"
#include "m2l2/wav.hpp"

// Waveform <-> amplitude-compressed complex STFT chunks. Chunks are stored as
// [2*channels x F*spec_length] matrices with column index = frame*F + bin
// (time-major) and row pairs (re, im) per audio channel. The Nyquist bin is
// dropped (F = n_fft/2, DC kept) and reinserted as zero before inversion.
namespace m2l2 {

struct SpectralConfig {
  int sample_rate = 44100;
  int n_fft = 2048;
  int hop = 512;
  std::string window = "hann";
  double alpha = 0.65;
  double beta = 0.35;
  int spec_length = 64;
  int audio_channels = 1;

  static SpectralConfig from(const ModelConfig& c) {
    return {c.sample_rate, c.n_fft,       c.hop,
            c.window,      c.alpha,       c.beta,
            c.spec_length, c.audio_channels()};
  }

  int freq_bins() const { return n_fft / 2; }
  int chunk_cols() const { return freq_bins() * spec_length; }
};

struct Spectrogram {
  std::vector<Mat<float>> chunks;  // each [2*channels x F*spec_length]
  bool compressed = false;
  int sample_rate = 0;
  int audio_channels = 1;
  long original_length = 0;  // samples before padding

  Index num_chunks() const { return Index(chunks.size()); }
};

// Smallest frame count >= the waveform's frames that is a multiple of
// spec_length; the padded sample count is n_fft + (frames-1)*hop.
long padded_frames(long samples, const SpectralConfig& cfg);
long padded_samples(long samples, const SpectralConfig& cfg);

Spectrogram stft(const Waveform& w, const SpectralConfig& cfg);

// Overlap-add inverse; trims to original_length when it is set.
Waveform istft(const Spectrogram& s, const SpectralConfig& cfg);

// beta * |c|^alpha * e^{i angle(c)} and its exact inverse.
void amplitude_compress(Spectrogram& s, const SpectralConfig& cfg);
void amplitude_expand(Spectrogram& s, const SpectralConfig& cfg);

}  // namespace m2l2
