#pragma once

#include <string>

#include "m2l2/tensor.hpp"

namespace m2l2 {

struct Waveform {
  Mat<float> samples;  // [channels x n], planar
  int sample_rate = 0;

  Index channels() const { return samples.rows(); }
  Index length() const { return samples.cols(); }
};

// RIFF WAV, 16-bit PCM or 32-bit IEEE float, mono or stereo.
Waveform load_wav(const std::string& path);
void save_wav(const std::string& path, const Waveform& w, int bits = 32);

}  // namespace m2l2
