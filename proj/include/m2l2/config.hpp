#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2l2/tensor.hpp"

namespace m2l2 {

enum class LatentVariant { summary, ordered };

enum class NoiseDist { uniform, lognormal };

// Everything the system needs to build, train, and run a model, in one
// serializable record. Presets "paper" and "toy" ship in presets/.
struct ModelConfig {
  // spectral
  int sample_rate = 44100;
  int n_fft = 2048;
  int hop = 512;
  std::string window = "hann";
  double alpha = 0.65;  // amplitude compression exponent
  double beta = 0.35;   // amplitude compression scale
  int spec_length = 64; // frames per chunk

  // architecture
  int levels = 5;  // number of 2x downsamples
  std::vector<int> layers = {3, 3, 3, 4, 5, 1};      // levels+1 entries
  std::vector<int> channels = {64, 128, 256, 256, 256, 256};
  int dim = 256;
  int heads = 4;
  int mlp_mult = 4;
  int n_transformer_blocks = 16;
  int K = 8;
  int d_lat = 64;
  LatentVariant variant = LatentVariant::summary;
  bool stereo = false;

  // consistency
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  double rho = 7.0;
  double c_factor = 0.00054;
  int s0 = 10;
  int s1 = 1280;
  bool use_c_in = false;  // optional input preconditioning, off by default
  NoiseDist noise_dist = NoiseDist::uniform;
  double lognormal_mean = -1.1;
  double lognormal_std = 2.0;

  // training
  double lr0 = 1e-4;
  double lr_final = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double ema_momentum = 0.9999;
  int batch = 16;
  long total_iterations = 1000000;
  std::uint64_t seed = 42;

  // decode
  double sigma_cond = 0.4;

  // ---- derived quantities ----
  int audio_channels() const { return stereo ? 2 : 1; }
  int spec_channels() const { return 2 * audio_channels(); }  // re/im per ear
  int freq_bins() const { return n_fft / 2; }  // Nyquist dropped, DC kept
  int chunk_samples() const { return hop * spec_length; }
  // Training crop: exactly 2*spec_length frames at (L - n_fft)/hop + 1.
  long segment_samples() const {
    return long(n_fft) + (2L * spec_length - 1) * hop;
  }
  int tokens_per_chunk() const {
    return (spec_length >> levels) * (freq_bins() >> levels);
  }
  int latent_values_per_chunk() const { return K * d_lat; }
  // For the ordered variant: per-token head width.
  int ordered_token_width() const {
    return latent_values_per_chunk() / tokens_per_chunk();
  }
  double compression_ratio() const {
    return double(chunk_samples()) * audio_channels() /
           latent_values_per_chunk();
  }
  double latent_rate_hz() const {
    return double(sample_rate) * K / chunk_samples();
  }

  // Throws Error with the offending field name on any invariant violation.
  void validate() const;
};

ModelConfig paper_preset();
ModelConfig toy_preset();

// JSON (canonical object with sections spectral/architecture/consistency/
// training/decode). load supports {"preset": "toy", ...overrides}.
std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);
ModelConfig load_config_file(const std::string& path);

// FNV-1a 64 over the canonical JSON serialization, as 16 hex chars.
std::string config_fingerprint(const ModelConfig& c);

std::uint64_t fnv1a64(const void* data, std::size_t n);

}  // namespace m2l2
