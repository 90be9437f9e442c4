#pragma once

#include <string>
#include <vector>

#include "m2l2/model.hpp"
#include "m2l2/spectral.hpp"
#include "m2l2/wav.hpp"

// Encode/decode pipeline: parallel chunk encoding, autoregressive decoding
// with a free refinement pass, and the latent file format.
namespace m2l2 {

// T chunks of summary embeddings, each [K x d_lat] with values in (-1,1).
struct LatentSequence {
  std::vector<Mat<float>> latents;
  int sample_rate = 0;
  long original_length = 0;  // samples before padding
  int channels = 0;
  std::string fingerprint;   // config fingerprint of the producing model
  double sigma_cond = -1.0;  // annotated by decode tooling; < 0 = unset

  std::size_t chunks() const { return latents.size(); }
};

struct DecodeOptions {
  // Noise level at which the previous chunk is re-corrupted before
  // conditioning the next one; 0 conditions on the clean chunk.
  double sigma_cond = 0.4;
  std::uint64_t seed = 0;
};

struct DecodeStats {
  std::uint64_t cm_evals = 0;           // consistency evaluations this decode
  std::size_t max_live_cross_sets = 0;  // streaming bound; stays <= 2
};

// Chunk encoding is stateless, so chunks are processed in parallel
// (`threads` <= 0 picks the hardware concurrency) with order preserved.
LatentSequence encode(AutoEncoder<float>& model, const Waveform& w,
                      int threads = 0);

// Sequential two-step decoding over compressed spectrogram chunks: chunk 0
// is generated from pure noise in one evaluation; every later evaluation
// pairs the re-noised previous chunk (level sigma_cond) with fresh noise at
// sigma_max, refining the previous chunk (the refined version replaces it)
// and generating the next — exactly T evaluations total.
Spectrogram decode_spectrogram(AutoEncoder<float>& model,
                               const LatentSequence& l,
                               const DecodeOptions& opts,
                               DecodeStats* stats = nullptr);

// decode_spectrogram + amplitude expansion + istft, trimmed to the original
// length.
Waveform decode(AutoEncoder<float>& model, const LatentSequence& l,
                const DecodeOptions& opts, DecodeStats* stats = nullptr);

struct RoundtripResult {
  Waveform output;
  double si_sdr_db = 0.0;
  long input_samples = 0;
  long output_samples = 0;
  std::size_t chunks = 0;
  double sigma_cond = 0.0;
};

RoundtripResult roundtrip(AutoEncoder<float>& model, const Waveform& w,
                          const DecodeOptions& opts);

// Latent file format: magic "M2L2", version u16, u32 JSON header length,
// JSON header, then the [T, K, d_lat] payload as little-endian f32.
void save_latents(const std::string& path, const LatentSequence& l);
LatentSequence load_latents(const std::string& path);

}  // namespace m2l2
