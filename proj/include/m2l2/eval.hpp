#pragma once

#include <memory>
#include <string>
#include <vector>

#include "m2l2/model.hpp"
#include "m2l2/tensor.hpp"
#include "m2l2/wav.hpp"

// Reconstruction metrics: SI-SDR, Fréchet distance over pluggable audio
// embedders, and the sigma_cond sweep harness.
namespace m2l2 {

// Scale-invariant signal-to-distortion ratio in dB: the reference is scaled
// by <estimate, reference>/||reference||^2 and the result compares that
// projection's energy to the residual's. Capped at +100 dB when the residual
// is numerically zero; floored at -100 dB when the projection is zero.
double si_sdr(const Vec<double>& estimate, const Vec<double>& reference);
double si_sdr(const Waveform& estimate, const Waveform& reference);

struct EmbeddingStats {
  Vec<double> mean;  // [d]
  Mat<double> cov;   // [d x d], unbiased, symmetric
  long count = 0;
};

EmbeddingStats embedding_stats(const std::vector<Vec<double>>& embeddings);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), matrix square root
// via symmetric eigendecomposition; eigenvalues below -1e-8 are an error,
// small negatives clamp to zero, and the result clamps to >= 0.
double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b);

// Deterministic waveform -> set of d-dimensional embeddings.
class Embedder {
public:
  virtual ~Embedder() = default;
  virtual std::string identifier() const = 0;
  virtual Index dimension() const = 0;
  virtual std::vector<Vec<double>> embed(const Waveform& w) const = 0;
};

// Mel-band log energies pooled over one-second windows.
class LogMelEmbedder : public Embedder {
public:
  explicit LogMelEmbedder(int sample_rate, int n_mels = 16, int n_fft = 256);
  std::string identifier() const override { return id_; }
  Index dimension() const override { return n_mels_; }
  std::vector<Vec<double>> embed(const Waveform& w) const override;

private:
  int sample_rate_, n_mels_, n_fft_;
  std::string id_;
  Mat<double> filterbank_;  // [n_mels x n_fft/2+1]
};

// Seeded Gaussian projection of window-pooled log-magnitude spectra.
class RandomProjectionEmbedder : public Embedder {
public:
  RandomProjectionEmbedder(int sample_rate, std::uint64_t seed, int dim = 12,
                           int n_fft = 256);
  std::string identifier() const override { return id_; }
  Index dimension() const override { return dim_; }
  std::vector<Vec<double>> embed(const Waveform& w) const override;

private:
  int sample_rate_, dim_, n_fft_;
  std::string id_;
  Mat<double> projection_;  // [dim x n_fft/2+1]
};

struct SweepRow {
  double sigma_cond = 0.0;
  double fd = 0.0;
  std::string embedder;
  long n_items = 0;
};

// For each sigma_cond in `grid` (subset of [0,1]), roundtrip every clip in
// `eval_set` and report the Fréchet distance between the original and
// reconstructed embedding statistics, once per embedder.
std::vector<SweepRow> sigma_cond_sweep(
    AutoEncoder<float>& model, const std::vector<Waveform>& eval_set,
    const std::vector<double>& grid,
    const std::vector<const Embedder*>& embedders, std::uint64_t seed);

// Header exactly: sigma_cond,fd,embedder,n_items
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace m2l2
