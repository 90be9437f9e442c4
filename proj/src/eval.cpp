#include "m2l2/eval.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "m2l2/codec.hpp"
#include "m2l2/fft.hpp"
#include "m2l2/rng.hpp"
#include "m2l2/thread_pool.hpp"

namespace m2l2 {

namespace {

constexpr double kSiSdrCap = 100.0;
constexpr double kPsdTolerance = 1e-8;

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

Vec<double> flatten(const Waveform& w) {
  Vec<double> v(w.samples.size());
  Index k = 0;
  for (Index c = 0; c < w.channels(); ++c)
    for (Index i = 0; i < w.length(); ++i) v[k++] = double(w.samples(c, i));
  return v;
}

// Mean power (or log-magnitude) spectrum of one window, Hann-framed at 50%
// overlap, rfft bins 0..n_fft/2.
Vec<double> window_spectrum(const float* x, long n, int n_fft, bool log_mag) {
  const Fft fft(static_cast<std::size_t>(n_fft));
  const int bins = n_fft / 2 + 1;
  Vec<double> acc = Vec<double>::Zero(bins);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
  std::vector<double> win(static_cast<std::size_t>(n_fft));
  for (int i = 0; i < n_fft; ++i)
    win[std::size_t(i)] =
        0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / n_fft);

  const long hop = n_fft / 2;
  const long frames = std::max(1L, (n - 1) / hop);  // zero-padded tail
  for (long f = 0; f < frames; ++f) {
    for (int i = 0; i < n_fft; ++i) {
      const long idx = f * hop + i;
      const double s = idx < n ? double(x[idx]) : 0.0;
      buf[std::size_t(i)] = s * win[std::size_t(i)];
    }
    fft.forward(buf.data());
    for (int b = 0; b < bins; ++b) {
      const double mag = std::abs(buf[std::size_t(b)]);
      acc[b] += log_mag ? std::log(mag + 1e-10) : mag * mag;
    }
  }
  return acc / double(frames);
}

// One embedding per one-second window (a single window covers short clips),
// channels averaged to mono first.
template <typename F>
std::vector<Vec<double>> per_window(const Waveform& w, int sample_rate, F&& fn) {
  check(w.length() >= 1, "embedder: empty waveform");
  Vec<float> mono(w.length());
  for (Index i = 0; i < w.length(); ++i) mono[i] = w.samples.col(i).mean();

  const long n = w.length();
  const long windows = std::max(1L, n / sample_rate);
  std::vector<Vec<double>> out;
  out.reserve(std::size_t(windows));
  for (long i = 0; i < windows; ++i) {
    const long begin = i * sample_rate;
    const long len = std::min<long>(sample_rate, n - begin);
    out.push_back(fn(mono.data() + begin, len));
  }
  return out;
}

}  // namespace

double si_sdr(const Vec<double>& estimate, const Vec<double>& reference) {
  check(estimate.size() == reference.size(), "si_sdr: length mismatch");
  check(estimate.size() > 0, "si_sdr: empty signals");
  const double ref_energy = reference.squaredNorm();
  check(ref_energy > 0.0, "si_sdr: reference is all zero");

  const double scale = estimate.dot(reference) / ref_energy;
  const Vec<double> target = scale * reference;
  const double target_energy = target.squaredNorm();
  const double residual_energy = (estimate - target).squaredNorm();
  if (target_energy == 0.0) return -kSiSdrCap;
  if (residual_energy == 0.0) return kSiSdrCap;
  const double db = 10.0 * std::log10(target_energy / residual_energy);
  return std::clamp(db, -kSiSdrCap, kSiSdrCap);
}

double si_sdr(const Waveform& estimate, const Waveform& reference) {
  check(estimate.channels() == reference.channels(),
        "si_sdr: channel count mismatch");
  return si_sdr(flatten(estimate), flatten(reference));
}

EmbeddingStats embedding_stats(const std::vector<Vec<double>>& embeddings) {
  check(embeddings.size() >= 2, "embedding_stats: need at least 2 embeddings");
  const Index d = embeddings[0].size();
  for (const Vec<double>& e : embeddings)
    check(e.size() == d, "embedding_stats: inconsistent dimensions");

  EmbeddingStats s;
  s.count = long(embeddings.size());
  s.mean = Vec<double>::Zero(d);
  for (const Vec<double>& e : embeddings) s.mean += e;
  s.mean /= double(s.count);
  s.cov = Mat<double>::Zero(d, d);
  for (const Vec<double>& e : embeddings) {
    const Vec<double> c = e - s.mean;
    s.cov += (c * c.transpose()).eval();
  }
  s.cov /= double(s.count - 1);
  return s;
}

namespace {

// Eigendecomposition with the spec'd tolerance: eigenvalues below
// -kPsdTolerance are an error, small negatives clamp to zero.
void psd_eigs(const Mat<double>& m, Mat<double>& vectors, Vec<double>& values,
              const char* what) {
  check((m - m.transpose()).cwiseAbs().maxCoeff() <= kPsdTolerance,
        std::string(what) + ": matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat<double>> es(
      Mat<double>(0.5 * (m + m.transpose())));
  check(es.info() == Eigen::Success, std::string(what) + ": eigensolver failed");
  values = es.eigenvalues();
  vectors = es.eigenvectors();
  for (Index i = 0; i < values.size(); ++i) {
    check(values[i] >= -kPsdTolerance,
          std::string(what) + ": covariance is not positive semi-definite");
    values[i] = std::max(values[i], 0.0);
  }
}

}  // namespace

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
  const Index d = a.mean.size();
  check(b.mean.size() == d && a.cov.rows() == d && a.cov.cols() == d &&
            b.cov.rows() == d && b.cov.cols() == d,
        "frechet_distance: dimension mismatch");

  Mat<double> ua, ub;
  Vec<double> la, lb;
  psd_eigs(a.cov, ua, la, "frechet_distance: first covariance");
  psd_eigs(b.cov, ub, lb, "frechet_distance: second covariance");

  // sqrt(S_a) S_b sqrt(S_a) shares its nonzero spectrum with S_a S_b and is
  // symmetric PSD, so the cross term is a sum of real square roots.
  const Mat<double> sqrt_a =
      ua * la.cwiseSqrt().asDiagonal() * ua.transpose();
  const Mat<double> inner = sqrt_a * b.cov * sqrt_a;
  Mat<double> ui;
  Vec<double> li;
  psd_eigs(inner, ui, li, "frechet_distance: cross term");

  const double fd = (a.mean - b.mean).squaredNorm() + a.cov.trace() +
                    b.cov.trace() - 2.0 * li.cwiseSqrt().sum();
  return std::max(fd, 0.0);
}

LogMelEmbedder::LogMelEmbedder(int sample_rate, int n_mels, int n_fft)
    : sample_rate_(sample_rate), n_mels_(n_mels), n_fft_(n_fft),
      id_("logmel" + std::to_string(n_mels)) {
  check(sample_rate >= 1 && n_mels >= 1 && n_fft >= 16,
        "logmel embedder: bad parameters");
  const int bins = n_fft / 2 + 1;
  filterbank_ = Mat<double>::Zero(n_mels, bins);
  const double mel_max = hz_to_mel(double(sample_rate) / 2.0);
  std::vector<double> edges(std::size_t(n_mels) + 2);
  for (int m = 0; m < n_mels + 2; ++m)
    edges[std::size_t(m)] =
        mel_to_hz(mel_max * double(m) / double(n_mels + 1));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[std::size_t(m)];
    const double mid = edges[std::size_t(m) + 1];
    const double hi = edges[std::size_t(m) + 2];
    for (int b = 0; b < bins; ++b) {
      const double f = double(b) * sample_rate / double(n_fft);
      double v = 0.0;
      if (f > lo && f < mid) v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) v = (hi - f) / (hi - mid);
      filterbank_(m, b) = v;
    }
  }
}

std::vector<Vec<double>> LogMelEmbedder::embed(const Waveform& w) const {
  return per_window(w, sample_rate_, [&](const float* x, long n) {
    const Vec<double> power = window_spectrum(x, n, n_fft_, false);
    return Vec<double>(((filterbank_ * power).array() + 1e-10).log().matrix());
  });
}

RandomProjectionEmbedder::RandomProjectionEmbedder(int sample_rate,
                                                   std::uint64_t seed, int dim,
                                                   int n_fft)
    : sample_rate_(sample_rate), dim_(dim), n_fft_(n_fft),
      id_("randproj" + std::to_string(dim) + "-" + std::to_string(seed)) {
  check(sample_rate >= 1 && dim >= 1 && n_fft >= 16,
        "random projection embedder: bad parameters");
  const int bins = n_fft / 2 + 1;
  Rng rng = Rng::stream(seed, 0xE4B, 0, 0);
  projection_ = randn<double>(rng, dim, bins, 1.0 / std::sqrt(double(bins)));
}

std::vector<Vec<double>> RandomProjectionEmbedder::embed(const Waveform& w) const {
  return per_window(w, sample_rate_, [&](const float* x, long n) {
    const Vec<double> logmag = window_spectrum(x, n, n_fft_, true);
    return Vec<double>(projection_ * logmag);
  });
}

namespace {

// Embedding extraction parallel across files, order-preserving.
std::vector<Vec<double>> embed_set(const std::vector<Waveform>& set,
                                   const Embedder& e) {
  std::vector<std::vector<Vec<double>>> per_file(set.size());
  ThreadPool pool(std::thread::hardware_concurrency());
  pool.parallel_for(set.size(),
                    [&](std::size_t i) { per_file[i] = e.embed(set[i]); });
  std::vector<Vec<double>> all;
  for (const auto& f : per_file)
    all.insert(all.end(), f.begin(), f.end());
  return all;
}

}  // namespace

std::vector<SweepRow> sigma_cond_sweep(
    AutoEncoder<float>& model, const std::vector<Waveform>& eval_set,
    const std::vector<double>& grid,
    const std::vector<const Embedder*>& embedders, std::uint64_t seed) {
  check(!grid.empty(), "sweep: empty grid");
  check(!eval_set.empty(), "sweep: empty evaluation set");
  check(!embedders.empty(), "sweep: no embedders");
  for (double s : grid)
    check(s >= 0.0 && s <= 1.0, "sweep: grid values must lie in [0, 1]");

  // Latents are sigma_cond-independent: encode once.
  std::vector<LatentSequence> latents;
  latents.reserve(eval_set.size());
  for (const Waveform& w : eval_set) latents.push_back(encode(model, w));

  std::vector<EmbeddingStats> reference;
  for (const Embedder* e : embedders)
    reference.push_back(embedding_stats(embed_set(eval_set, *e)));

  std::vector<SweepRow> rows;
  for (double sigma : grid) {
    std::vector<Waveform> recon;
    recon.reserve(eval_set.size());
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
      DecodeOptions opts;
      opts.sigma_cond = sigma;
      opts.seed = seed;
      recon.push_back(decode(model, latents[i], opts));
    }
    for (std::size_t e = 0; e < embedders.size(); ++e) {
      SweepRow row;
      row.sigma_cond = sigma;
      row.fd = frechet_distance(reference[e],
                                embedding_stats(embed_set(recon, *embedders[e])));
      row.embedder = embedders[e]->identifier();
      row.n_items = long(eval_set.size());
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  check(bool(out), "sweep: cannot open '" + path + "' for writing");
  out << "sigma_cond,fd,embedder,n_items\n";
  for (const SweepRow& r : rows)
    out << r.sigma_cond << ',' << r.fd << ',' << r.embedder << ',' << r.n_items
        << '\n';
  out.flush();
  check(bool(out), "sweep: write to '" + path + "' failed");
}

}  // namespace m2l2
