#include "m2l2/spectral.hpp"

#include <cmath>
#include <complex>
#include <vector>

#include "m2l2/fft.hpp"

namespace m2l2 {

namespace {

std::vector<double> hann_window(int n) {
  // Periodic Hann: constant-overlap-add friendly at hop = n/4.
  std::vector<double> w(static_cast<std::size_t>(n));
  const double two_pi = 6.283185307179586476925286766559;
  for (int i = 0; i < n; ++i)
    w[std::size_t(i)] = 0.5 * (1.0 - std::cos(two_pi * double(i) / double(n)));
  return w;
}

void validate(const SpectralConfig& cfg) {
  check(cfg.window == "hann", "spectral: window must be 'hann'");
  check(cfg.n_fft >= 8 && (cfg.n_fft & (cfg.n_fft - 1)) == 0,
        "spectral: n_fft must be a power of two");
  check(cfg.hop > 0 && cfg.hop <= cfg.n_fft, "spectral: hop must be in (0, n_fft]");
  check(cfg.spec_length >= 1, "spectral: spec_length must be >= 1");
  check(cfg.audio_channels == 1 || cfg.audio_channels == 2,
        "spectral: 1 or 2 audio channels");
}

}  // namespace

long padded_frames(long samples, const SpectralConfig& cfg) {
  check(samples > 0, "spectral: non-positive waveform length");
  long frames = samples <= cfg.n_fft
                    ? 1
                    : (samples - cfg.n_fft + cfg.hop - 1) / cfg.hop + 1;
  const long m = cfg.spec_length;
  return ((frames + m - 1) / m) * m;
}

long padded_samples(long samples, const SpectralConfig& cfg) {
  return long(cfg.n_fft) + (padded_frames(samples, cfg) - 1) * cfg.hop;
}

Spectrogram stft(const Waveform& w, const SpectralConfig& cfg) {
  validate(cfg);
  check(w.length() > 0, "stft: empty waveform");
  check(w.sample_rate == cfg.sample_rate,
        "stft: sample rate " + std::to_string(w.sample_rate) +
            " does not match configured " + std::to_string(cfg.sample_rate));
  check(int(w.channels()) == cfg.audio_channels,
        "stft: waveform has " + std::to_string(w.channels()) +
            " channels, config expects " + std::to_string(cfg.audio_channels));

  const int F = cfg.freq_bins();
  const long frames = padded_frames(w.length(), cfg);
  const long n_chunks = frames / cfg.spec_length;
  const long padded = padded_samples(w.length(), cfg);

  Spectrogram s;
  s.compressed = false;
  s.sample_rate = cfg.sample_rate;
  s.audio_channels = cfg.audio_channels;
  s.original_length = w.length();
  s.chunks.assign(std::size_t(n_chunks),
                  Mat<float>::Zero(2 * cfg.audio_channels, cfg.chunk_cols()));

  const auto win = hann_window(cfg.n_fft);
  Fft fft(std::size_t(cfg.n_fft));
  std::vector<std::complex<double>> buf(std::size_t(cfg.n_fft));

  for (int ch = 0; ch < cfg.audio_channels; ++ch) {
    for (long m = 0; m < frames; ++m) {
      const long start = m * cfg.hop;
      for (int i = 0; i < cfg.n_fft; ++i) {
        const long idx = start + i;
        const double v = (idx < w.length() && idx < padded)
                             ? double(w.samples(ch, idx))
                             : 0.0;
        buf[std::size_t(i)] = {v * win[std::size_t(i)], 0.0};
      }
      fft.forward(buf.data());
      Mat<float>& chunk = s.chunks[std::size_t(m / cfg.spec_length)];
      const long tau = m % cfg.spec_length;
      for (int k = 0; k < F; ++k) {  // Nyquist bin (k = F) dropped
        chunk(2 * ch, tau * F + k) = float(buf[std::size_t(k)].real());
        chunk(2 * ch + 1, tau * F + k) = float(buf[std::size_t(k)].imag());
      }
    }
  }
  return s;
}

Waveform istft(const Spectrogram& s, const SpectralConfig& cfg) {
  validate(cfg);
  check(!s.compressed, "istft: chunks are amplitude-compressed; expand first");
  check(!s.chunks.empty(), "istft: no chunks");
  const int F = cfg.freq_bins();
  for (const auto& c : s.chunks)
    check(c.rows() == 2 * cfg.audio_channels && c.cols() == cfg.chunk_cols(),
          "istft: chunk shape mismatch");

  const long frames = long(s.chunks.size()) * cfg.spec_length;
  const long out_len = long(cfg.n_fft) + (frames - 1) * cfg.hop;

  Waveform w;
  w.sample_rate = s.sample_rate > 0 ? s.sample_rate : cfg.sample_rate;
  w.samples = Mat<float>::Zero(cfg.audio_channels, out_len);

  const auto win = hann_window(cfg.n_fft);
  Fft fft(std::size_t(cfg.n_fft));
  std::vector<std::complex<double>> buf(std::size_t(cfg.n_fft));
  std::vector<double> acc(static_cast<std::size_t>(out_len));
  std::vector<double> norm(static_cast<std::size_t>(out_len));

  for (int ch = 0; ch < cfg.audio_channels; ++ch) {
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(norm.begin(), norm.end(), 0.0);
    for (long m = 0; m < frames; ++m) {
      const Mat<float>& chunk = s.chunks[std::size_t(m / cfg.spec_length)];
      const long tau = m % cfg.spec_length;
      buf[0] = {double(chunk(2 * ch, tau * F + 0)),
                double(chunk(2 * ch + 1, tau * F + 0))};
      for (int k = 1; k < F; ++k) {
        std::complex<double> v(double(chunk(2 * ch, tau * F + k)),
                               double(chunk(2 * ch + 1, tau * F + k)));
        buf[std::size_t(k)] = v;
        buf[std::size_t(cfg.n_fft - k)] = std::conj(v);
      }
      buf[std::size_t(F)] = 0.0;  // dropped Nyquist bin reinserted as zero
      fft.inverse(buf.data());
      const long start = m * cfg.hop;
      for (int i = 0; i < cfg.n_fft; ++i) {
        const double wv = win[std::size_t(i)];
        acc[std::size_t(start + i)] += buf[std::size_t(i)].real() * wv;
        norm[std::size_t(start + i)] += wv * wv;
      }
    }
    for (long i = 0; i < out_len; ++i) {
      const double n = norm[std::size_t(i)];
      w.samples(ch, i) = n > 1e-12 ? float(acc[std::size_t(i)] / n) : 0.0f;
    }
  }

  if (s.original_length > 0 && s.original_length < out_len)
    w.samples = w.samples.leftCols(s.original_length).eval();
  return w;
}

void amplitude_compress(Spectrogram& s, const SpectralConfig& cfg) {
  validate(cfg);
  check(cfg.alpha > 0 && cfg.beta > 0, "spectral: alpha/beta must be positive");
  check(!s.compressed, "amplitude_compress: already compressed");
  for (auto& chunk : s.chunks) {
    for (Index r = 0; r < chunk.rows(); r += 2) {
      for (Index j = 0; j < chunk.cols(); ++j) {
        const double re = chunk(r, j), im = chunk(r + 1, j);
        const double mag = std::hypot(re, im);
        if (mag > 0) {
          const double g = cfg.beta * std::pow(mag, cfg.alpha) / mag;
          chunk(r, j) = float(re * g);
          chunk(r + 1, j) = float(im * g);
        }
      }
    }
  }
  s.compressed = true;
}

void amplitude_expand(Spectrogram& s, const SpectralConfig& cfg) {
  validate(cfg);
  check(cfg.alpha > 0 && cfg.beta > 0, "spectral: alpha/beta must be positive");
  check(s.compressed, "amplitude_expand: chunks are not compressed");
  for (auto& chunk : s.chunks) {
    for (Index r = 0; r < chunk.rows(); r += 2) {
      for (Index j = 0; j < chunk.cols(); ++j) {
        const double re = chunk(r, j), im = chunk(r + 1, j);
        const double mag = std::hypot(re, im);
        if (mag > 0) {
          const double g = std::pow(mag / cfg.beta, 1.0 / cfg.alpha) / mag;
          chunk(r, j) = float(re * g);
          chunk(r + 1, j) = float(im * g);
        }
      }
    }
  }
  s.compressed = false;
}

}  // namespace m2l2
