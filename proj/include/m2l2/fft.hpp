#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "m2l2/tensor.hpp"

namespace m2l2 {

// Iterative radix-2 complex FFT with cached twiddles. Sizes must be powers of
// two. Transforms run in double regardless of the surrounding precision so
// spectral errors stay far below the frontend's tolerances.
class Fft {
public:
  explicit Fft(std::size_t n) : n_(n) {
    check(n >= 2 && (n & (n - 1)) == 0, "fft: size must be a power of two >= 2");
    tw_.resize(n / 2);
    const double base = -2.0 * 3.14159265358979323846 / double(n);
    for (std::size_t k = 0; k < n / 2; ++k)
      tw_[k] = std::polar(1.0, base * double(k));
    rev_.resize(n);
    std::size_t bits = 0;
    while ((std::size_t(1) << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t(1) << b)) r |= std::size_t(1) << (bits - 1 - b);
      rev_[i] = r;
    }
  }

  std::size_t size() const { return n_; }

  void forward(std::complex<double>* a) const { run(a, false); }
  void inverse(std::complex<double>* a) const { run(a, true); }  // includes 1/n

private:
  void run(std::complex<double>* a, bool inv) const {
    for (std::size_t i = 0; i < n_; ++i)
      if (rev_[i] > i) std::swap(a[i], a[rev_[i]]);
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t step = n_ / len;
      for (std::size_t i = 0; i < n_; i += len) {
        for (std::size_t j = 0; j < len / 2; ++j) {
          std::complex<double> w = tw_[j * step];
          if (inv) w = std::conj(w);
          std::complex<double> u = a[i + j];
          std::complex<double> v = a[i + j + len / 2] * w;
          a[i + j] = u + v;
          a[i + j + len / 2] = u - v;
        }
      }
    }
    if (inv)
      for (std::size_t i = 0; i < n_; ++i) a[i] /= double(n_);
  }

  std::size_t n_;
  std::vector<std::complex<double>> tw_;
  std::vector<std::size_t> rev_;
};

}  // namespace m2l2
