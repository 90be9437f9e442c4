#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "m2l2/rng.hpp"

namespace m2l2 {

// All tensors in this project are dense row-major matrices; rank-1 data is a
// column [n x 1] and scalars are [1 x 1]. Spatial/tensor axes beyond two are
// handled by convention (e.g. a feature map [C x F*T] with geometry carried
// alongside), which keeps every op an Eigen expression.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Deterministic fills. Values are drawn in row-major element order so the
// result is independent of Eigen's internal traversal.
template <typename S>
Mat<S> randn(Rng& rng, Index rows, Index cols, double stddev = 1.0) {
  Mat<S> m(rows, cols);
  S* p = m.data();
  for (Index i = 0; i < m.size(); ++i) p[i] = static_cast<S>(stddev * rng.normal());
  return m;
}

template <typename S>
Mat<S> rand_uniform(Rng& rng, Index rows, Index cols, double lo, double hi) {
  Mat<S> m(rows, cols);
  S* p = m.data();
  for (Index i = 0; i < m.size(); ++i) p[i] = static_cast<S>(rng.uniform(lo, hi));
  return m;
}

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace m2l2
