#pragma once

#include <fstream>
#include <string>

namespace m2l2 {

// Appends one JSON object per line (iteration, loss, lr, N(k), wall seconds).
class MetricsLogger {
public:
  explicit MetricsLogger(const std::string& path);

  void log(long iteration, double loss, double lr, long n_discretization,
           double wall_seconds);

private:
  std::ofstream out_;
};

}  // namespace m2l2
