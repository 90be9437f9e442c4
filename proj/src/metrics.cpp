#include "m2l2/metrics.hpp"

#include "json.hpp"
#include "m2l2/tensor.hpp"

namespace m2l2 {

MetricsLogger::MetricsLogger(const std::string& path)
    : out_(path, std::ios::app) {
  check(bool(out_), "metrics: cannot open '" + path + "' for appending");
}

void MetricsLogger::log(long iteration, double loss, double lr,
                        long n_discretization, double wall_seconds) {
  nlohmann::json j = {{"iteration", iteration},
                      {"loss", loss},
                      {"lr", lr},
                      {"n", n_discretization},
                      {"wall_seconds", wall_seconds}};
  out_ << j.dump() << "\n";
  out_.flush();
}

}  // namespace m2l2
