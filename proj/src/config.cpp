#include "m2l2/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace m2l2 {

using nlohmann::json;

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

static bool power_of_two(long v) { return v > 0 && (v & (v - 1)) == 0; }

void ModelConfig::validate() const {
  check(sample_rate > 0, "config: sample_rate must be positive");
  check(power_of_two(n_fft) && n_fft >= 8, "config: n_fft must be a power of two >= 8");
  check(hop > 0 && hop <= n_fft, "config: hop must be in (0, n_fft]");
  check(window == "hann", "config: window must be 'hann'");
  check(alpha > 0, "config: alpha must be positive");
  check(beta > 0, "config: beta must be positive");
  check(spec_length >= 1, "config: spec_length must be >= 1");

  check(levels >= 1, "config: levels must be >= 1");
  check(int(layers.size()) == levels + 1, "config: layers must have levels+1 entries");
  check(int(channels.size()) == levels + 1, "config: channels must have levels+1 entries");
  for (int l : layers) check(l >= 1, "config: layers entries must be >= 1");
  for (int c : channels)
    check(c >= 8 && c % 8 == 0, "config: channels entries must be positive multiples of 8");
  check(spec_length % (1 << levels) == 0, "config: spec_length must be divisible by 2^levels");
  check(freq_bins() % (1 << levels) == 0, "config: n_fft/2 must be divisible by 2^levels");
  check(channels.back() == dim, "config: channels must end at dim");
  check(dim >= 1 && heads >= 1 && dim % heads == 0, "config: dim must be divisible by heads");
  check(mlp_mult >= 1, "config: mlp_mult must be >= 1");
  check(n_transformer_blocks >= 1, "config: n_transformer_blocks must be >= 1");
  check(K >= 1, "config: K must be >= 1");
  check(d_lat >= 1, "config: d_lat must be >= 1");
  if (variant == LatentVariant::ordered)
    check(latent_values_per_chunk() % tokens_per_chunk() == 0,
          "config: latent budget K*d_lat must be divisible by token count for the ordered variant");

  check(sigma_min > 0 && sigma_min < sigma_max, "config: need 0 < sigma_min < sigma_max");
  check(sigma_data > 0, "config: sigma_data must be positive");
  check(rho >= 1, "config: rho must be >= 1");
  check(c_factor > 0, "config: c_factor must be positive");
  check(s0 > 1 && s0 <= s1, "config: need 1 < s0 <= s1");
  check(lognormal_std > 0, "config: lognormal_std must be positive");

  check(lr0 > 0 && lr_final > 0 && lr_final <= lr0, "config: need lr0 >= lr_final > 0");
  check(beta1 >= 0 && beta1 < 1, "config: beta1 must be in [0,1)");
  check(beta2 >= 0 && beta2 < 1, "config: beta2 must be in [0,1)");
  check(ema_momentum >= 0 && ema_momentum < 1, "config: ema_momentum must be in [0,1)");
  check(batch >= 1, "config: batch must be >= 1");
  check(total_iterations >= 1, "config: total_iterations must be >= 1");

  check(sigma_cond >= 0 && sigma_cond <= sigma_max,
        "config: sigma_cond must be in [0, sigma_max]");
}

ModelConfig paper_preset() { return ModelConfig{}; }

ModelConfig toy_preset() {
  ModelConfig c;
  c.sample_rate = 8000;
  c.n_fft = 128;
  c.hop = 32;
  c.spec_length = 16;
  c.levels = 3;
  c.layers = {1, 1, 1, 1};
  c.channels = {32, 64, 64, 64};
  c.dim = 64;
  c.heads = 4;
  c.n_transformer_blocks = 2;
  c.K = 4;
  c.d_lat = 16;
  c.lr0 = 3e-4;
  c.lr_final = 1e-5;
  c.ema_momentum = 0.99;
  c.batch = 4;
  c.total_iterations = 2000;
  return c;
}

static std::string variant_name(LatentVariant v) {
  return v == LatentVariant::summary ? "summary" : "ordered";
}

static LatentVariant variant_from(const std::string& s) {
  if (s == "summary") return LatentVariant::summary;
  if (s == "ordered") return LatentVariant::ordered;
  throw Error("config: variant must be 'summary' or 'ordered', got '" + s + "'");
}

static std::string dist_name(NoiseDist d) {
  return d == NoiseDist::uniform ? "uniform" : "lognormal";
}

static NoiseDist dist_from(const std::string& s) {
  if (s == "uniform") return NoiseDist::uniform;
  if (s == "lognormal") return NoiseDist::lognormal;
  throw Error("config: noise_dist must be 'uniform' or 'lognormal', got '" + s + "'");
}

static json config_to_tree(const ModelConfig& c) {
  json j;
  j["spectral"] = {{"sample_rate", c.sample_rate}, {"n_fft", c.n_fft},
                   {"hop", c.hop},                 {"window", c.window},
                   {"alpha", c.alpha},             {"beta", c.beta},
                   {"spec_length", c.spec_length}};
  j["architecture"] = {{"levels", c.levels},
                       {"layers", c.layers},
                       {"channels", c.channels},
                       {"dim", c.dim},
                       {"heads", c.heads},
                       {"mlp_mult", c.mlp_mult},
                       {"n_transformer_blocks", c.n_transformer_blocks},
                       {"K", c.K},
                       {"d_lat", c.d_lat},
                       {"variant", variant_name(c.variant)},
                       {"stereo", c.stereo}};
  j["consistency"] = {{"sigma_min", c.sigma_min},
                      {"sigma_max", c.sigma_max},
                      {"sigma_data", c.sigma_data},
                      {"rho", c.rho},
                      {"c_factor", c.c_factor},
                      {"s0", c.s0},
                      {"s1", c.s1},
                      {"use_c_in", c.use_c_in},
                      {"noise_dist", dist_name(c.noise_dist)},
                      {"lognormal_mean", c.lognormal_mean},
                      {"lognormal_std", c.lognormal_std}};
  j["training"] = {{"lr0", c.lr0},
                   {"lr_final", c.lr_final},
                   {"beta1", c.beta1},
                   {"beta2", c.beta2},
                   {"ema_momentum", c.ema_momentum},
                   {"batch", c.batch},
                   {"total_iterations", c.total_iterations},
                   {"seed", c.seed}};
  j["decode"] = {{"sigma_cond", c.sigma_cond}};
  return j;
}

template <typename T>
static void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

static ModelConfig config_from_tree(const json& j, ModelConfig base) {
  ModelConfig c = base;
  if (j.contains("spectral")) {
    const auto& s = j.at("spectral");
    maybe(s, "sample_rate", c.sample_rate);
    maybe(s, "n_fft", c.n_fft);
    maybe(s, "hop", c.hop);
    maybe(s, "window", c.window);
    maybe(s, "alpha", c.alpha);
    maybe(s, "beta", c.beta);
    maybe(s, "spec_length", c.spec_length);
  }
  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    maybe(a, "levels", c.levels);
    maybe(a, "layers", c.layers);
    maybe(a, "channels", c.channels);
    maybe(a, "dim", c.dim);
    maybe(a, "heads", c.heads);
    maybe(a, "mlp_mult", c.mlp_mult);
    maybe(a, "n_transformer_blocks", c.n_transformer_blocks);
    maybe(a, "K", c.K);
    maybe(a, "d_lat", c.d_lat);
    if (a.contains("variant")) c.variant = variant_from(a.at("variant").get<std::string>());
    maybe(a, "stereo", c.stereo);
  }
  if (j.contains("consistency")) {
    const auto& k = j.at("consistency");
    maybe(k, "sigma_min", c.sigma_min);
    maybe(k, "sigma_max", c.sigma_max);
    maybe(k, "sigma_data", c.sigma_data);
    maybe(k, "rho", c.rho);
    maybe(k, "c_factor", c.c_factor);
    maybe(k, "s0", c.s0);
    maybe(k, "s1", c.s1);
    maybe(k, "use_c_in", c.use_c_in);
    if (k.contains("noise_dist")) c.noise_dist = dist_from(k.at("noise_dist").get<std::string>());
    maybe(k, "lognormal_mean", c.lognormal_mean);
    maybe(k, "lognormal_std", c.lognormal_std);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    maybe(t, "lr0", c.lr0);
    maybe(t, "lr_final", c.lr_final);
    maybe(t, "beta1", c.beta1);
    maybe(t, "beta2", c.beta2);
    maybe(t, "ema_momentum", c.ema_momentum);
    maybe(t, "batch", c.batch);
    maybe(t, "total_iterations", c.total_iterations);
    maybe(t, "seed", c.seed);
  }
  if (j.contains("decode")) {
    maybe(j.at("decode"), "sigma_cond", c.sigma_cond);
  }
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  return config_to_tree(c).dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig base;  // paper defaults
  if (j.contains("preset")) {
    std::string p = j.at("preset").get<std::string>();
    if (p == "paper") base = paper_preset();
    else if (p == "toy") base = toy_preset();
    else throw Error("config: unknown preset '" + p + "'");
  }
  ModelConfig c = config_from_tree(j, base);
  c.validate();
  return c;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_fingerprint(const ModelConfig& c) {
  // dump() without indentation and with nlohmann's sorted object keys is the
  // canonical form.
  std::string s = config_to_tree(c).dump();
  std::uint64_t h = fnv1a64(s.data(), s.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 16);
}

}  // namespace m2l2
