#include "m2l2/codec.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <thread>

#include "json.hpp"
#include "m2l2/eval.hpp"
#include "m2l2/thread_pool.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need swaps");

namespace m2l2 {

namespace {

constexpr char kLatentMagic[4] = {'M', '2', 'L', '2'};
constexpr std::uint16_t kLatentVersion = 1;

void validate_latents(const ModelConfig& cfg, const LatentSequence& l) {
  check(!l.latents.empty(), "latents: empty sequence");
  for (const Mat<float>& lat : l.latents) {
    check(lat.rows() == cfg.K && lat.cols() == cfg.d_lat,
          "latents: chunk shape does not match the model's [K x d_lat]");
    check(all_finite(lat) && lat.cwiseAbs().maxCoeff() < 1.0f,
          "latents: values must lie in (-1, 1)");
  }
}

}  // namespace

LatentSequence encode(AutoEncoder<float>& model, const Waveform& w,
                      int threads) {
  const ModelConfig& cfg = model.cfg;
  check(w.length() >= 1, "encode: empty input");
  check(w.sample_rate == cfg.sample_rate,
        "encode: sample rate " + std::to_string(w.sample_rate) +
            " does not match the configured " +
            std::to_string(cfg.sample_rate));
  check(int(w.channels()) == cfg.audio_channels(),
        "encode: channel count " + std::to_string(w.channels()) +
            " does not match the configured " +
            std::to_string(cfg.audio_channels()));

  const SpectralConfig sc = SpectralConfig::from(cfg);
  Spectrogram s = stft(w, sc);
  amplitude_compress(s, sc);

  LatentSequence out;
  out.latents.resize(std::size_t(s.num_chunks()));
  out.sample_rate = w.sample_rate;
  out.original_length = w.length();
  out.channels = cfg.audio_channels();
  out.fingerprint = config_fingerprint(cfg);

  if (threads <= 0) threads = int(std::thread::hardware_concurrency());
  ThreadPool pool(std::size_t(threads > 0 ? threads : 1));
  pool.parallel_for(out.latents.size(), [&](std::size_t t) {
    ag::Tape<float> tape(false);
    out.latents[t] =
        model.enc.encode_chunk(tape, ag::constant<float>(s.chunks[t])).val();
  });
  return out;
}

Spectrogram decode_spectrogram(AutoEncoder<float>& model,
                               const LatentSequence& l,
                               const DecodeOptions& opts, DecodeStats* stats) {
  const ModelConfig& cfg = model.cfg;
  const ConsistencyParams& cp = model.cp;
  check(l.fingerprint == config_fingerprint(cfg),
        "decode: latent fingerprint " + l.fingerprint +
            " does not match the model config (" + config_fingerprint(cfg) +
            ")");
  check(opts.sigma_cond >= 0.0 && opts.sigma_cond <= cp.sigma_max,
        "decode: sigma_cond must be in [0, sigma_max]");
  validate_latents(cfg, l);

  const Index rows = cfg.spec_channels();
  const Index cols = Index(cfg.spec_length) * cfg.freq_bins();
  const std::size_t T = l.chunks();
  const std::uint64_t evals_before = model.cm_evals;

  // Cross-connections are materialized lazily and dropped once their chunk's
  // refinement pass is done, so at most two chunks' features are ever alive.
  std::map<std::size_t, std::vector<ag::Var<float>>> cross;
  std::size_t max_live = 0;
  auto cross_for = [&](std::size_t t) -> const std::vector<ag::Var<float>>& {
    auto it = cross.find(t);
    if (it == cross.end()) {
      ag::Tape<float> tape(false);
      it = cross
               .emplace(t, model.dec.features(
                               tape, ag::constant<float>(l.latents[t])))
               .first;
      max_live = std::max(max_live, cross.size());
    }
    return it->second;
  };
  auto noise = [&](std::size_t t, std::uint64_t purpose) {
    Rng rng = Rng::stream(opts.seed, t, purpose);
    return randn<float>(rng, rows, cols);
  };

  std::vector<Mat<float>> done(T);
  Mat<float> current;  // newest chunk, pending its refinement pass
  {
    ag::Tape<float> tape(false);
    const Mat<float> start = float(cp.sigma_max) * noise(0, 0);
    auto out = model.consistency_forward(tape, {ag::constant<float>(start)},
                                         {cp.sigma_max}, {cross_for(0)});
    current = out[0].val();
  }
  for (std::size_t t = 1; t < T; ++t) {
    if (t >= 2) cross.erase(t - 2);

    // sigma_cond = 0 conditions on the clean previous chunk: the noise level
    // clamps to sigma_min (where the boundary condition returns the input
    // unchanged) and no noise is added.
    const double sigma_prev = std::max(opts.sigma_cond, cp.sigma_min);
    Mat<float> prev = current;
    if (opts.sigma_cond > 0.0) prev += float(sigma_prev) * noise(t, 1);
    const Mat<float> start = float(cp.sigma_max) * noise(t, 0);

    ag::Tape<float> tape(false);
    auto out = model.consistency_forward(
        tape, {ag::constant<float>(prev), ag::constant<float>(start)},
        {sigma_prev, cp.sigma_max}, {cross_for(t - 1), cross_for(t)});
    done[t - 1] = out[0].val();  // refined version replaces the prior one
    current = out[1].val();
  }
  done[T - 1] = current;  // the last chunk has no refinement pass

  if (stats) {
    stats->cm_evals = model.cm_evals - evals_before;
    stats->max_live_cross_sets = max_live;
  }

  Spectrogram s;
  s.chunks = std::move(done);
  s.compressed = true;
  s.sample_rate = l.sample_rate;
  s.audio_channels = l.channels;
  s.original_length = l.original_length;
  return s;
}

Waveform decode(AutoEncoder<float>& model, const LatentSequence& l,
                const DecodeOptions& opts, DecodeStats* stats) {
  Spectrogram s = decode_spectrogram(model, l, opts, stats);
  const SpectralConfig sc = SpectralConfig::from(model.cfg);
  amplitude_expand(s, sc);
  return istft(s, sc);
}

RoundtripResult roundtrip(AutoEncoder<float>& model, const Waveform& w,
                          const DecodeOptions& opts) {
  LatentSequence l = encode(model, w);
  RoundtripResult r;
  r.output = decode(model, l, opts);
  r.si_sdr_db = si_sdr(r.output, w);
  r.input_samples = w.length();
  r.output_samples = r.output.length();
  r.chunks = l.chunks();
  r.sigma_cond = opts.sigma_cond;
  return r;
}

void save_latents(const std::string& path, const LatentSequence& l) {
  check(!l.latents.empty(), "latents: nothing to save");
  const Index K = l.latents[0].rows();
  const Index d = l.latents[0].cols();
  for (const Mat<float>& lat : l.latents)
    check(lat.rows() == K && lat.cols() == d,
          "latents: inconsistent chunk shapes");

  nlohmann::json header = {
      {"shape", {l.latents.size(), K, d}},
      {"sample_rate", l.sample_rate},
      {"original_length", l.original_length},
      {"channels", l.channels},
      {"fingerprint", l.fingerprint},
  };
  if (l.sigma_cond >= 0.0) header["sigma_cond"] = l.sigma_cond;
  const std::string h = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(bool(out), "latents: cannot open '" + path + "' for writing");
  out.write(kLatentMagic, 4);
  const std::uint16_t version = kLatentVersion;
  out.write(reinterpret_cast<const char*>(&version), 2);
  const std::uint32_t hlen = std::uint32_t(h.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(h.data(), std::streamsize(h.size()));
  for (const Mat<float>& lat : l.latents)
    out.write(reinterpret_cast<const char*>(lat.data()),
              std::streamsize(std::size_t(lat.size()) * sizeof(float)));
  out.flush();
  check(bool(out), "latents: write to '" + path + "' failed");
}

LatentSequence load_latents(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(bool(in), "latents: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  check(bytes.size() >= 10 && std::memcmp(bytes.data(), kLatentMagic, 4) == 0,
        "latents: '" + path + "' is not a latent file");
  std::uint16_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 2);
  check(version == kLatentVersion,
        "latents: unsupported format version " + std::to_string(version));
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 6, 4);
  check(bytes.size() >= 10 + std::size_t(hlen),
        "latents: truncated header in '" + path + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(10, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error("latents: bad header in '" + path + "': " + e.what());
  }

  LatentSequence l;
  try {
    const auto shape = header.at("shape");
    check(shape.size() == 3, "latents: shape must be [T, K, d_lat]");
    const std::size_t T = shape[0].get<std::size_t>();
    const Index K = shape[1].get<Index>();
    const Index d = shape[2].get<Index>();
    check(T >= 1 && K >= 1 && d >= 1, "latents: degenerate shape");
    l.sample_rate = header.at("sample_rate").get<int>();
    l.original_length = header.at("original_length").get<long>();
    l.channels = header.at("channels").get<int>();
    l.fingerprint = header.at("fingerprint").get<std::string>();
    if (header.contains("sigma_cond"))
      l.sigma_cond = header["sigma_cond"].get<double>();

    const std::size_t per_chunk = std::size_t(K) * std::size_t(d);
    const std::size_t expect = 10 + hlen + T * per_chunk * sizeof(float);
    check(bytes.size() >= expect, "latents: truncated payload in '" + path + "'");
    check(bytes.size() == expect, "latents: trailing bytes in '" + path + "'");

    const char* p = bytes.data() + 10 + hlen;
    l.latents.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      Mat<float> lat(K, d);
      std::memcpy(lat.data(), p, per_chunk * sizeof(float));
      p += per_chunk * sizeof(float);
      check(all_finite(lat), "latents: non-finite values in '" + path + "'");
      l.latents.push_back(std::move(lat));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("latents: bad header in '" + path + "': " + e.what());
  }
  return l;
}

}  // namespace m2l2
