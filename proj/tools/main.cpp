#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "m2l2/checkpoint.hpp"
#include "m2l2/codec.hpp"
#include "m2l2/dataset.hpp"
#include "m2l2/eval.hpp"
#include "m2l2/metrics.hpp"

namespace fs = std::filesystem;
using namespace m2l2;
using json = nlohmann::json;

namespace {

// Seed precedence: --seed flag, then the M2L2_SEED environment variable,
// then whatever the config or checkpoint carries.
std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("M2L2_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0')
    throw Error(std::string("M2L2_SEED is not an integer: '") + s + "'");
  return std::uint64_t(v);
}

std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  return flag ? flag : env_seed();
}

std::unique_ptr<TrainState<float>> load_for_inference(const std::string& ckpt) {
  auto st = load_checkpoint(ckpt);
  st->swap_ema_into_model();  // sample with the averaged weights
  return st;
}

// Eval clips don't need to be a full training segment long, so this is
// looser than Dataset::load: any readable WAV at the right rate and channel
// count qualifies.
std::vector<Waveform> load_eval_set(const std::string& root, const ModelConfig& cfg) {
  std::vector<fs::path> paths;
  if (fs::is_directory(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().extension() == ".wav")
        paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
  } else {
    paths.emplace_back(root);
  }
  std::vector<Waveform> set;
  for (const auto& p : paths) {
    try {
      Waveform w = load_wav(p.string());
      if (w.sample_rate != cfg.sample_rate)
        throw Error("sample rate " + std::to_string(w.sample_rate));
      if (w.channels() == 2 && cfg.audio_channels() == 1) {
        Waveform mono;
        mono.sample_rate = w.sample_rate;
        mono.samples = 0.5f * (w.samples.row(0) + w.samples.row(1));
        w = std::move(mono);
      }
      if (w.channels() != cfg.audio_channels())
        throw Error(std::to_string(w.channels()) + " channels");
      set.push_back(std::move(w));
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << p.string() << " (" << e.what() << ")\n";
    }
  }
  if (set.empty()) throw Error("no usable eval clips under '" + root + "'");
  return set;
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  long ckpt_every = 500;
};

// Runs the remaining iterations of `st`, logging metrics and writing the
// checkpoint periodically. The next batch is prefetched on a worker thread
// while the current one is stepped; batches are keyed by iteration, so the
// overlap cannot perturb determinism. Returns the mean loss over the last
// tenth of the schedule.
double train_loop(TrainState<float>& st, const Dataset& ds, MetricsLogger& log,
                  const std::string& ckpt_path, long ckpt_every,
                  const std::string& label) {
  const long total = st.model.cfg.total_iterations;
  const long tail_start = total - std::max<long>(1, total / 10);
  double tail_sum = 0.0;
  long tail_n = 0;
  const auto t0 = std::chrono::steady_clock::now();
  auto fetch = [&ds](long it) { return ds.sample_batch(it); };
  auto next = std::async(std::launch::async, fetch, st.iteration);
  while (st.iteration < total) {
    std::vector<ChunkPair<float>> batch = next.get();
    if (st.iteration + 1 < total)
      next = std::async(std::launch::async, fetch, st.iteration + 1);
    const StepInfo info = train_step(st, batch);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.log(info.iteration, info.loss, info.lr, info.n_discretization, wall);
    if (info.iteration >= tail_start) {
      tail_sum += info.loss;
      ++tail_n;
    }
    if (info.iteration % 50 == 0 || info.iteration + 1 == total)
      std::cout << label << "iter " << info.iteration << "/" << total
                << "  loss " << info.loss << "  lr " << info.lr << "  N "
                << info.n_discretization << "\n"
                << std::flush;
    if (ckpt_every > 0 && (info.iteration + 1) % ckpt_every == 0)
      save_checkpoint(ckpt_path, st);
  }
  save_checkpoint(ckpt_path, st);
  return tail_n > 0 ? tail_sum / double(tail_n) : 0.0;
}

int run_train(const TrainArgs& a) {
  ModelConfig cfg = load_config_file(a.config);
  if (auto s = resolve_seed(a.seed)) cfg.seed = *s;
  cfg.validate();

  std::unique_ptr<TrainState<float>> st;
  if (!a.resume.empty()) {
    st = load_checkpoint(a.resume);
    if (config_fingerprint(st->model.cfg) != config_fingerprint(cfg))
      throw Error("train: checkpoint config " + config_fingerprint(st->model.cfg) +
                  " does not match --config " + config_fingerprint(cfg));
    std::cout << "resuming from iteration " << st->iteration << "\n";
  } else {
    st = std::make_unique<TrainState<float>>(cfg);
  }
  if (st->iteration >= cfg.total_iterations) {
    std::cout << "schedule already complete (" << st->iteration << " iterations)\n";
    return 0;
  }

  const Dataset ds = Dataset::load(a.data, cfg);
  std::cout << "training on " << ds.size() << " clips\n";
  fs::create_directories(a.out);
  const std::string ckpt_path = (fs::path(a.out) / "checkpoint.ckpt").string();
  MetricsLogger log((fs::path(a.out) / "metrics.ndjson").string());
  const double tail = train_loop(*st, ds, log, ckpt_path, a.ckpt_every, "");
  std::cout << "done; mean loss over last tenth " << tail << "\nsaved "
            << ckpt_path << "\n";
  return 0;
}

struct CodecArgs {
  std::string ckpt, in, out;
  double sigma_cond = 0.4;
  bool sigma_cond_given = false;
  std::optional<std::uint64_t> seed;
};

int run_encode(const CodecArgs& a) {
  auto st = load_for_inference(a.ckpt);
  const Waveform w = load_wav(a.in);
  const LatentSequence l = encode(st->model, w);
  save_latents(a.out, l);
  std::cout << "encoded " << w.length() << " samples into " << l.chunks()
            << " chunks of [" << st->model.cfg.K << " x " << st->model.cfg.d_lat
            << "] -> " << a.out << "\n";
  return 0;
}

int run_decode(const CodecArgs& a) {
  auto st = load_for_inference(a.ckpt);
  const LatentSequence l = load_latents(a.in);
  DecodeOptions opts;
  // Flag wins; otherwise an annotation stored in the latent file; otherwise
  // the default conditioning level of 0.4.
  if (a.sigma_cond_given) opts.sigma_cond = a.sigma_cond;
  else if (l.sigma_cond >= 0.0) opts.sigma_cond = l.sigma_cond;
  if (auto s = resolve_seed(a.seed)) opts.seed = *s;
  DecodeStats stats;
  const Waveform w = decode(st->model, l, opts, &stats);
  save_wav(a.out, w);
  std::cout << "decoded " << l.chunks() << " chunks (" << stats.cm_evals
            << " model evaluations, sigma_cond " << opts.sigma_cond << ") into "
            << w.length() << " samples -> " << a.out << "\n";
  return 0;
}

struct RoundtripArgs {
  std::string ckpt, in, out, metrics;
  double sigma_cond = 0.4;
  std::optional<std::uint64_t> seed;
};

int run_roundtrip(const RoundtripArgs& a) {
  auto st = load_for_inference(a.ckpt);
  const Waveform w = load_wav(a.in);
  DecodeOptions opts;
  opts.sigma_cond = a.sigma_cond;
  if (auto s = resolve_seed(a.seed)) opts.seed = *s;
  const RoundtripResult r = roundtrip(st->model, w, opts);
  save_wav(a.out, r.output);

  json m = {{"si_sdr_db", r.si_sdr_db},
            {"input_samples", r.input_samples},
            {"output_samples", r.output_samples},
            {"chunks", r.chunks},
            {"sigma_cond", r.sigma_cond}};
  std::ofstream mf(a.metrics, std::ios::trunc);
  if (!mf) throw Error("roundtrip: cannot open metrics path '" + a.metrics + "'");
  mf << m.dump(2) << "\n";
  std::cout << "si_sdr_db " << r.si_sdr_db << "  (" << r.chunks
            << " chunks, sigma_cond " << r.sigma_cond << ") -> " << a.out << "\n";
  return 0;
}

struct SweepArgs {
  std::string ckpt, data, out;
  std::vector<double> grid;
  std::optional<std::uint64_t> seed;
};

int run_sweep(const SweepArgs& a) {
  auto st = load_for_inference(a.ckpt);
  const ModelConfig& cfg = st->model.cfg;
  const std::vector<Waveform> set = load_eval_set(a.data, cfg);
  const std::uint64_t seed = resolve_seed(a.seed).value_or(cfg.seed);

  LogMelEmbedder mel(cfg.sample_rate);
  RandomProjectionEmbedder proj(cfg.sample_rate, seed);
  const std::vector<SweepRow> rows =
      sigma_cond_sweep(st->model, set, a.grid, {&mel, &proj}, seed);
  write_sweep_csv(a.out, rows);
  for (const SweepRow& r : rows)
    std::cout << "sigma_cond " << r.sigma_cond << "  fd " << r.fd << "  ("
              << r.embedder << ", " << r.n_items << " items)\n";
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

struct AblateArgs {
  std::string config, data, out;
  std::optional<std::uint64_t> seed;
};

// Trains the summary and ordered latent variants from the same seed and
// reports tail loss, reconstruction Fréchet distance, and the latent file
// size each produces for the same clip.
int run_ablate(const AblateArgs& a) {
  ModelConfig base = load_config_file(a.config);
  if (auto s = resolve_seed(a.seed)) base.seed = *s;
  fs::create_directories(a.out);

  json report;
  std::uintmax_t latent_bytes[2] = {0, 0};
  const char* names[2] = {"summary", "ordered"};
  for (int v = 0; v < 2; ++v) {
    ModelConfig cfg = base;
    cfg.variant = v == 0 ? LatentVariant::summary : LatentVariant::ordered;
    cfg.validate();

    auto st = std::make_unique<TrainState<float>>(cfg);
    const Dataset ds = Dataset::load(a.data, cfg);
    const fs::path dir = fs::path(a.out) / names[v];
    fs::create_directories(dir);
    MetricsLogger log((dir / "metrics.ndjson").string());
    std::cout << "[" << names[v] << "] training on " << ds.size() << " clips\n";
    const double tail = train_loop(*st, ds, log, (dir / "checkpoint.ckpt").string(),
                                   0, std::string("[") + names[v] + "] ");

    st->swap_ema_into_model();
    const std::vector<Waveform> set = load_eval_set(a.data, cfg);
    LogMelEmbedder mel(cfg.sample_rate);
    const std::vector<SweepRow> rows =
        sigma_cond_sweep(st->model, set, {0.4}, {&mel}, cfg.seed);

    const std::string latent_path = (dir / "sample.m2l2").string();
    save_latents(latent_path, encode(st->model, set.front()));
    latent_bytes[v] = fs::file_size(latent_path);

    report[names[v]] = {{"mean_loss_last_tenth", tail},
                        {"fd_logmel", rows.front().fd},
                        {"latent_bytes", latent_bytes[v]},
                        {"checkpoint", (dir / "checkpoint.ckpt").string()}};
    std::cout << "[" << names[v] << "] tail loss " << tail << "  fd "
              << rows.front().fd << "  latent bytes " << latent_bytes[v] << "\n";
  }
  report["latent_bytes_equal"] = latent_bytes[0] == latent_bytes[1];

  const std::string report_path = (fs::path(a.out) / "ablation.json").string();
  std::ofstream rf(report_path, std::ios::trunc);
  if (!rf) throw Error("ablate: cannot open '" + report_path + "'");
  rf << report.dump(2) << "\n";
  std::cout << "wrote " << report_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"consistency-model audio autoencoder"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "Train a model on a WAV corpus");
  train->add_option("--config", train_args.config, "Model config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--data", train_args.data, "WAV file or directory")->required();
  train->add_option("--out", train_args.out, "Output directory")->required();
  train->add_option("--resume", train_args.resume, "Checkpoint to resume from")
      ->check(CLI::ExistingFile);
  train->add_option("--seed", train_args.seed, "Override the config seed");
  train->add_option("--checkpoint-every", train_args.ckpt_every,
                    "Iterations between checkpoint writes");

  CodecArgs encode_args;
  CLI::App* enc = app.add_subcommand("encode", "Encode a WAV into latents");
  enc->add_option("--ckpt", encode_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  enc->add_option("--in", encode_args.in, "Input WAV")->required()->check(CLI::ExistingFile);
  enc->add_option("--out", encode_args.out, "Output latent file")->required();

  CodecArgs decode_args;
  CLI::App* dec = app.add_subcommand("decode", "Decode latents into a WAV");
  dec->add_option("--ckpt", decode_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  dec->add_option("--in", decode_args.in, "Input latent file")->required()->check(CLI::ExistingFile);
  dec->add_option("--out", decode_args.out, "Output WAV")->required();
  dec->add_option("--sigma-cond", decode_args.sigma_cond,
                  "Noise level for conditioning on the previous chunk");
  dec->add_option("--seed", decode_args.seed, "Decoder noise seed");

  RoundtripArgs rt_args;
  CLI::App* rt = app.add_subcommand("roundtrip", "Encode then decode a WAV");
  rt->add_option("--ckpt", rt_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  rt->add_option("--in", rt_args.in, "Input WAV")->required()->check(CLI::ExistingFile);
  rt->add_option("--out", rt_args.out, "Output WAV")->required();
  rt->add_option("--metrics", rt_args.metrics, "Metrics JSON path")->required();
  rt->add_option("--sigma-cond", rt_args.sigma_cond,
                 "Noise level for conditioning on the previous chunk");
  rt->add_option("--seed", rt_args.seed, "Decoder noise seed");

  SweepArgs sweep_args;
  CLI::App* ev = app.add_subcommand("eval", "Evaluation harness");
  ev->require_subcommand(1);
  CLI::App* sweep = ev->add_subcommand("sweep", "Fréchet distance over a sigma_cond grid");
  sweep->add_option("--ckpt", sweep_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("--data", sweep_args.data, "Eval WAV file or directory")->required();
  sweep->add_option("--grid", sweep_args.grid, "Comma-separated sigma_cond values")
      ->required()
      ->delimiter(',');
  sweep->add_option("--out", sweep_args.out, "Output CSV")->required();
  sweep->add_option("--seed", sweep_args.seed, "Embedder and decode seed");

  AblateArgs ablate_args;
  CLI::App* ab = app.add_subcommand("ablate", "Train both latent variants and compare");
  ab->add_option("--config", ablate_args.config, "Model config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  ab->add_option("--data", ablate_args.data, "WAV file or directory")->required();
  ab->add_option("--out", ablate_args.out, "Output directory")->required();
  ab->add_option("--seed", ablate_args.seed, "Override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse error
    return code == 0 ? 0 : 2;
  }

  try {
    decode_args.sigma_cond_given = dec->count("--sigma-cond") > 0;
    if (*train) return run_train(train_args);
    if (*enc) return run_encode(encode_args);
    if (*dec) return run_decode(decode_args);
    if (*rt) return run_roundtrip(rt_args);
    if (*sweep) return run_sweep(sweep_args);
    if (*ab) return run_ablate(ablate_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
