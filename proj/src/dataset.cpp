#include "m2l2/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "m2l2/spectral.hpp"

namespace m2l2 {

namespace fs = std::filesystem;

Dataset Dataset::load(const std::string& root, const ModelConfig& cfg) {
  check(fs::exists(root), "dataset: '" + root + "' does not exist");
  std::vector<fs::path> files;
  if (fs::is_directory(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().extension() == ".wav")
        files.push_back(e.path());
  } else {
    files.emplace_back(root);
  }
  std::sort(files.begin(), files.end());  // directory order is not portable

  Dataset d;
  d.cfg_ = cfg;
  const long segment = cfg.segment_samples();
  for (const auto& f : files) {
    Waveform w;
    try {
      w = load_wav(f.string());
    } catch (const Error& e) {
      std::cerr << "dataset: skipping " << f << ": " << e.what() << "\n";
      continue;
    }
    if (w.sample_rate != cfg.sample_rate) {
      std::cerr << "dataset: skipping " << f << ": sample rate "
                << w.sample_rate << " != configured " << cfg.sample_rate
                << "\n";
      continue;
    }
    if (int(w.channels()) != cfg.audio_channels()) {
      if (cfg.audio_channels() == 1 && w.channels() == 2) {
        Waveform mono;
        mono.sample_rate = w.sample_rate;
        mono.samples = 0.5f * (w.samples.row(0) + w.samples.row(1));
        w = std::move(mono);
      } else {
        std::cerr << "dataset: skipping " << f << ": has " << w.channels()
                  << " channels, config expects " << cfg.audio_channels()
                  << "\n";
        continue;
      }
    }
    if (w.length() < segment) {
      std::cerr << "dataset: skipping " << f << ": " << w.length()
                << " samples < one training segment (" << segment << ")\n";
      continue;
    }
    d.clips_.push_back(std::move(w));
  }
  check(!d.clips_.empty(),
        "dataset: no usable data under '" + root +
            "' (need WAVs at the configured rate, at least " +
            std::to_string(segment) + " samples long)");
  return d;
}

ChunkPair<float> Dataset::sample_pair(Rng& rng) const {
  const Waveform& w = clips_[std::size_t(rng.below(clips_.size()))];
  const long segment = cfg_.segment_samples();
  const long max_off = w.length() - segment;
  const long off = max_off > 0 ? long(rng.below(std::uint64_t(max_off + 1))) : 0;

  Waveform crop;
  crop.sample_rate = w.sample_rate;
  crop.samples = w.samples.middleCols(off, segment);

  SpectralConfig sc = SpectralConfig::from(cfg_);
  Spectrogram s = stft(crop, sc);
  amplitude_compress(s, sc);
  check(s.num_chunks() == 2, "dataset: training segment must yield two chunks");
  return {s.chunks[0], s.chunks[1]};
}

std::vector<ChunkPair<float>> Dataset::sample_batch(long iteration) const {
  std::vector<ChunkPair<float>> batch;
  batch.reserve(std::size_t(cfg_.batch));
  for (int b = 0; b < cfg_.batch; ++b) {
    Rng rng = Rng::stream(cfg_.seed, std::uint64_t(iteration), 0, std::uint64_t(b));
    batch.push_back(sample_pair(rng));
  }
  return batch;
}

}  // namespace m2l2
