#pragma once

#include <string>
#include <vector>

#include "m2l2/config.hpp"
#include "m2l2/training.hpp"
#include "m2l2/wav.hpp"

// Training corpus: WAV files under a directory, sampled as random crops of
// one training segment (two adjacent chunks after STFT + compression).
namespace m2l2 {

class Dataset {
public:
  // Scans `root` recursively for *.wav. Files that fail to load, have the
  // wrong sample rate, or are shorter than one training segment are skipped
  // with a warning on stderr. Stereo files are averaged to mono when the
  // config is mono; mono files are skipped when the config is stereo.
  static Dataset load(const std::string& root, const ModelConfig& cfg);

  std::size_t size() const { return clips_.size(); }
  const Waveform& clip(std::size_t i) const { return clips_[i]; }

  // One crop: pick a clip and an offset, stft + compress, split into the
  // adjacent chunk pair.
  ChunkPair<float> sample_pair(Rng& rng) const;

  // Deterministic batch for an iteration: streams are derived from
  // (cfg.seed, iteration), so the sequence is reproducible and resumable.
  std::vector<ChunkPair<float>> sample_batch(long iteration) const;

private:
  ModelConfig cfg_;
  std::vector<Waveform> clips_;
};

}  // namespace m2l2
