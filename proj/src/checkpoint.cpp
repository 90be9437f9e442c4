#include "m2l2/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <vector>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need swaps");

namespace m2l2 {

namespace {

constexpr char kMagic[8] = {'M', '2', 'L', '2', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kPrefix = 8 + 2 + 8;  // magic + version + manifest length

struct TensorRef {
  std::string key;
  const Mat<float>* mat;
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainState<float>& st) {
  std::vector<TensorRef> tensors;
  std::set<std::string> seen;
  auto add = [&](const std::string& key, const Mat<float>& m) {
    check(seen.insert(key).second,
          "checkpoint: duplicate tensor name '" + key + "'");
    tensors.push_back({key, &m});
  };
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    add("raw/" + st.params[i]->name, st.params[i]->value);
    add("ema/" + st.params[i]->name, st.ema[i]);
    add("opt_m/" + st.params[i]->name, st.opt.m[i]);
    add("opt_v/" + st.params[i]->name, st.opt.v[i]);
  }

  nlohmann::json dir = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const TensorRef& t : tensors) {
    dir[t.key] = {{"dtype", "f32"},
                  {"shape", {t.mat->rows(), t.mat->cols()}},
                  {"offset", offset}};
    offset += std::uint64_t(t.mat->size()) * sizeof(float);
  }
  const nlohmann::json manifest = {
      {"config", nlohmann::json::parse(config_to_json(st.model.cfg))},
      {"iteration", st.iteration},
      {"tensors", dir},
  };
  const std::string m = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(bool(out), "checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  const std::uint16_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), 2);
  const std::uint64_t mlen = m.size();
  out.write(reinterpret_cast<const char*>(&mlen), 8);
  out.write(m.data(), std::streamsize(m.size()));
  for (const TensorRef& t : tensors)
    out.write(reinterpret_cast<const char*>(t.mat->data()),
              std::streamsize(std::size_t(t.mat->size()) * sizeof(float)));
  out.flush();
  check(bool(out), "checkpoint: write to '" + path + "' failed");
}

std::unique_ptr<TrainState<float>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(bool(in), "checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  check(bytes.size() >= kPrefix && std::memcmp(bytes.data(), kMagic, 8) == 0,
        "checkpoint: '" + path + "' is not a checkpoint file");
  std::uint16_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 2);
  check(version == kVersion, "checkpoint: unsupported format version " +
                                 std::to_string(version));
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + 10, 8);
  check(bytes.size() >= kPrefix + mlen,
        "checkpoint: truncated manifest in '" + path + "'");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kPrefix, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint: corrupt manifest in '" + path + "': " + e.what());
  }

  const char* payload = bytes.data() + kPrefix + mlen;
  const std::uint64_t payload_size = bytes.size() - kPrefix - mlen;

  try {
    const ModelConfig cfg = config_from_json(manifest.at("config").dump());
    auto st = std::make_unique<TrainState<float>>(cfg);
    st->iteration = manifest.at("iteration").get<long>();

    const nlohmann::json& dir = manifest.at("tensors");
    auto restore = [&](const std::string& key, Mat<float>& m) {
      check(dir.contains(key),
            "checkpoint: corrupt manifest — missing tensor '" + key + "'");
      const nlohmann::json& t = dir.at(key);
      check(t.at("dtype").get<std::string>() == "f32",
            "checkpoint: unsupported dtype for '" + key + "'");
      const auto shape = t.at("shape");
      check(shape.size() == 2 && shape[0].get<Index>() == m.rows() &&
                shape[1].get<Index>() == m.cols(),
            "checkpoint: tensor '" + key + "' shape mismatch");
      const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
      const std::uint64_t size = std::uint64_t(m.size()) * sizeof(float);
      check(offset + size <= payload_size,
            "checkpoint: truncated payload in '" + path + "'");
      std::memcpy(m.data(), payload + offset, size);
    };
    for (std::size_t i = 0; i < st->params.size(); ++i) {
      restore("raw/" + st->params[i]->name, st->params[i]->value);
      restore("ema/" + st->params[i]->name, st->ema[i]);
      restore("opt_m/" + st->params[i]->name, st->opt.m[i]);
      restore("opt_v/" + st->params[i]->name, st->opt.v[i]);
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint: corrupt manifest in '" + path + "': " + e.what());
  }
}

}  // namespace m2l2
