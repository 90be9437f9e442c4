#include "m2l2/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace m2l2 {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint16_t rd_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}

void wr_u32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(x & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 24) & 0xff);
}

void wr_u16(std::vector<unsigned char>& v, std::uint16_t x) {
  v.push_back(x & 0xff);
  v.push_back((x >> 8) & 0xff);
}

void wr_tag(std::vector<unsigned char>& v, const char* tag) {
  v.insert(v.end(), tag, tag + 4);
}

}  // namespace

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("wav: cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw Error("wav: '" + path + "' is not a RIFF WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* hdr = buf.data() + pos;
    std::uint32_t len = rd_u32(hdr + 4);
    const unsigned char* body = hdr + 8;
    if (pos + 8 + len > buf.size()) throw Error("wav: truncated chunk in '" + path + "'");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) throw Error("wav: malformed fmt chunk");
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);  // chunks are word-aligned
  }

  if (!data) throw Error("wav: '" + path + "' has no data chunk");
  if (channels < 1 || channels > 2)
    throw Error("wav: unsupported channel count " + std::to_string(channels));
  const bool pcm16 = (format == 1 && bits == 16);
  const bool f32 = (format == 3 && bits == 32);
  if (!pcm16 && !f32)
    throw Error("wav: unsupported encoding (need 16-bit PCM or 32-bit float)");

  const std::size_t bytes_per = bits / 8;
  const std::size_t frames = data_len / (bytes_per * channels);
  if (frames == 0) throw Error("wav: '" + path + "' contains no samples");

  Waveform w;
  w.sample_rate = int(rate);
  w.samples.resize(channels, Index(frames));
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * bytes_per;
      float v;
      if (pcm16) {
        std::int16_t s = std::int16_t(rd_u16(p));
        v = float(s) / 32768.0f;
      } else {
        std::uint32_t u = rd_u32(p);
        std::memcpy(&v, &u, 4);
      }
      w.samples(Index(c), Index(i)) = v;
    }
  }
  return w;
}

void save_wav(const std::string& path, const Waveform& w, int bits) {
  check(bits == 16 || bits == 32, "wav: bits must be 16 or 32");
  check(w.channels() >= 1 && w.channels() <= 2, "wav: 1 or 2 channels only");
  check(w.length() > 0, "wav: empty waveform");
  check(w.sample_rate > 0, "wav: sample rate must be positive");

  const std::uint16_t channels = std::uint16_t(w.channels());
  const std::uint32_t frames = std::uint32_t(w.length());
  const std::uint16_t bytes_per = std::uint16_t(bits / 8);
  const std::uint32_t data_len = frames * channels * bytes_per;
  const bool f32 = bits == 32;

  std::vector<unsigned char> out;
  out.reserve(data_len + 64);
  wr_tag(out, "RIFF");
  const std::uint32_t fact_len = f32 ? 12 : 0;
  wr_u32(out, 4 + 24 + fact_len + 8 + data_len);
  wr_tag(out, "WAVE");
  wr_tag(out, "fmt ");
  wr_u32(out, 16);
  wr_u16(out, f32 ? 3 : 1);
  wr_u16(out, channels);
  wr_u32(out, std::uint32_t(w.sample_rate));
  wr_u32(out, std::uint32_t(w.sample_rate) * channels * bytes_per);
  wr_u16(out, channels * bytes_per);
  wr_u16(out, std::uint16_t(bits));
  if (f32) {
    wr_tag(out, "fact");
    wr_u32(out, 4);
    wr_u32(out, frames);
  }
  wr_tag(out, "data");
  wr_u32(out, data_len);
  for (std::uint32_t i = 0; i < frames; ++i) {
    for (std::uint16_t c = 0; c < channels; ++c) {
      float v = w.samples(Index(c), Index(i));
      if (f32) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        wr_u32(out, u);
      } else {
        float clamped = std::clamp(v, -1.0f, 1.0f);
        auto s = std::int16_t(std::lrint(clamped * 32767.0f));
        wr_u16(out, std::uint16_t(s));
      }
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("wav: cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw Error("wav: write failed for '" + path + "'");
}

}  // namespace m2l2
