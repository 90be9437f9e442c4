#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "m2l2/autograd.hpp"
#include "m2l2/conv.hpp"
#include "m2l2/rng.hpp"

// Shared neural building blocks: linear/conv layers, pre-LN transformer
// blocks with optional adaptive (noise-conditioned) normalization, the
// convolutional patchifier / de-patchifier pair, sinusoidal noise embeddings,
// and the chunked causal attention mask.
namespace m2l2::nn {

using ag::Param;
using ag::Tape;
using ag::Var;

constexpr Index kNoiseEmbedDim = 256;
constexpr Index kGroupNormGroups = 8;

// ---------------------------------------------------------------------------
// Noise embedding: sinusoidal features of log(sigma)/4 (half sin, half cos,
// geometric frequency ladder from 1 down to 1e-4).
template <typename S>
Mat<S> noise_embedding(double sigma) {
  check(sigma > 0, "noise_embedding: sigma must be positive");
  const double v = std::log(sigma) / 4.0;
  const Index half = kNoiseEmbedDim / 2;
  Mat<S> e(1, kNoiseEmbedDim);
  for (Index i = 0; i < half; ++i) {
    double w = std::exp(-std::log(10000.0) * double(i) / double(half - 1));
    e(0, i) = S(std::sin(v * w));
    e(0, half + i) = S(std::cos(v * w));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Chunked causal attention mask: tokens of chunk i may attend to chunks
// j <= i; attention within a chunk is unrestricted.
struct AttentionMask {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> allowed;  // [S, S]

  Index size() const { return allowed.rows(); }

  // Additive bias: 0 where allowed, -inf where masked.
  template <typename S>
  Mat<S> bias() const {
    Mat<S> b = Mat<S>::Zero(allowed.rows(), allowed.cols());
    const S neg = -std::numeric_limits<S>::infinity();
    for (Index i = 0; i < allowed.rows(); ++i)
      for (Index j = 0; j < allowed.cols(); ++j)
        if (!allowed(i, j)) b(i, j) = neg;
    return b;
  }
};

inline AttentionMask chunked_causal_mask(Index tokens_per_chunk, Index n_chunks) {
  check(tokens_per_chunk >= 1 && n_chunks >= 1,
        "chunked_causal_mask: arguments must be >= 1");
  const Index s = tokens_per_chunk * n_chunks;
  AttentionMask m;
  m.allowed.resize(s, s);
  for (Index i = 0; i < s; ++i) {
    const Index ci = i / tokens_per_chunk;
    for (Index j = 0; j < s; ++j) m.allowed(i, j) = (j / tokens_per_chunk) <= ci;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Layers

template <typename S>
struct Linear {
  Param<S> w;  // [out x in]
  Param<S> b;  // [1 x out]

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, Rng& rng,
         double weight_scale = 1.0)
      : w(name + ".w", randn<S>(rng, out, in, weight_scale / std::sqrt(double(in)))),
        b(name + ".b", Mat<S>::Zero(1, out)) {}

  Var<S> operator()(Tape<S>& t, const Var<S>& x) {
    return ag::add_rowvec(ag::matmul(x, t.use(w), false, true), t.use(b));
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename S>
struct Conv2d {
  Param<S> w;  // [out x in*kh*kw]
  Param<S> b;  // [out x 1]
  ag::ConvGeom geom;  // H/W filled in per call

  Conv2d() = default;
  Conv2d(const std::string& name, Index in, Index out, Index k, Index stride,
         Index pad, Rng& rng, double weight_scale = 1.0)
      : w(name + ".w",
          randn<S>(rng, out, in * k * k, weight_scale / std::sqrt(double(in * k * k)))),
        b(name + ".b", Mat<S>::Zero(out, 1)) {
    geom.in_ch = in;
    geom.kh = geom.kw = k;
    geom.stride = stride;
    geom.pad = pad;
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x, Index H, Index W) {
    ag::ConvGeom g = geom;
    g.H = H;
    g.W = W;
    return ag::conv2d(x, t.use(w), t.use(b), g);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Layer norm over token rows. With `adaptive`, the affine terms come from the
// conditioning pathway instead of owned parameters.
template <typename S>
struct LayerNorm {
  bool adaptive = false;
  Param<S> gamma;  // [1 x D]
  Param<S> beta;   // [1 x D]

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index d, bool adaptive_) : adaptive(adaptive_) {
    if (!adaptive) {
      gamma = Param<S>(name + ".g", Mat<S>::Ones(1, d));
      beta = Param<S>(name + ".b", Mat<S>::Zero(1, d));
    }
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) {
    Var<S> h = ag::layer_norm(x);
    if (adaptive) return h;
    return ag::add_rowvec(ag::mul_rowvec(h, t.use(gamma)), t.use(beta));
  }

  void collect(std::vector<Param<S>*>& out) {
    if (!adaptive) {
      out.push_back(&gamma);
      out.push_back(&beta);
    }
  }
};

// ---------------------------------------------------------------------------
// Transformer block (pre-LN). When `adaptive`, the two norms have no affine
// parameters; instead a conditioning head maps the per-chunk noise feature to
// (shift, scale, gate) pairs applied per chunk of the token sequence.
template <typename S>
struct TransformerBlock {
  Index dim = 0, heads = 0;
  bool adaptive = false;
  LayerNorm<S> ln1, ln2;
  Linear<S> qkv, proj, fc1, fc2;
  Linear<S> cond;  // 256 -> 6*dim (adaptive only)

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Index d, Index h, Index mlp_mult,
                   bool adaptive_, Rng& rng)
      : dim(d), heads(h), adaptive(adaptive_),
        ln1(name + ".ln1", d, adaptive_),
        ln2(name + ".ln2", d, adaptive_),
        qkv(name + ".qkv", d, 3 * d, rng),
        proj(name + ".proj", d, d, rng),
        fc1(name + ".fc1", d, mlp_mult * d, rng),
        fc2(name + ".fc2", mlp_mult * d, d, rng) {
    check(d % h == 0, "transformer: dim must be divisible by heads");
    if (adaptive)
      cond = Linear<S>(name + ".cond", kNoiseEmbedDim, 6 * d, rng, 0.02);
  }

  // x: [S_tokens x dim]; mask bias [S_tokens x S_tokens]; for adaptive blocks
  // noise_feats has one [1 x 256] feature per chunk and chunk_sizes gives the
  // token count of each chunk (sum = S_tokens).
  Var<S> operator()(Tape<S>& t, const Var<S>& x, const Mat<S>& mask_bias,
                    const std::vector<Var<S>>& noise_feats = {},
                    const std::vector<Index>& chunk_sizes = {}) {
    check(mask_bias.rows() == x.rows() && mask_bias.cols() == x.rows(),
          "transformer: mask shape mismatch");
    check(x.rows() > 0, "transformer: empty token sequence");
    check(x.cols() == dim, "transformer: token dim mismatch");

    std::vector<std::array<Var<S>, 6>> mods;  // per chunk: sh1,sc1,g1,sh2,sc2,g2
    if (adaptive) {
      check(noise_feats.size() == chunk_sizes.size() && !noise_feats.empty(),
            "transformer: adaptive block needs per-chunk noise features");
      for (const auto& nf : noise_feats) {
        Var<S> m = cond(t, ag::silu(nf));
        std::array<Var<S>, 6> parts;
        for (int i = 0; i < 6; ++i) parts[i] = ag::slice_cols(m, i * dim, dim);
        mods.push_back(std::move(parts));
      }
    }

    auto modulate = [&](const Var<S>& h, int shift_i, int scale_i) {
      if (!adaptive) return h;
      return per_chunk(h, chunk_sizes, [&](std::size_t c, const Var<S>& hc) {
        auto scaled = ag::mul_rowvec(hc, ag::add_scalar(mods[c][scale_i], S(1)));
        return ag::add_rowvec(scaled, mods[c][shift_i]);
      });
    };
    auto gate = [&](const Var<S>& h, int gate_i) {
      if (!adaptive) return h;
      return per_chunk(h, chunk_sizes, [&](std::size_t c, const Var<S>& hc) {
        return ag::mul_rowvec(hc, mods[c][gate_i]);
      });
    };

    Var<S> h = modulate(ln1(t, x), 0, 1);
    Var<S> a = attention(t, h, mask_bias);
    Var<S> y = ag::add(x, gate(a, 2));

    Var<S> m = modulate(ln2(t, y), 3, 4);
    Var<S> u = fc2(t, ag::gelu(fc1(t, m)));
    return ag::add(y, gate(u, 5));
  }

  void collect(std::vector<Param<S>*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    qkv.collect(out);
    proj.collect(out);
    fc1.collect(out);
    fc2.collect(out);
    if (adaptive) cond.collect(out);
  }

private:
  template <typename F>
  Var<S> per_chunk(const Var<S>& h, const std::vector<Index>& sizes, F&& fn) {
    std::optional<Var<S>> out;
    Index row = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      Var<S> piece = fn(c, ag::slice_rows(h, row, sizes[c]));
      out = out ? ag::concat_rows(*out, piece) : piece;
      row += sizes[c];
    }
    return *out;
  }

  Var<S> attention(Tape<S>& t, const Var<S>& x, const Mat<S>& mask_bias) {
    const Index dh = dim / heads;
    const S inv_sqrt = S(1) / S(std::sqrt(double(dh)));
    Var<S> qkv_out = qkv(t, x);
    Var<S> q = ag::slice_cols(qkv_out, 0, dim);
    Var<S> k = ag::slice_cols(qkv_out, dim, dim);
    Var<S> v = ag::slice_cols(qkv_out, 2 * dim, dim);
    Var<S> bias = ag::constant<S>(mask_bias);
    std::optional<Var<S>> heads_out;
    for (Index h = 0; h < heads; ++h) {
      Var<S> qh = ag::slice_cols(q, h * dh, dh);
      Var<S> kh = ag::slice_cols(k, h * dh, dh);
      Var<S> vh = ag::slice_cols(v, h * dh, dh);
      Var<S> scores = ag::scale(ag::matmul(qh, kh, false, true), inv_sqrt);
      Var<S> attn = ag::row_softmax(ag::add(scores, bias));
      Var<S> oh = ag::matmul(attn, vh);
      heads_out = heads_out ? ag::concat_cols(*heads_out, oh) : oh;
    }
    return proj(t, *heads_out);
  }
};

// ---------------------------------------------------------------------------
// Pre-activation residual conv unit: x + conv3x3(silu(norm_mod(x))).
// With `adaptive`, group norm has no affine terms; a conditioning head maps
// the noise feature to per-channel (scale, shift).
template <typename S>
struct ResUnit {
  Index ch = 0;
  bool adaptive = false;
  Param<S> gamma, beta;  // [C x 1], non-adaptive only
  Conv2d<S> conv;
  Linear<S> cond;  // 256 -> 2*ch (adaptive only)

  ResUnit() = default;
  ResUnit(const std::string& name, Index c, bool adaptive_, Rng& rng)
      : ch(c), adaptive(adaptive_),
        conv(name + ".conv", c, c, 3, 1, 1, rng) {
    if (adaptive) {
      cond = Linear<S>(name + ".cond", kNoiseEmbedDim, 2 * c, rng, 0.02);
    } else {
      gamma = Param<S>(name + ".g", Mat<S>::Ones(c, 1));
      beta = Param<S>(name + ".b", Mat<S>::Zero(c, 1));
    }
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x, Index H, Index W,
                    const Var<S>* noise_feat) {
    Var<S> h = ag::group_norm(x, std::min<Index>(kGroupNormGroups, ch));
    if (adaptive) {
      check(noise_feat != nullptr, "res unit: adaptive layer needs a noise feature");
      Var<S> m = cond(t, ag::silu(*noise_feat));  // [1 x 2C]
      Var<S> sc = ag::transpose(ag::slice_cols(m, 0, ch));
      Var<S> sh = ag::transpose(ag::slice_cols(m, ch, ch));
      h = ag::add_colvec(ag::mul_colvec(h, ag::add_scalar(sc, S(1))), sh);
    } else {
      h = ag::add_colvec(ag::mul_colvec(h, t.use(gamma)), t.use(beta));
    }
    return ag::add(x, conv(t, ag::silu(h), H, W));
  }

  void collect(std::vector<Param<S>*>& out) {
    if (adaptive) {
      conv.collect(out);
      cond.collect(out);
    } else {
      out.push_back(&gamma);
      out.push_back(&beta);
      conv.collect(out);
    }
  }
};

// ---------------------------------------------------------------------------
// Patchifier: stem conv, then per level a residual stack followed by a 2x2
// strided downsample. The final map is flattened to tokens [T_patch x dim]
// (token index = h*W + w). Per-level taps (after each level's residual stack,
// before downsampling) are exposed for skip connections; optional per-level
// cross features are added at the start of each level.
template <typename S>
struct Patchifier {
  Index in_ch = 0;
  Index H0 = 0, W0 = 0;  // chunk spatial size (time frames x freq bins)
  std::vector<Index> channels;
  bool adaptive = false;
  Conv2d<S> stem;
  std::vector<std::vector<ResUnit<S>>> levels;
  std::vector<Conv2d<S>> downs;

  struct Out {
    Var<S> tokens;             // [T_patch x dim]
    std::vector<Var<S>> taps;  // per level, [ch[l] x (H0*W0)/4^l]
  };

  Patchifier() = default;
  Patchifier(const std::string& name, Index in, Index H, Index W,
             const std::vector<int>& ch, const std::vector<int>& layers,
             bool adaptive_, Rng& rng)
      : in_ch(in), H0(H), W0(W), channels(ch.begin(), ch.end()),
        adaptive(adaptive_),
        stem(name + ".stem", in, ch[0], 3, 1, 1, rng) {
    for (std::size_t l = 0; l < ch.size(); ++l) {
      std::vector<ResUnit<S>> units;
      for (int u = 0; u < layers[l]; ++u)
        units.emplace_back(name + ".l" + std::to_string(l) + ".u" + std::to_string(u),
                           ch[l], adaptive, rng);
      levels.push_back(std::move(units));
      if (l + 1 < ch.size())
        downs.emplace_back(name + ".down" + std::to_string(l), ch[l], ch[l + 1], 2,
                           2, 0, rng);
    }
  }

  Out operator()(Tape<S>& t, const Var<S>& chunk, const Var<S>* noise_feat,
                 const std::vector<Var<S>>* cross) {
    check(chunk.rows() == in_ch && chunk.cols() == H0 * W0,
          "patchify: chunk shape mismatch");
    if (cross)
      check(Index(cross->size()) == Index(levels.size()),
            "patchify: cross-connection level count mismatch");
    Out out;
    Index H = H0, W = W0;
    Var<S> x = stem(t, chunk, H, W);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (cross) {
        check((*cross)[l].rows() == Index(channels[l]) && (*cross)[l].cols() == H * W,
              "patchify: cross feature shape mismatch at level " + std::to_string(l));
        x = ag::add(x, (*cross)[l]);
      }
      for (auto& unit : levels[l]) x = unit(t, x, H, W, noise_feat);
      out.taps.push_back(x);
      if (l + 1 < levels.size()) {
        x = downs[l](t, x, H, W);
        H /= 2;
        W /= 2;
      }
    }
    out.tokens = ag::transpose(x);  // [T_patch x dim]
    return out;
  }

  void collect(std::vector<Param<S>*>& out) {
    stem.collect(out);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      for (auto& u : levels[l]) u.collect(out);
      if (l < downs.size()) downs[l].collect(out);
    }
  }
};

// ---------------------------------------------------------------------------
// De-patchifier: mirror of the patchifier. Starts from tokens at the coarsest
// resolution and upsamples (nearest + 1x1 conv) back to full resolution.
// Optional skips/cross are added at the start of each level; per-level taps
// are exposed (after each level's residual stack, before upsampling). When an
// output head is configured, the full-resolution map is projected back to the
// spectrogram channel count.
template <typename S>
struct DePatchifier {
  Index out_ch = 0;  // 0 = no output head (feature taps only)
  Index H0 = 0, W0 = 0;
  std::vector<Index> channels;
  bool adaptive = false;
  std::vector<std::vector<ResUnit<S>>> levels;  // indexed by resolution level
  std::vector<Conv2d<S>> ups;  // ups[l]: ch[l+1] -> ch[l] (1x1 after nearest)
  Conv2d<S> head;

  struct Out {
    Var<S> map;                // [out_ch x H0*W0] if out_ch, else finest tap
    std::vector<Var<S>> taps;  // per level, same shapes as patchifier taps
  };

  DePatchifier() = default;
  DePatchifier(const std::string& name, Index out, Index H, Index W,
               const std::vector<int>& ch, const std::vector<int>& layers,
               bool adaptive_, Rng& rng)
      : out_ch(out), H0(H), W0(W), channels(ch.begin(), ch.end()),
        adaptive(adaptive_) {
    for (std::size_t l = 0; l < ch.size(); ++l) {
      std::vector<ResUnit<S>> units;
      for (int u = 0; u < layers[l]; ++u)
        units.emplace_back(name + ".l" + std::to_string(l) + ".u" + std::to_string(u),
                           ch[l], adaptive, rng);
      levels.push_back(std::move(units));
      if (l + 1 < ch.size())
        ups.emplace_back(name + ".up" + std::to_string(l), ch[l + 1], ch[l], 1, 1, 0,
                         rng);
    }
    if (out_ch > 0)
      // Small output scale keeps the raw network contribution tame at init.
      head = Conv2d<S>(name + ".head", ch[0], out_ch, 3, 1, 1, rng, 0.02);
  }

  Out operator()(Tape<S>& t, const Var<S>& tokens,
                 const std::vector<Var<S>>* skips, const std::vector<Var<S>>* cross,
                 const Var<S>* noise_feat) {
    const Index L = Index(levels.size()) - 1;
    Index H = H0 >> L, W = W0 >> L;
    check(tokens.rows() == H * W && tokens.cols() == channels.back(),
          "depatchify: token shape mismatch");
    Out out;
    out.taps.resize(levels.size());
    Var<S> x = ag::transpose(tokens);  // [dim x T_patch]
    for (Index l = L; l >= 0; --l) {
      if (skips) {
        check(Index(skips->size()) == L + 1 && (*skips)[l].rows() == Index(channels[l]) &&
                  (*skips)[l].cols() == H * W,
              "depatchify: skip shape mismatch at level " + std::to_string(l));
        x = ag::add(x, (*skips)[l]);
      }
      if (cross) {
        check(Index(cross->size()) == L + 1,
              "depatchify: cross level count mismatch");
        x = ag::add(x, (*cross)[l]);
      }
      for (auto& unit : levels[l]) x = unit(t, x, H, W, noise_feat);
      out.taps[l] = x;
      if (l > 0) {
        x = ag::upsample_nearest2(x, H, W);
        H *= 2;
        W *= 2;
        x = ups[l - 1](t, x, H, W);
      }
    }
    out.map = out_ch > 0 ? head(t, x, H0, W0) : x;
    return out;
  }

  void collect(std::vector<Param<S>*>& out) {
    for (Index l = Index(levels.size()) - 1; l >= 0; --l) {
      for (auto& u : levels[l]) u.collect(out);
      if (l > 0) ups[l - 1].collect(out);
    }
    if (out_ch > 0) head.collect(out);
  }
};

}  // namespace m2l2::nn
