#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2l2/config.hpp"
#include "m2l2/nn.hpp"

// The three networks: encoder (summary embeddings), decoder (cross-connection
// producer), and consistency model (denoiser), plus the consistency
// parameterization c_skip/c_out.
namespace m2l2 {

struct ConsistencyParams {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  double rho = 7.0;

  static ConsistencyParams from(const ModelConfig& c) {
    return {c.sigma_min, c.sigma_max, c.sigma_data, c.rho};
  }

  void check_range(double sigma) const {
    check(sigma >= sigma_min && sigma <= sigma_max,
          "sigma " + std::to_string(sigma) + " outside [sigma_min, sigma_max]");
  }
};

// Skip/output mixing coefficients satisfying f(x, sigma_min) = x exactly:
// c_skip(sigma_min) = 1 and c_out(sigma_min) = 0 in exact IEEE arithmetic.
inline double c_skip(const ConsistencyParams& p, double sigma) {
  p.check_range(sigma);
  const double d = sigma - p.sigma_min;
  const double s2 = p.sigma_data * p.sigma_data;
  return s2 / (d * d + s2);
}

inline double c_out(const ConsistencyParams& p, double sigma) {
  p.check_range(sigma);
  const double s2 = p.sigma_data * p.sigma_data;
  return p.sigma_data * (sigma - p.sigma_min) / std::sqrt(s2 + sigma * sigma);
}

// Optional input preconditioning (config use_c_in, off by default).
inline double c_in(const ConsistencyParams& p, double sigma) {
  return 1.0 / std::sqrt(p.sigma_data * p.sigma_data + sigma * sigma);
}

// rho-warped noise ladder: u in [0,1] -> sigma, with sigma(0) = sigma_min and
// sigma(1) = sigma_max exactly (endpoints bypass the pow roundtrip).
inline double sigma_ladder(const ConsistencyParams& p, double u) {
  if (u <= 0.0) return p.sigma_min;
  if (u >= 1.0) return p.sigma_max;
  const double a = std::pow(p.sigma_min, 1.0 / p.rho);
  const double b = std::pow(p.sigma_max, 1.0 / p.rho);
  return std::pow(a + u * (b - a), p.rho);
}

namespace detail {
// Shared noise-feature MLP: sinusoidal embedding -> linear -> silu -> linear.
template <typename S>
struct NoiseMlp {
  nn::Linear<S> fc1, fc2;
  NoiseMlp() = default;
  NoiseMlp(const std::string& name, Rng& rng)
      : fc1(name + ".fc1", nn::kNoiseEmbedDim, nn::kNoiseEmbedDim, rng),
        fc2(name + ".fc2", nn::kNoiseEmbedDim, nn::kNoiseEmbedDim, rng) {}
  ag::Var<S> operator()(ag::Tape<S>& t, double sigma) {
    auto e = ag::constant<S>(nn::noise_embedding<S>(sigma));
    return fc2(t, ag::silu(fc1(t, e)));
  }
  void collect(std::vector<ag::Param<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};
}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder: spectrogram chunk -> [K x d_lat] latents in (-1, 1). The summary
// variant appends K learned query tokens and keeps only their outputs; the
// ordered ablation variant keeps the audio tokens and reduces each with a
// shared linear head so the total latent budget is identical.
template <typename S>
struct Encoder {
  ModelConfig cfg;
  nn::Patchifier<S> patch;
  ag::Param<S> pos;      // [T_patch x dim]
  ag::Param<S> queries;  // [K x dim] (summary variant only)
  std::vector<nn::TransformerBlock<S>> blocks;
  nn::Linear<S> head;  // dim -> d_lat (summary) or dim -> token width (ordered)

  explicit Encoder(const ModelConfig& c, Rng& rng)
      : cfg(c),
        patch("enc.patch", c.spec_channels(), c.spec_length, c.freq_bins(),
              c.channels, c.layers, false, rng),
        pos("enc.pos", randn<S>(rng, c.tokens_per_chunk(), c.dim, 0.02)) {
    if (c.variant == LatentVariant::summary) {
      queries = ag::Param<S>("enc.queries", randn<S>(rng, c.K, c.dim, 0.02));
      head = nn::Linear<S>("enc.head", c.dim, c.d_lat, rng);
    } else {
      head = nn::Linear<S>("enc.head", c.dim, c.ordered_token_width(), rng);
    }
    for (int i = 0; i < c.n_transformer_blocks; ++i)
      blocks.emplace_back("enc.blk" + std::to_string(i), c.dim, c.heads,
                          c.mlp_mult, false, rng);
  }

  // chunk: [spec_channels x spec_length*freq_bins], amplitude-compressed.
  ag::Var<S> encode_chunk(ag::Tape<S>& t, const ag::Var<S>& chunk) {
    const Index tp = cfg.tokens_per_chunk();
    auto po = patch(t, chunk, nullptr, nullptr);
    ag::Var<S> tokens = ag::add(po.tokens, t.use(pos));
    const Mat<S> no_mask =
        Mat<S>::Zero(tp + (cfg.variant == LatentVariant::summary ? cfg.K : 0),
                     tp + (cfg.variant == LatentVariant::summary ? cfg.K : 0));
    if (cfg.variant == LatentVariant::summary) {
      tokens = ag::concat_rows(tokens, t.use(queries));
      for (auto& b : blocks) tokens = b(t, tokens, no_mask);
      ag::Var<S> q_out = ag::slice_rows(tokens, tp, cfg.K);
      return ag::bounded_tanh(head(t, q_out));  // [K x d_lat]
    }
    for (auto& b : blocks) tokens = b(t, tokens, no_mask);
    ag::Var<S> per_token = ag::bounded_tanh(head(t, tokens));  // [T_patch x width]
    return ag::reshape(per_token, cfg.K, cfg.d_lat);
  }

  void collect(std::vector<ag::Param<S>*>& out) {
    patch.collect(out);
    out.push_back(&pos);
    if (cfg.variant == LatentVariant::summary) out.push_back(&queries);
    for (auto& b : blocks) b.collect(out);
    head.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Decoder: latents -> per-level cross-connection features. Latent rows are
// lifted to the transformer dim and prepended to T_patch learned mask tokens
// (which carry the positional table); after the transformer, the mask-token
// outputs feed the de-patchifier, whose per-level taps are the features.
template <typename S>
struct Decoder {
  ModelConfig cfg;
  nn::Linear<S> lift;     // d_lat -> dim
  ag::Param<S> mask_tok;  // [T_patch x dim]
  ag::Param<S> pos;       // [T_patch x dim]
  std::vector<nn::TransformerBlock<S>> blocks;
  nn::DePatchifier<S> depatch;  // feature taps only (no output head)

  explicit Decoder(const ModelConfig& c, Rng& rng)
      : cfg(c),
        lift("dec.lift", c.d_lat, c.dim, rng),
        mask_tok("dec.mask", randn<S>(rng, c.tokens_per_chunk(), c.dim, 0.02)),
        pos("dec.pos", randn<S>(rng, c.tokens_per_chunk(), c.dim, 0.02)),
        depatch("dec.depatch", 0, c.spec_length, c.freq_bins(), c.channels,
                c.layers, false, rng) {
    for (int i = 0; i < c.n_transformer_blocks; ++i)
      blocks.emplace_back("dec.blk" + std::to_string(i), c.dim, c.heads,
                          c.mlp_mult, false, rng);
  }

  // latents: [K x d_lat] -> per-level features (index l at resolution /2^l).
  std::vector<ag::Var<S>> features(ag::Tape<S>& t, const ag::Var<S>& latents) {
    check(latents.rows() == cfg.K && latents.cols() == cfg.d_lat,
          "decoder: latent shape mismatch");
    const Index tp = cfg.tokens_per_chunk();
    ag::Var<S> lat_tokens = lift(t, latents);  // [K x dim]
    ag::Var<S> audio = ag::add(t.use(mask_tok), t.use(pos));
    ag::Var<S> tokens = ag::concat_rows(lat_tokens, audio);
    const Mat<S> no_mask = Mat<S>::Zero(cfg.K + tp, cfg.K + tp);
    for (auto& b : blocks) tokens = b(t, tokens, no_mask);
    ag::Var<S> kept = ag::slice_rows(tokens, cfg.K, tp);
    auto out = depatch(t, kept, nullptr, nullptr, nullptr);
    return out.taps;
  }

  void collect(std::vector<ag::Param<S>*>& out) {
    lift.collect(out);
    out.push_back(&mask_tok);
    out.push_back(&pos);
    for (auto& b : blocks) b.collect(out);
    depatch.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Consistency model: denoises a pair (or singleton) of noisy chunks under
// chunked causal attention, conditioned on per-chunk noise levels and on the
// decoder's cross-connection features.
template <typename S>
struct ConsistencyModel {
  ModelConfig cfg;
  detail::NoiseMlp<S> noise_mlp;
  nn::Patchifier<S> patch;
  ag::Param<S> pos;  // [2*T_patch x dim]
  std::vector<nn::TransformerBlock<S>> blocks;
  nn::DePatchifier<S> depatch;

  explicit ConsistencyModel(const ModelConfig& c, Rng& rng)
      : cfg(c),
        noise_mlp("cm.noise", rng),
        patch("cm.patch", c.spec_channels(), c.spec_length, c.freq_bins(),
              c.channels, c.layers, true, rng),
        pos("cm.pos", randn<S>(rng, 2 * c.tokens_per_chunk(), c.dim, 0.02)),
        depatch("cm.depatch", c.spec_channels(), c.spec_length, c.freq_bins(),
                c.channels, c.layers, true, rng) {
    for (int i = 0; i < c.n_transformer_blocks; ++i)
      blocks.emplace_back("cm.blk" + std::to_string(i), c.dim, c.heads,
                          c.mlp_mult, true, rng);
  }

  // Raw network F: per-chunk patchify (noise-conditioned, cross added per
  // level) -> transformer over the concatenated tokens under the chunked
  // causal mask -> per-chunk de-patchify with additive skips.
  std::vector<ag::Var<S>> raw_forward(
      ag::Tape<S>& t, const std::vector<ag::Var<S>>& noisy,
      const std::vector<double>& sigmas,
      const std::vector<std::vector<ag::Var<S>>>& cross) {
    const std::size_t n = noisy.size();
    check(n >= 1 && n <= 2, "consistency model: expected 1 or 2 chunks");
    check(sigmas.size() == n, "consistency model: sigma count mismatch");
    check(cross.size() == n, "consistency model: cross-connections required per chunk");
    const Index tp = cfg.tokens_per_chunk();

    std::vector<ag::Var<S>> nf;  // per-chunk noise features
    for (double s : sigmas) nf.push_back(noise_mlp(t, s));

    std::vector<std::vector<ag::Var<S>>> taps(n);
    ag::Var<S> tokens;
    ag::Var<S> pos_all = t.use(pos);
    for (std::size_t c = 0; c < n; ++c) {
      auto po = patch(t, noisy[c], &nf[c], &cross[c]);
      taps[c] = std::move(po.taps);
      ag::Var<S> tk =
          ag::add(po.tokens, ag::slice_rows(pos_all, Index(c) * tp, tp));
      tokens = (c == 0) ? tk : ag::concat_rows(tokens, tk);
    }

    const Mat<S> mask = nn::chunked_causal_mask(tp, Index(n)).template bias<S>();
    std::vector<Index> sizes(n, tp);
    for (auto& b : blocks) tokens = b(t, tokens, mask, nf, sizes);

    std::vector<ag::Var<S>> out;
    for (std::size_t c = 0; c < n; ++c) {
      ag::Var<S> tk = ag::slice_rows(tokens, Index(c) * tp, tp);
      auto d = depatch(t, tk, &taps[c], nullptr, &nf[c]);
      out.push_back(d.map);
    }
    return out;
  }

  void collect(std::vector<ag::Param<S>*>& out) {
    noise_mlp.collect(out);
    patch.collect(out);
    out.push_back(&pos);
    for (auto& b : blocks) b.collect(out);
    depatch.collect(out);
  }
};

// ---------------------------------------------------------------------------
// The full autoencoder.
template <typename S>
struct AutoEncoder {
  ModelConfig cfg;
  ConsistencyParams cp;
  Encoder<S> enc;
  Decoder<S> dec;
  ConsistencyModel<S> cm;
  std::uint64_t cm_evals = 0;  // consistency evaluations performed (decode cost)

  AutoEncoder(const ModelConfig& c, Rng rng)
      : cfg(c), cp(ConsistencyParams::from(c)), enc(c, rng), dec(c, rng),
        cm(c, rng) {
    cfg.validate();
  }

  explicit AutoEncoder(const ModelConfig& c)
      : AutoEncoder(c, Rng::stream(c.seed, 0, 1)) {}

  // f = c_skip(sigma)*x + c_out(sigma)*F(x, sigma), per chunk with per-chunk
  // sigma. One call = one consistency evaluation regardless of chunk count.
  std::vector<ag::Var<S>> consistency_forward(
      ag::Tape<S>& t, const std::vector<ag::Var<S>>& noisy,
      const std::vector<double>& sigmas,
      const std::vector<std::vector<ag::Var<S>>>& cross) {
    for (double s : sigmas) cp.check_range(s);
    ++cm_evals;
    std::vector<ag::Var<S>> input = noisy;
    if (cfg.use_c_in)
      for (std::size_t c = 0; c < input.size(); ++c)
        input[c] = ag::scale(input[c], S(c_in(cp, sigmas[c])));
    auto F = cm.raw_forward(t, input, sigmas, cross);
    std::vector<ag::Var<S>> out;
    for (std::size_t c = 0; c < noisy.size(); ++c) {
      const S cs = S(c_skip(cp, sigmas[c]));
      const S co = S(c_out(cp, sigmas[c]));
      out.push_back(ag::axpby(cs, noisy[c], co, F[c]));
    }
    return out;
  }

  std::vector<ag::Param<S>*> params() {
    std::vector<ag::Param<S>*> out;
    enc.collect(out);
    dec.collect(out);
    cm.collect(out);
    return out;
  }

  long param_count() {
    long n = 0;
    for (auto* p : params()) n += long(p->value.size());
    return n;
  }
};

}  // namespace m2l2
