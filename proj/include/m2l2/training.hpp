#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "m2l2/model.hpp"

// Consistency training: exponential step schedule, noise-pair sampling,
// Pseudo-Huber loss with 1/(delta sigma) weighting, RAdam, cosine learning
// rate decay, and EMA tracking.
namespace m2l2 {

// One training example: two temporally adjacent compressed spectrogram chunks.
template <typename S>
struct ChunkPair {
  Mat<S> left, right;  // each [spec_channels x spec_length*freq_bins]
};

// ---------------------------------------------------------------------------
// Discretization schedule N(k) = min(s0 * 2^floor(k*log2(s1/s0)/T), s1):
// doubles from s0 toward s1 over training, shrinking the pair gap 1/N.
struct StepSchedule {
  int s0 = 10;
  int s1 = 1280;
  long total_iterations = 1;

  static StepSchedule from(const ModelConfig& c) {
    return {c.s0, c.s1, c.total_iterations};
  }

  long n_at(long iteration) const {
    check(iteration >= 0, "schedule: negative iteration");
    const double scale = std::log2(double(s1) / double(s0));
    const long e =
        long(std::floor(double(iteration) * scale / double(total_iterations)));
    const double n = double(s0) * std::pow(2.0, double(e));
    return n >= double(s1) ? long(s1) : long(n);
  }
};

struct NoisePair {
  double lo = 0.0, hi = 0.0;  // sigma and sigma + delta
};

// Draws (sigma, sigma + delta) through the rho-warped ladder. Uniform: u in
// [0,1), pair (sigma(u), sigma(u + 1/N)) clamped at sigma_max. Discretized
// lognormal: level i of the N-point ladder drawn with probability
// proportional to the log-normal mass between ladder points; pair (i, i+1).
inline NoisePair sample_noise_pair(const ModelConfig& cfg, long iteration,
                                   Rng& rng) {
  check(iteration < cfg.total_iterations,
        "sample_noise_pair: iteration past the schedule end");
  const ConsistencyParams cp = ConsistencyParams::from(cfg);
  const long N = StepSchedule::from(cfg).n_at(iteration);

  if (cfg.noise_dist == NoiseDist::uniform) {
    const double u = rng.uniform();
    return {sigma_ladder(cp, u),
            sigma_ladder(cp, std::min(1.0, u + 1.0 / double(N)))};
  }

  // Discretized lognormal: weight of level i is the normal CDF mass of
  // log(sigma) between ladder knots i and i+1.
  const double inv = 1.0 / (std::sqrt(2.0) * cfg.lognormal_std);
  auto cdf = [&](long i) {
    return 0.5 * (1.0 + std::erf((std::log(sigma_ladder(cp, double(i) / double(N - 1))) -
                                  cfg.lognormal_mean) *
                                 inv));
  };
  std::vector<double> w(std::size_t(N - 1));
  double total = 0.0;
  for (long i = 0; i + 1 < N; ++i) {
    w[std::size_t(i)] = std::max(cdf(i + 1) - cdf(i), 1e-300);
    total += w[std::size_t(i)];
  }
  double r = rng.uniform() * total;
  long pick = N - 2;
  for (long i = 0; i + 1 < N; ++i) {
    r -= w[std::size_t(i)];
    if (r <= 0.0) {
      pick = i;
      break;
    }
  }
  return {sigma_ladder(cp, double(pick) / double(N - 1)),
          sigma_ladder(cp, double(pick + 1) / double(N - 1))};
}

// ---------------------------------------------------------------------------
// Pseudo-Huber distance sqrt(||x - y||^2 + c^2) - c with c = c_factor*sqrt(D),
// D the element count. The constant is materialized as sqrt(c^2) so that
// d(x, x) is exactly zero and the distance is never negative.
template <typename S>
ag::Var<S> pseudo_huber(const ag::Var<S>& x, const ag::Var<S>& y,
                        double c_factor) {
  check(x.rows() == y.rows() && x.cols() == y.cols(),
        "pseudo_huber: shape mismatch");
  const double c = c_factor * std::sqrt(double(x.size()));
  const S c2 = S(c * c);
  const S c_eff = std::sqrt(c2);
  ag::Var<S> q = ag::sum_squares(ag::sub(x, y));
  return ag::add_scalar(ag::sqrt_op(ag::add_scalar(q, c2)), -c_eff);
}

// ---------------------------------------------------------------------------
// Loss for one chunk pair with pinned noise levels and noise realizations:
//   mean over chunks of (1/delta_c) * d(f(x + hi*eps, hi), sg(f(x + lo*eps, lo)))
// The tracked branch runs on `tape`; the stop-gradient branch re-runs the
// consistency model on an untracked tape with detached cross-connections, so
// the same (current) parameters are used but no gradient flows through it.
// A zero-width pair (hi == lo) contributes exactly zero (test hook).
template <typename S>
ag::Var<S> pair_loss(AutoEncoder<S>& model, ag::Tape<S>& tape,
                     const ChunkPair<S>& pair, const NoisePair& np_left,
                     const NoisePair& np_right, const Mat<S>& eps_left,
                     const Mat<S>& eps_right) {
  const ModelConfig& cfg = model.cfg;
  ag::Var<S> left = ag::constant<S>(pair.left);
  ag::Var<S> right = ag::constant<S>(pair.right);

  ag::Var<S> lat_l = model.enc.encode_chunk(tape, left);
  ag::Var<S> lat_r = model.enc.encode_chunk(tape, right);
  std::vector<ag::Var<S>> cross_l = model.dec.features(tape, lat_l);
  std::vector<ag::Var<S>> cross_r = model.dec.features(tape, lat_r);

  auto noised = [](const ag::Var<S>& x, double sigma, const Mat<S>& eps) {
    return ag::constant<S>(Mat<S>(x.val() + S(sigma) * eps));
  };

  std::vector<ag::Var<S>> hi = {noised(left, np_left.hi, eps_left),
                                noised(right, np_right.hi, eps_right)};
  auto f_hi = model.consistency_forward(tape, hi, {np_left.hi, np_right.hi},
                                        {cross_l, cross_r});

  ag::Tape<S> sg(false);
  std::vector<ag::Var<S>> cross_l_sg, cross_r_sg;
  for (auto& f : cross_l) cross_l_sg.push_back(ag::detach(f));
  for (auto& f : cross_r) cross_r_sg.push_back(ag::detach(f));
  std::vector<ag::Var<S>> lo = {noised(left, np_left.lo, eps_left),
                                noised(right, np_right.lo, eps_right)};
  auto f_lo = model.consistency_forward(sg, lo, {np_left.lo, np_right.lo},
                                        {cross_l_sg, cross_r_sg});

  const double dl = np_left.hi - np_left.lo;
  const double dr = np_right.hi - np_right.lo;
  ag::Var<S> d_l = pseudo_huber(f_hi[0], f_lo[0], cfg.c_factor);
  ag::Var<S> d_r = pseudo_huber(f_hi[1], f_lo[1], cfg.c_factor);
  // 1/delta weighting; a pinned delta of 0 has d = 0 by construction, so its
  // weight is irrelevant — use 0 to avoid inf*0.
  const S wl = S(dl > 0 ? 0.5 / dl : 0.0);
  const S wr = S(dr > 0 ? 0.5 / dr : 0.0);
  return ag::add(ag::scale(d_l, wl), ag::scale(d_r, wr));
}

// ---------------------------------------------------------------------------
// Mean consistency loss over a batch. Noise levels and realizations are drawn
// from per-(seed, iteration, purpose, sample) streams, so the value is
// bit-reproducible for a given state and independent of batch composition
// elsewhere. With `with_grads`, d(mean loss)/d(params) is accumulated into
// Param::grad sample by sample (call zero_grad beforehand).
template <typename S>
double consistency_loss(AutoEncoder<S>& model,
                        const std::vector<ChunkPair<S>>& batch, long iteration,
                        bool with_grads) {
  check(!batch.empty(), "consistency_loss: empty batch");
  const ModelConfig& cfg = model.cfg;
  const double inv_b = 1.0 / double(batch.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Rng rng_sigma = Rng::stream(cfg.seed, std::uint64_t(iteration), 1, b);
    Rng rng_eps = Rng::stream(cfg.seed, std::uint64_t(iteration), 2, b);
    const NoisePair np_l = sample_noise_pair(cfg, iteration, rng_sigma);
    const NoisePair np_r = sample_noise_pair(cfg, iteration, rng_sigma);
    const Mat<S> eps_l =
        randn<S>(rng_eps, batch[b].left.rows(), batch[b].left.cols());
    const Mat<S> eps_r =
        randn<S>(rng_eps, batch[b].right.rows(), batch[b].right.cols());

    ag::Tape<S> tape(with_grads);
    ag::Var<S> loss =
        pair_loss(model, tape, batch[b], np_l, np_r, eps_l, eps_r);
    const double value = double(loss.val()(0, 0));
    if (!std::isfinite(value))
      throw Error("training: non-finite loss at iteration " +
                  std::to_string(iteration) + " (sample " + std::to_string(b) +
                  ", sigma pairs [" + std::to_string(np_l.lo) + ", " +
                  std::to_string(np_l.hi) + "] [" + std::to_string(np_r.lo) +
                  ", " + std::to_string(np_r.hi) + "])");
    total += value * inv_b;
    if (with_grads) {
      ag::backward(ag::scale(loss, S(inv_b)));
      tape.flush_grads();
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Cosine decay from lr0 to lr_final over total_iterations.
inline double cosine_lr(const ModelConfig& cfg, long iteration) {
  const double t = double(iteration) / double(cfg.total_iterations);
  return cfg.lr_final +
         (cfg.lr0 - cfg.lr_final) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// Rectified Adam. Falls back to unrectified momentum SGD while the variance
// estimate is intractable (rho_t <= 4), per the original algorithm.
template <typename S>
struct RAdam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Mat<S>> m, v;

  void init(const std::vector<ag::Param<S>*>& ps) {
    m.clear();
    v.clear();
    for (auto* p : ps) {
      m.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  // t is 1-based.
  void step(const std::vector<ag::Param<S>*>& ps, long t, double lr) {
    check(ps.size() == m.size(), "radam: parameter set changed");
    const double b1t = std::pow(beta1, double(t));
    const double b2t = std::pow(beta2, double(t));
    const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t) * b2t / (1.0 - b2t);
    double rect = 0.0;
    const bool rectified = rho_t > 4.0;
    if (rectified)
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Mat<S>& g = ps[i]->grad;
      m[i] = S(beta1) * m[i] + S(1 - beta1) * g;
      v[i] = S(beta2) * v[i] + S(1 - beta2) * g.cwiseProduct(g);
      Mat<S> m_hat = m[i] / S(1.0 - b1t);
      if (rectified) {
        Mat<S> denom =
            ((v[i] / S(1.0 - b2t)).cwiseSqrt().array() + S(eps)).matrix();
        ps[i]->value -= S(lr * rect) * m_hat.cwiseQuotient(denom);
      } else {
        ps[i]->value -= S(lr) * m_hat;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Everything train_step mutates, bundled: model parameters, their EMA
// shadows, optimizer moments, and the iteration counter.
template <typename S>
struct TrainState {
  AutoEncoder<S> model;
  std::vector<ag::Param<S>*> params;
  RAdam<S> opt;
  std::vector<Mat<S>> ema;
  long iteration = 0;

  explicit TrainState(const ModelConfig& cfg) : model(cfg) {
    params = model.params();
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.init(params);
    ema.reserve(params.size());
    for (auto* p : params) ema.push_back(p->value);
  }

  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  void update_ema() {
    const S mom = S(model.cfg.ema_momentum);
    for (std::size_t i = 0; i < params.size(); ++i)
      ema[i] = mom * ema[i] + (S(1) - mom) * params[i]->value;
  }

  // Swap EMA weights into the live model (e.g. for inference/eval); calling
  // twice restores the raw weights.
  void swap_ema_into_model() {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i]->value.swap(ema[i]);
  }
};

struct StepInfo {
  long iteration = 0;  // the step just taken
  double loss = 0.0;
  double lr = 0.0;
  long n_discretization = 0;  // N(k) used for this step
};

// One optimization step: accumulate batch gradients, RAdam update with the
// cosine learning rate, EMA refresh, iteration increment.
template <typename S>
StepInfo train_step(TrainState<S>& st, const std::vector<ChunkPair<S>>& batch) {
  const ModelConfig& cfg = st.model.cfg;
  check(st.iteration < cfg.total_iterations, "train_step: schedule exhausted");
  for (auto* p : st.params) p->zero_grad();
  StepInfo info;
  info.iteration = st.iteration;
  info.n_discretization = StepSchedule::from(cfg).n_at(st.iteration);
  info.loss = consistency_loss(st.model, batch, st.iteration, true);
  info.lr = cosine_lr(cfg, st.iteration);
  st.opt.step(st.params, st.iteration + 1, info.lr);
  st.update_ema();
  ++st.iteration;
  return info;
}

}  // namespace m2l2
