#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "m2l2/nn.hpp"

using namespace m2l2;
using VF = ag::Var<float>;
using VD = ag::Var<double>;

TEST_CASE("noise embedding") {
  auto a = nn::noise_embedding<float>(0.7);
  auto b = nn::noise_embedding<float>(0.7);
  CHECK(a == b);  // deterministic
  CHECK(a.rows() == 1);
  CHECK(a.cols() == nn::kNoiseEmbedDim);
  CHECK(a.maxCoeff() <= 1.0f);
  CHECK(a.minCoeff() >= -1.0f);

  // log(1)/4 = 0: sin half exactly 0, cos half exactly 1.
  auto e1 = nn::noise_embedding<float>(1.0);
  const Index half = nn::kNoiseEmbedDim / 2;
  for (Index i = 0; i < half; ++i) {
    CHECK(e1(0, i) == 0.0f);
    CHECK(e1(0, half + i) == 1.0f);
  }

  auto c = nn::noise_embedding<float>(0.9);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0f);  // sigma-sensitive
  CHECK_THROWS_AS(nn::noise_embedding<float>(0.0), Error);
  CHECK_THROWS_AS(nn::noise_embedding<float>(-1.0), Error);
}

TEST_CASE("chunked causal mask") {
  SUBCASE("(64, 2): left chunk attends left-only, right attends everywhere") {
    auto m = nn::chunked_causal_mask(64, 2);
    REQUIRE(m.size() == 128);
    for (Index i = 0; i < 64; ++i)
      for (Index j = 0; j < 128; ++j) CHECK(m.allowed(i, j) == (j < 64));
    for (Index i = 64; i < 128; ++i)
      for (Index j = 0; j < 128; ++j) CHECK(m.allowed(i, j));
  }
  SUBCASE("(T, 1): single chunk is unmasked") {
    auto m = nn::chunked_causal_mask(5, 1);
    CHECK(m.allowed.all());
  }
  SUBCASE("(1, 3): chunk granularity = token granularity, lower triangular") {
    auto m = nn::chunked_causal_mask(1, 3);
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) CHECK(m.allowed(i, j) == (j <= i));
  }
  SUBCASE("bias is exactly 0 / -inf") {
    auto b = nn::chunked_causal_mask(2, 2).bias<float>();
    CHECK(b(0, 0) == 0.0f);
    CHECK(b(0, 2) == -std::numeric_limits<float>::infinity());
  }
  CHECK_THROWS_AS(nn::chunked_causal_mask(0, 2), Error);
  CHECK_THROWS_AS(nn::chunked_causal_mask(4, 0), Error);
}

TEST_CASE("transformer block: permutation equivariance without positions") {
  auto rng = Rng::stream(11, 0);
  nn::TransformerBlock<double> blk("blk", 16, 2, 4, false, rng);
  ag::Tape<double> t(false);
  Mat<double> x = randn<double>(rng, 6, 16);
  Mat<double> no_mask = Mat<double>::Zero(6, 6);

  Mat<double> y = blk(t, ag::constant<double>(Mat<double>(x)), no_mask).val();

  std::vector<Index> perm = {3, 0, 5, 1, 4, 2};
  Mat<double> xp(6, 16);
  for (Index i = 0; i < 6; ++i) xp.row(i) = x.row(perm[std::size_t(i)]);
  Mat<double> yp = blk(t, ag::constant<double>(Mat<double>(xp)), no_mask).val();

  for (Index i = 0; i < 6; ++i)
    CHECK((yp.row(i) - y.row(perm[std::size_t(i)])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("transformer stack causality under the chunked mask") {
  auto rng = Rng::stream(11, 1);
  const Index tp = 4, dim = 16;
  std::vector<nn::TransformerBlock<float>> blocks;
  for (int i = 0; i < 3; ++i)
    blocks.emplace_back("blk" + std::to_string(i), dim, 2, 4, false, rng);
  Mat<float> bias = nn::chunked_causal_mask(tp, 2).bias<float>();

  Mat<float> x = randn<float>(rng, 2 * tp, dim);
  Mat<float> x2 = x;
  x2.row(tp + 1).array() += 3.0f;  // perturb a right-chunk token

  ag::Tape<float> t(false);
  VF a = ag::constant<float>(Mat<float>(x));
  VF b = ag::constant<float>(Mat<float>(x2));
  for (auto& blk : blocks) {
    a = blk(t, a, bias);
    b = blk(t, b, bias);
    // Causality must hold at every stack depth.
    CHECK((a.val().topRows(tp) - b.val().topRows(tp)).cwiseAbs().maxCoeff() <=
          1e-6f);
    CHECK((a.val().bottomRows(tp) - b.val().bottomRows(tp)).cwiseAbs().maxCoeff() >
          0.0f);
  }
}

TEST_CASE("adaptive block responds to the noise feature and stays causal") {
  auto rng = Rng::stream(11, 2);
  const Index tp = 4, dim = 16;
  nn::TransformerBlock<float> blk("ablk", dim, 2, 4, true, rng);
  Mat<float> bias = nn::chunked_causal_mask(tp, 2).bias<float>();
  Mat<float> x = randn<float>(rng, 2 * tp, dim);
  ag::Tape<float> t(false);

  auto run = [&](double s_left, double s_right) {
    std::vector<VF> nf = {ag::constant<float>(nn::noise_embedding<float>(s_left)),
                          ag::constant<float>(nn::noise_embedding<float>(s_right))};
    std::vector<Index> sizes = {tp, tp};
    return blk(t, ag::constant<float>(Mat<float>(x)), bias, nf, sizes).val();
  };

  Mat<float> y = run(0.5, 0.5);
  Mat<float> y2 = run(2.0, 0.5);
  CHECK((y - y2).cwiseAbs().maxCoeff() > 0.0f);  // AdaLN is live

  // Changing the right chunk's sigma must not leak into the left chunk.
  Mat<float> y3 = run(0.5, 8.0);
  CHECK((y.topRows(tp) - y3.topRows(tp)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK((y.bottomRows(tp) - y3.bottomRows(tp)).cwiseAbs().maxCoeff() > 0.0f);

  // Adaptive blocks require per-chunk features.
  CHECK_THROWS_AS(blk(t, ag::constant<float>(Mat<float>(x)), bias), Error);
}

TEST_CASE("transformer rejects degenerate input") {
  auto rng = Rng::stream(11, 3);
  nn::TransformerBlock<float> blk("blk", 8, 2, 4, false, rng);
  ag::Tape<float> t(false);
  Mat<float> empty(0, 8);
  CHECK_THROWS_AS(blk(t, ag::constant<float>(Mat<float>(empty)), Mat<float>::Zero(0, 0)),
                  Error);
  Mat<float> x = randn<float>(rng, 4, 8);
  CHECK_THROWS_AS(blk(t, ag::constant<float>(Mat<float>(x)), Mat<float>::Zero(3, 3)),
                  Error);
}

TEST_CASE("transformer block gradient check at dim 8") {
  auto rng = Rng::stream(11, 4);
  nn::TransformerBlock<double> blk("g", 8, 2, 2, false, rng);
  Mat<double> x0 = randn<double>(rng, 5, 8);
  Mat<double> weights = randn<double>(rng, 5, 8);
  Mat<double> no_mask = Mat<double>::Zero(5, 5);

  auto run = [&](const Mat<double>& xv, ag::Tape<double>& t, VD* x_leaf) {
    VD x = x_leaf ? ag::leaf(Mat<double>(xv)) : ag::constant(Mat<double>(xv));
    if (x_leaf) *x_leaf = x;
    VD y = blk(t, x, no_mask);
    return ag::sum(ag::mul(y, ag::constant(Mat<double>(weights))));
  };

  ag::Tape<double> t(true);
  VD x_leaf;
  VD loss = run(x0, t, &x_leaf);
  ag::backward(loss);
  t.flush_grads();

  const double h = 1e-6;
  auto eval = [&](const Mat<double>& xv) {
    ag::Tape<double> ti(false);
    return run(xv, ti, nullptr).val()(0, 0);
  };

  // d/dx
  double worst = 0.0;
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 8; ++c) {
      Mat<double> hi = x0, lo = x0;
      hi(r, c) += h;
      lo(r, c) -= h;
      const double fd = (eval(hi) - eval(lo)) / (2 * h);
      const double an = x_leaf.node->grad(r, c);
      worst = std::max(worst,
                       std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0}));
    }
  CHECK(worst < 1e-3);

  // d/dw for a handful of entries in each parameter tensor.
  std::vector<ag::Param<double>*> ps;
  blk.collect(ps);
  auto peval = [&](ag::Param<double>* p, Index r, Index c, double delta) {
    const double saved = p->value(r, c);
    p->value(r, c) = saved + delta;
    ag::Tape<double> ti(false);
    const double v = run(x0, ti, nullptr).val()(0, 0);
    p->value(r, c) = saved;
    return v;
  };
  for (auto* p : ps) {
    for (int probe = 0; probe < 3; ++probe) {
      const Index r = Index(rng.below(std::uint64_t(p->value.rows())));
      const Index c = Index(rng.below(std::uint64_t(p->value.cols())));
      const double fd = (peval(p, r, c, h) - peval(p, r, c, -h)) / (2 * h);
      const double an = p->grad(r, c);
      CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0}) < 1e-3);
    }
  }
}

TEST_CASE("patchifier and de-patchifier at toy scale") {
  auto rng = Rng::stream(11, 5);
  const std::vector<int> ch = {32, 64, 64, 64};
  const std::vector<int> layers = {1, 1, 1, 1};
  const Index H = 16, W = 64;  // toy chunk: 16 frames x 64 bins
  nn::Patchifier<float> patch("p", 2, H, W, ch, layers, false, rng);
  nn::DePatchifier<float> depatch("d", 2, H, W, ch, layers, false, rng);
  ag::Tape<float> t(false);

  Mat<float> chunk = randn<float>(rng, 2, H * W);
  auto po = patch(t, ag::constant<float>(Mat<float>(chunk)), nullptr, nullptr);
  CHECK(po.tokens.rows() == 16);  // (16/8)*(64/8)
  CHECK(po.tokens.cols() == 64);
  REQUIRE(po.taps.size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(po.taps[l].rows() == ch[l]);
    CHECK(po.taps[l].cols() == (H * W) >> (2 * l));
  }

  SUBCASE("depatchify mirrors the shape and ignores zeroed skips") {
    auto out = depatch(t, po.tokens, &po.taps, nullptr, nullptr);
    CHECK(out.map.rows() == 2);
    CHECK(out.map.cols() == H * W);  // patchify-depatchify shape contract
    for (std::size_t l = 0; l < 4; ++l) {
      CHECK(out.taps[l].rows() == po.taps[l].rows());
      CHECK(out.taps[l].cols() == po.taps[l].cols());
    }

    std::vector<VF> zeros;
    for (std::size_t l = 0; l < 4; ++l)
      zeros.push_back(ag::constant<float>(
          Mat<float>(Mat<float>::Zero(ch[l], (H * W) >> (2 * l)))));
    auto with_zeros = depatch(t, po.tokens, &zeros, nullptr, nullptr);
    auto without = depatch(t, po.tokens, nullptr, nullptr, nullptr);
    CHECK((with_zeros.map.val() - without.map.val()).cwiseAbs().maxCoeff() == 0.0f);
  }

  SUBCASE("a perturbed skip level changes the output") {
    std::vector<VF> skips;
    for (std::size_t l = 0; l < 4; ++l)
      skips.push_back(ag::constant<float>(
          Mat<float>(Mat<float>::Zero(ch[l], (H * W) >> (2 * l)))));
    auto base = depatch(t, po.tokens, &skips, nullptr, nullptr);
    skips[2] = ag::constant<float>(
        Mat<float>(Mat<float>::Constant(ch[2], (H * W) >> 4, 1.0f)));
    auto bumped = depatch(t, po.tokens, &skips, nullptr, nullptr);
    CHECK((base.map.val() - bumped.map.val()).cwiseAbs().maxCoeff() > 0.0f);
  }

  SUBCASE("cross features are added at each level") {
    std::vector<VF> cross;
    for (std::size_t l = 0; l < 4; ++l)
      cross.push_back(ag::constant<float>(
          Mat<float>(Mat<float>::Zero(ch[l], (H * W) >> (2 * l)))));
    auto base = patch(t, ag::constant<float>(Mat<float>(chunk)), nullptr, &cross);
    CHECK((base.tokens.val() - po.tokens.val()).cwiseAbs().maxCoeff() == 0.0f);
    cross[1] = ag::constant<float>(
        Mat<float>(Mat<float>::Constant(ch[1], (H * W) >> 2, 0.5f)));
    auto bumped = patch(t, ag::constant<float>(Mat<float>(chunk)), nullptr, &cross);
    CHECK((base.tokens.val() - bumped.tokens.val()).cwiseAbs().maxCoeff() > 0.0f);
  }

  SUBCASE("shape mismatches are rejected") {
    Mat<float> bad = randn<float>(rng, 2, H * W / 2);
    CHECK_THROWS_AS(patch(t, ag::constant<float>(Mat<float>(bad)), nullptr, nullptr),
                    Error);
    Mat<float> bad_tokens = randn<float>(rng, 8, 64);
    CHECK_THROWS_AS(
        depatch(t, ag::constant<float>(Mat<float>(bad_tokens)), nullptr, nullptr, nullptr),
        Error);
  }
}

TEST_CASE("noise-conditioned conv stack is sigma-sensitive") {
  auto rng = Rng::stream(11, 6);
  nn::Patchifier<float> patch("ap", 2, 16, 64, {32, 64, 64, 64}, {1, 1, 1, 1},
                              true, rng);
  ag::Tape<float> t(false);
  Mat<float> chunk = randn<float>(rng, 2, 16 * 64);
  VF lo = ag::constant<float>(nn::noise_embedding<float>(0.01));
  VF hi = ag::constant<float>(nn::noise_embedding<float>(10.0));
  auto a = patch(t, ag::constant<float>(Mat<float>(chunk)), &lo, nullptr);
  auto b = patch(t, ag::constant<float>(Mat<float>(chunk)), &hi, nullptr);
  CHECK((a.tokens.val() - b.tokens.val()).cwiseAbs().maxCoeff() > 0.0f);
}
