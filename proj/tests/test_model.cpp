#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "m2l2/model.hpp"

using namespace m2l2;
using VF = ag::Var<float>;

namespace {

VF random_chunk(Rng& rng, const ModelConfig& c, float scale = 0.3f) {
  return ag::constant<float>(
      randn<float>(rng, c.spec_channels(), c.spec_length * c.freq_bins(), scale));
}

std::vector<VF> zero_cross(const ModelConfig& c) {
  std::vector<VF> out;
  Index hw = Index(c.spec_length) * c.freq_bins();
  for (std::size_t l = 0; l < c.channels.size(); ++l) {
    out.push_back(ag::constant<float>(
        Mat<float>(Mat<float>::Zero(c.channels[l], hw >> (2 * l)))));
  }
  return out;
}

}  // namespace

TEST_CASE("c_skip, c_out, and the noise ladder") {
  ConsistencyParams p;  // defaults: 0.002 / 80 / 0.5 / 7

  CHECK(c_skip(p, p.sigma_min) == 1.0);  // boundary, exact
  CHECK(c_out(p, p.sigma_min) == 0.0);

  // Independent evaluation of sigma_data^2 / ((sigma-sigma_min)^2 + sigma_data^2)
  // at sigma = 0.5: 0.25 / (0.498^2 + 0.25) = 0.502004...
  CHECK(c_skip(p, 0.5) == doctest::Approx(0.5020039999678717).epsilon(1e-12));
  CHECK(c_out(p, 0.5) ==
        doctest::Approx(0.5 * 0.498 / std::sqrt(0.25 + 0.25)).epsilon(1e-12));

  // Monotonically decreasing on a 100-point grid.
  double prev = c_skip(p, p.sigma_min);
  for (int i = 1; i < 100; ++i) {
    double s = p.sigma_min + (p.sigma_max - p.sigma_min) * double(i) / 99.0;
    double v = c_skip(p, s);
    CHECK(v < prev);
    prev = v;
  }

  CHECK_THROWS_AS(c_skip(p, 0.001), Error);
  CHECK_THROWS_AS(c_skip(p, 81.0), Error);
  CHECK_THROWS_AS(c_out(p, 0.0), Error);

  CHECK(sigma_ladder(p, 0.0) == doctest::Approx(p.sigma_min).epsilon(1e-12));
  CHECK(sigma_ladder(p, 1.0) == doctest::Approx(p.sigma_max).epsilon(1e-12));
  CHECK(sigma_ladder(p, 0.5) > sigma_ladder(p, 0.25));  // monotone in u

  CHECK(c_in(p, 0.0) == doctest::Approx(2.0).epsilon(1e-12));  // 1/sigma_data
}

TEST_CASE("encoder produces bounded deterministic latents") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 0);
  ag::Tape<float> t(false);

  VF chunk = random_chunk(rng, cfg);
  VF lat1 = model.enc.encode_chunk(t, chunk);
  VF lat2 = model.enc.encode_chunk(t, chunk);
  CHECK(lat1.rows() == cfg.K);
  CHECK(lat1.cols() == cfg.d_lat);
  CHECK((lat1.val() - lat2.val()).cwiseAbs().maxCoeff() == 0.0f);  // deterministic
  CHECK(lat1.val().cwiseAbs().maxCoeff() < 1.0f);  // strictly inside (-1, 1)
  CHECK(all_finite(lat1.val()));

  VF other = random_chunk(rng, cfg);
  VF lat3 = model.enc.encode_chunk(t, other);
  CHECK((lat1.val() - lat3.val()).cwiseAbs().maxCoeff() > 0.0f);

  Mat<float> bad = randn<float>(rng, 2, 100);
  CHECK_THROWS_AS(model.enc.encode_chunk(t, ag::constant<float>(Mat<float>(bad))),
                  Error);
}

TEST_CASE("ordered variant matches the latent budget") {
  ModelConfig cfg = toy_preset();
  cfg.variant = LatentVariant::ordered;
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 1);
  ag::Tape<float> t(false);

  VF chunk = random_chunk(rng, cfg);
  VF lat = model.enc.encode_chunk(t, chunk);
  CHECK(lat.rows() == cfg.K);  // same [K x d_lat] interface as summary
  CHECK(lat.cols() == cfg.d_lat);
  CHECK(lat.val().cwiseAbs().maxCoeff() < 1.0f);
  VF again = model.enc.encode_chunk(t, chunk);
  CHECK((lat.val() - again.val()).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("decoder features mirror the patchifier levels") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 2);
  ag::Tape<float> t(false);

  Mat<float> lat_v = randn<float>(rng, cfg.K, cfg.d_lat, 0.5f);
  lat_v = lat_v.array().tanh().matrix();
  VF lat = ag::constant<float>(Mat<float>(lat_v));
  auto feats = model.dec.features(t, lat);
  REQUIRE(feats.size() == cfg.channels.size());
  const Index hw = Index(cfg.spec_length) * cfg.freq_bins();
  for (std::size_t l = 0; l < feats.size(); ++l) {
    CHECK(feats[l].rows() == cfg.channels[l]);
    CHECK(feats[l].cols() == hw >> (2 * l));
    CHECK(all_finite(feats[l].val()));
  }

  auto again = model.dec.features(t, lat);
  CHECK((feats[0].val() - again[0].val()).cwiseAbs().maxCoeff() == 0.0f);

  // Perturbing one latent entry must reach the coarsest level's features.
  Mat<float> lat2_v = lat_v;
  lat2_v(1, 3) = lat2_v(1, 3) * 0.5f + 0.2f;
  auto feats2 = model.dec.features(t, ag::constant<float>(Mat<float>(lat2_v)));
  CHECK((feats.back().val() - feats2.back().val()).cwiseAbs().maxCoeff() > 0.0f);

  Mat<float> bad = randn<float>(rng, cfg.K, cfg.d_lat + 1);
  CHECK_THROWS_AS(model.dec.features(t, ag::constant<float>(Mat<float>(bad))), Error);
}

TEST_CASE("consistency forward: boundary, causality, single-vs-pair") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 3);
  ag::Tape<float> t(false);

  VF left = random_chunk(rng, cfg);
  VF right = random_chunk(rng, cfg);
  auto cross_l = zero_cross(cfg);
  auto cross_r = zero_cross(cfg);

  SUBCASE("boundary condition at sigma_min is exact for any weights") {
    auto out = model.consistency_forward(t, {left, right},
                                         {cfg.sigma_min, cfg.sigma_min},
                                         {cross_l, cross_r});
    REQUIRE(out.size() == 2);
    CHECK((out[0].val() - left.val()).cwiseAbs().maxCoeff() <= 1e-6f);
    CHECK((out[1].val() - right.val()).cwiseAbs().maxCoeff() <= 1e-6f);
  }

  SUBCASE("perturbing the right chunk leaves the left output unchanged") {
    auto base = model.consistency_forward(t, {left, right}, {0.5, 2.0},
                                          {cross_l, cross_r});
    VF right2 = ag::constant<float>(Mat<float>(
        right.val() + randn<float>(rng, right.rows(), right.cols(), 1.0f)));
    auto moved = model.consistency_forward(t, {left, right2}, {0.5, 2.0},
                                           {cross_l, cross_r});
    CHECK((base[0].val() - moved[0].val()).cwiseAbs().maxCoeff() <= 1e-6f);
    CHECK((base[1].val() - moved[1].val()).cwiseAbs().maxCoeff() > 0.0f);

    // The right chunk's sigma must not leak left either.
    auto resig = model.consistency_forward(t, {left, right}, {0.5, 7.0},
                                           {cross_l, cross_r});
    CHECK((base[0].val() - resig[0].val()).cwiseAbs().maxCoeff() <= 1e-6f);
  }

  SUBCASE("single-chunk call equals the left half of a pair call") {
    auto pair = model.consistency_forward(t, {left, right}, {1.3, 0.9},
                                          {cross_l, cross_r});
    auto solo = model.consistency_forward(t, {left}, {1.3}, {cross_l});
    REQUIRE(solo.size() == 1);
    CHECK((pair[0].val() - solo[0].val()).cwiseAbs().maxCoeff() <= 1e-6f);
  }

  SUBCASE("cross-connections influence the output") {
    auto base = model.consistency_forward(t, {left}, {1.0}, {cross_l});
    auto cross_live = zero_cross(cfg);
    cross_live[2] = ag::constant<float>(Mat<float>(Mat<float>::Constant(
        cfg.channels[2], (Index(cfg.spec_length) * cfg.freq_bins()) >> 4, 0.7f)));
    auto moved = model.consistency_forward(t, {left}, {1.0}, {cross_live});
    CHECK((base[0].val() - moved[0].val()).cwiseAbs().maxCoeff() > 0.0f);
  }

  SUBCASE("argument validation") {
    CHECK_THROWS_AS(model.consistency_forward(t, {left, right}, {0.5},
                                              {cross_l, cross_r}),
                    Error);
    CHECK_THROWS_AS(model.consistency_forward(t, {left}, {0.5}, {}), Error);
    CHECK_THROWS_AS(model.consistency_forward(t, {left}, {1000.0}, {cross_l}),
                    Error);
  }
}

TEST_CASE("cm_evals counts consistency evaluations, not chunks") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 4);
  ag::Tape<float> t(false);
  VF a = random_chunk(rng, cfg);
  VF b = random_chunk(rng, cfg);
  CHECK(model.cm_evals == 0);
  model.consistency_forward(t, {a}, {0.7}, {zero_cross(cfg)});
  CHECK(model.cm_evals == 1);
  model.consistency_forward(t, {a, b}, {0.7, 0.9}, {zero_cross(cfg), zero_cross(cfg)});
  CHECK(model.cm_evals == 2);
}

TEST_CASE("swapping two summary queries permutes latents and nothing else") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 5);
  ag::Tape<float> t(false);

  VF chunk = random_chunk(rng, cfg);
  Mat<float> lat_before = model.enc.encode_chunk(t, chunk).val();

  Mat<float> q = model.enc.queries.value;
  q.row(0).swap(q.row(2));
  model.enc.queries.value = q;
  Mat<float> lat_after = model.enc.encode_chunk(t, chunk).val();

  // The K embeddings are distinguished only by their queries: swapping queries
  // swaps latent rows.
  Mat<float> expected = lat_before;
  expected.row(0).swap(expected.row(2));
  CHECK((lat_after - expected).cwiseAbs().maxCoeff() <= 1e-6f);

  // The decoder consumes latent rows symmetrically (no slot embedding), so the
  // row swap does not change the features: the swapped model is functionally
  // identical end to end.
  auto f1 = model.dec.features(t, ag::constant<float>(Mat<float>(lat_before)));
  auto f2 = model.dec.features(t, ag::constant<float>(Mat<float>(expected)));
  for (std::size_t l = 0; l < f1.size(); ++l) {
    const float scale = std::max(1.0f, f1[l].val().cwiseAbs().maxCoeff());
    CHECK((f1[l].val() - f2[l].val()).cwiseAbs().maxCoeff() <= 1e-6f * scale);
  }
}

TEST_CASE("use_c_in rescales the network input only") {
  ModelConfig cfg = toy_preset();
  cfg.use_c_in = true;
  AutoEncoder<float> with(cfg);
  ModelConfig cfg2 = toy_preset();
  AutoEncoder<float> without(cfg2);
  auto rng = Rng::stream(21, 6);
  ag::Tape<float> t(false);
  VF chunk = random_chunk(rng, cfg);

  // Same seed -> same weights; only the preconditioning differs.
  auto a = with.consistency_forward(t, {chunk}, {2.0}, {zero_cross(cfg)});
  auto b = without.consistency_forward(t, {chunk}, {2.0}, {zero_cross(cfg2)});
  CHECK((a[0].val() - b[0].val()).cwiseAbs().maxCoeff() > 0.0f);

  // At sigma_min the boundary condition holds regardless of c_in.
  auto c = with.consistency_forward(t, {chunk}, {cfg.sigma_min}, {zero_cross(cfg)});
  CHECK((c[0].val() - chunk.val()).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("no NaN or Inf anywhere in a full forward pass") {
  ModelConfig cfg = toy_preset();
  AutoEncoder<float> model(cfg);
  auto rng = Rng::stream(21, 7);
  ag::Tape<float> t(false);

  VF chunk = random_chunk(rng, cfg, 1.0f);
  VF lat = model.enc.encode_chunk(t, chunk);
  CHECK(all_finite(lat.val()));
  auto feats = model.dec.features(t, lat);
  for (auto& f : feats) CHECK(all_finite(f.val()));
  std::vector<VF> noisy = {ag::constant<float>(Mat<float>(
      chunk.val() + randn<float>(rng, chunk.rows(), chunk.cols(), 5.0f)))};
  auto out = model.consistency_forward(t, noisy, {5.0}, {feats});
  CHECK(all_finite(out[0].val()));
}

TEST_CASE("paper-scale parameter count is within 20% of 1e8") {
  ModelConfig cfg = paper_preset();
  AutoEncoder<float> model(cfg);
  const double n = double(model.param_count());
  MESSAGE("paper parameter count: ", n);
  CHECK(n > 0.8e8);
  CHECK(n < 1.2e8);
}
