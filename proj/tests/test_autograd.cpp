#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <functional>
#include <vector>

#include "doctest.h"
#include "m2l2/autograd.hpp"
#include "m2l2/conv.hpp"

using namespace m2l2;
using VD = ag::Var<double>;
using MD = Mat<double>;

namespace {

Rng test_rng(std::uint64_t salt) { return Rng::stream(0xabcdef, salt); }

// Builds the graph from tracked leaves, backprops the scalar loss, and
// compares every input gradient against central finite differences.
double max_rel_err(const std::function<VD(std::vector<VD>&)>& fwd,
                   std::vector<MD> inputs, double h = 1e-6) {
  std::vector<VD> leaves;
  for (const auto& m : inputs) leaves.push_back(ag::leaf(MD(m)));
  VD loss = fwd(leaves);
  REQUIRE(loss.size() == 1);
  ag::backward(loss);

  auto eval = [&](const std::vector<MD>& vals) {
    std::vector<VD> ls;
    for (const auto& m : vals) ls.push_back(ag::leaf(MD(m)));
    return fwd(ls).val()(0, 0);
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    REQUIRE(leaves[i].node->has_grad);
    const MD& g = leaves[i].node->grad;
    for (Index r = 0; r < inputs[i].rows(); ++r) {
      for (Index c = 0; c < inputs[i].cols(); ++c) {
        auto hi = inputs;
        auto lo = inputs;
        hi[i](r, c) += h;
        lo[i](r, c) -= h;
        const double fd = (eval(hi) - eval(lo)) / (2 * h);
        const double an = g(r, c);
        worst = std::max(worst, std::abs(an - fd) /
                                    std::max({std::abs(an), std::abs(fd), 1.0}));
      }
    }
  }
  return worst;
}

// Random weighting collapses a matrix output to a scalar so all output
// entries participate in the check.
VD weighted_sum(const VD& x, Rng& rng) {
  return ag::sum(ag::mul(x, ag::constant(randn<double>(rng, x.rows(), x.cols()))));
}

constexpr double kTol = 1e-5;

}  // namespace

TEST_CASE("elementwise and affine ops") {
  auto rng = test_rng(1);
  MD a = randn<double>(rng, 3, 4);
  MD b = randn<double>(rng, 3, 4);
  MD r = randn<double>(rng, 1, 4);
  MD c = randn<double>(rng, 3, 1);

  auto w = [&](auto op) {
    return [&, op](std::vector<VD>& L) {
      auto rng2 = test_rng(2);
      return weighted_sum(op(L), rng2);
    };
  };

  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::add(L[0], L[1]); }), {a, b}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::sub(L[0], L[1]); }), {a, b}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::mul(L[0], L[1]); }), {a, b}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::axpby(0.7, L[0], -1.3, L[1]); }), {a, b}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::scale(L[0], -2.5); }), {a}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::add_scalar(L[0], 0.3); }), {a}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::add_rowvec(L[0], L[1]); }), {a, r}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::mul_rowvec(L[0], L[1]); }), {a, r}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::add_colvec(L[0], L[1]); }), {a, c}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::mul_colvec(L[0], L[1]); }), {a, c}) < kTol);
}

TEST_CASE("matmul all transpose combinations") {
  auto rng = test_rng(3);
  MD m34 = randn<double>(rng, 3, 4);
  MD m45 = randn<double>(rng, 4, 5);
  MD m43 = randn<double>(rng, 4, 3);
  MD m54 = randn<double>(rng, 5, 4);

  auto w = [&](bool ta, bool tb) {
    return [ta, tb](std::vector<VD>& L) {
      auto rng2 = test_rng(4);
      return weighted_sum(ag::matmul(L[0], L[1], ta, tb), rng2);
    };
  };
  CHECK(max_rel_err(w(false, false), {m34, m45}) < kTol);
  CHECK(max_rel_err(w(false, true), {m34, m54}) < kTol);
  CHECK(max_rel_err(w(true, false), {m43, m45}) < kTol);
  CHECK(max_rel_err(w(true, true), {m43, m54}) < kTol);
}

TEST_CASE("nonlinearities") {
  auto rng = test_rng(5);
  MD a = randn<double>(rng, 3, 5);
  MD pos = (randn<double>(rng, 2, 3).array().square() + 0.5).matrix();

  auto w = [&](auto op) {
    return [&, op](std::vector<VD>& L) {
      auto rng2 = test_rng(6);
      return weighted_sum(op(L[0]), rng2);
    };
  };
  CHECK(max_rel_err(w([](const VD& x) { return ag::silu(x); }), {a}) < kTol);
  CHECK(max_rel_err(w([](const VD& x) { return ag::gelu(x); }), {a}) < kTol);
  CHECK(max_rel_err(w([](const VD& x) { return ag::bounded_tanh(x); }), {a}) < kTol);
  CHECK(max_rel_err(w([](const VD& x) { return ag::sqrt_op(x); }), {pos}) < kTol);
  CHECK(max_rel_err(w([](const VD& x) { return ag::row_softmax(x); }), {a}) < kTol);
}

TEST_CASE("reductions") {
  auto rng = test_rng(7);
  MD a = randn<double>(rng, 4, 3);
  CHECK(max_rel_err([](std::vector<VD>& L) { return ag::sum(L[0]); }, {a}) < kTol);
  CHECK(max_rel_err([](std::vector<VD>& L) { return ag::mean(L[0]); }, {a}) < kTol);
  CHECK(max_rel_err([](std::vector<VD>& L) { return ag::sum_squares(L[0]); }, {a}) < kTol);
}

TEST_CASE("shape ops") {
  auto rng = test_rng(8);
  MD a = randn<double>(rng, 4, 6);
  MD b = randn<double>(rng, 2, 6);
  MD c = randn<double>(rng, 4, 3);

  auto w = [&](auto op) {
    return [&, op](std::vector<VD>& L) {
      auto rng2 = test_rng(9);
      return weighted_sum(op(L), rng2);
    };
  };
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::transpose(L[0]); }), {a}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::slice_rows(L[0], 1, 2); }), {a}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::slice_cols(L[0], 2, 3); }), {a}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::concat_rows(L[0], L[1]); }), {a, b}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::concat_cols(L[0], L[1]); }), {a, c}) < kTol);
  CHECK(max_rel_err(w([](std::vector<VD>& L) { return ag::reshape(L[0], 8, 3); }), {a}) < kTol);
}

TEST_CASE("normalization ops") {
  auto rng = test_rng(10);
  MD a = randn<double>(rng, 3, 8);
  MD f = randn<double>(rng, 8, 6);  // [C x P] for group norm, 4 groups of 2

  auto w = [&](auto op) {
    return [&, op](std::vector<VD>& L) {
      auto rng2 = test_rng(11);
      return weighted_sum(op(L[0]), rng2);
    };
  };
  CHECK(max_rel_err(w([](const VD& x) { return ag::layer_norm(x); }), {a}, 1e-5) < kTol);
  CHECK(max_rel_err(w([](const VD& x) { return ag::group_norm(x, 4); }), {f}, 1e-5) < kTol);
}

TEST_CASE("layer norm normalizes rows") {
  auto rng = test_rng(12);
  MD a = randn<double>(rng, 5, 16);
  VD y = ag::layer_norm(ag::constant(MD(a)));
  for (Index i = 0; i < y.rows(); ++i) {
    CHECK(std::abs(y.val().row(i).mean()) < 1e-12);
    CHECK(std::abs(y.val().row(i).squaredNorm() / 16.0 - 1.0) < 1e-4);
  }
}

TEST_CASE("conv2d gradients") {
  auto rng = test_rng(13);

  SUBCASE("3x3 stride 1 pad 1") {
    ag::ConvGeom g{2, 4, 5, 3, 3, 1, 1};
    MD x = randn<double>(rng, 2, 20);
    MD wt = randn<double>(rng, 3, 18);
    MD bs = randn<double>(rng, 3, 1);
    auto fwd = [g](std::vector<VD>& L) {
      auto rng2 = test_rng(14);
      return weighted_sum(ag::conv2d(L[0], L[1], L[2], g), rng2);
    };
    CHECK(max_rel_err(fwd, {x, wt, bs}) < kTol);
  }
  SUBCASE("2x2 stride 2 downsample") {
    ag::ConvGeom g{3, 4, 6, 2, 2, 2, 0};
    MD x = randn<double>(rng, 3, 24);
    MD wt = randn<double>(rng, 5, 12);
    MD bs = randn<double>(rng, 5, 1);
    auto fwd = [g](std::vector<VD>& L) {
      auto rng2 = test_rng(15);
      return weighted_sum(ag::conv2d(L[0], L[1], L[2], g), rng2);
    };
    CHECK(max_rel_err(fwd, {x, wt, bs}) < kTol);
  }
  SUBCASE("1x1 pointwise") {
    ag::ConvGeom g{4, 3, 3, 1, 1, 1, 0};
    MD x = randn<double>(rng, 4, 9);
    MD wt = randn<double>(rng, 2, 4);
    MD bs = randn<double>(rng, 2, 1);
    auto fwd = [g](std::vector<VD>& L) {
      auto rng2 = test_rng(16);
      return weighted_sum(ag::conv2d(L[0], L[1], L[2], g), rng2);
    };
    CHECK(max_rel_err(fwd, {x, wt, bs}) < kTol);
  }
}

TEST_CASE("conv2d matches direct convolution") {
  auto rng = test_rng(17);
  ag::ConvGeom g{2, 3, 4, 3, 3, 1, 1};
  MD x = randn<double>(rng, 2, 12);
  MD wt = randn<double>(rng, 3, 18);
  MD bs = randn<double>(rng, 3, 1);
  VD y = ag::conv2d(ag::constant(MD(x)), ag::constant(MD(wt)), ag::constant(MD(bs)), g);
  for (Index o = 0; o < 3; ++o) {
    for (Index h = 0; h < 3; ++h) {
      for (Index w = 0; w < 4; ++w) {
        double acc = bs(o, 0);
        for (Index ci = 0; ci < 2; ++ci)
          for (Index dh = 0; dh < 3; ++dh)
            for (Index dw = 0; dw < 3; ++dw) {
              Index hi = h - 1 + dh, wi = w - 1 + dw;
              if (hi < 0 || hi >= 3 || wi < 0 || wi >= 4) continue;
              acc += x(ci, hi * 4 + wi) * wt(o, (ci * 3 + dh) * 3 + dw);
            }
        CHECK(y.val()(o, h * 4 + w) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("3x3 fast path matches direct convolution on edge shapes") {
  auto rng = test_rng(19);
  // Degenerate one-row / one-column grids and a wider channel count, in both
  // precisions; the direct loop is the oracle.
  auto run = [&](Index C, Index Co, Index H, Index W, double tol) {
    ag::ConvGeom g{C, H, W, 3, 3, 1, 1};
    MD x = randn<double>(rng, C, H * W);
    MD wt = randn<double>(rng, Co, 9 * C);
    MD bs = randn<double>(rng, Co, 1);
    MD y = ag::detail::conv2d_value(x, wt, bs, g);
    Mat<float> yf = ag::detail::conv2d_value(
        Mat<float>(x.cast<float>()), Mat<float>(wt.cast<float>()),
        Mat<float>(bs.cast<float>()), g);
    for (Index o = 0; o < Co; ++o)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          double acc = bs(o, 0);
          for (Index ci = 0; ci < C; ++ci)
            for (Index dh = 0; dh < 3; ++dh)
              for (Index dw = 0; dw < 3; ++dw) {
                Index hi = h - 1 + dh, wi = w - 1 + dw;
                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                acc += x(ci, hi * W + wi) * wt(o, (ci * 3 + dh) * 3 + dw);
              }
          CHECK(y(o, h * W + w) == doctest::Approx(acc).epsilon(tol));
          CHECK(double(yf(o, h * W + w)) == doctest::Approx(acc).epsilon(1e-4));
        }
  };
  run(16, 8, 7, 9, 1e-12);
  run(4, 3, 1, 5, 1e-12);
  run(4, 3, 5, 1, 1e-12);
  run(3, 2, 1, 1, 1e-12);
}

TEST_CASE("upsample_nearest2") {
  auto rng = test_rng(18);
  MD x = randn<double>(rng, 3, 6);  // C=3, H=2, W=3
  auto fwd = [](std::vector<VD>& L) {
    auto rng2 = test_rng(19);
    return weighted_sum(ag::upsample_nearest2(L[0], 2, 3), rng2);
  };
  CHECK(max_rel_err(fwd, {x}) < kTol);

  VD y = ag::upsample_nearest2(ag::constant(MD(x)), 2, 3);
  CHECK(y.cols() == 24);
  // (c, h, w) -> all four children equal the parent
  for (Index c = 0; c < 3; ++c)
    for (Index h = 0; h < 2; ++h)
      for (Index w = 0; w < 3; ++w) {
        double v = x(c, h * 3 + w);
        CHECK(y.val()(c, (2 * h) * 6 + 2 * w) == v);
        CHECK(y.val()(c, (2 * h) * 6 + 2 * w + 1) == v);
        CHECK(y.val()(c, (2 * h + 1) * 6 + 2 * w) == v);
        CHECK(y.val()(c, (2 * h + 1) * 6 + 2 * w + 1) == v);
      }
}

TEST_CASE("detach blocks gradient flow") {
  auto rng = test_rng(20);
  MD a = randn<double>(rng, 2, 2);
  VD x = ag::leaf(MD(a));
  VD loss = ag::sum(ag::mul(x, ag::detach(x)));  // d/dx = detached value only
  ag::backward(loss);
  CHECK((x.node->grad - a).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("reused subexpression accumulates gradient") {
  MD a = MD::Constant(2, 2, 3.0);
  VD x = ag::leaf(MD(a));
  VD loss = ag::sum(ag::add(x, x));  // dL/dx = 2
  ag::backward(loss);
  CHECK((x.node->grad.array() - 2.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("tape binds parameters once and flushes deterministically") {
  auto rng = test_rng(21);
  ag::Param<double> p("p", randn<double>(rng, 2, 3));
  ag::Tape<double> tape(true);
  VD a = tape.use(p);
  VD b = tape.use(p);
  CHECK(a.node.get() == b.node.get());  // same leaf, grads merge there
  VD loss = ag::sum(ag::add(a, b));
  ag::backward(loss);
  tape.flush_grads();
  CHECK((p.grad.array() - 2.0).abs().maxCoeff() < 1e-14);

  ag::Tape<double> frozen(false);
  VD c = frozen.use(p);
  CHECK(!c.tracked());
  CHECK(c.value.get() == &p.value);  // aliases, no copy
}

TEST_CASE("backward rejects non-scalar loss and untracked roots") {
  VD v = ag::constant(MD(MD::Ones(2, 2)));
  CHECK_THROWS_AS(ag::backward(v), Error);
  VD t = ag::leaf(MD(MD::Ones(2, 2)));
  CHECK_THROWS_AS(ag::backward(t), Error);
}

TEST_CASE("bounded_tanh stays strictly inside (-1,1)") {
  MD big(1, 3);
  big << 100.0, -100.0, 0.0;
  VD y = ag::bounded_tanh(ag::constant(MD(big)));
  CHECK(y.val()(0, 0) < 1.0);
  CHECK(y.val()(0, 1) > -1.0);
  CHECK(y.val()(0, 2) == 0.0);

  Mat<float> bigf(1, 2);
  bigf << 50.0f, -50.0f;
  auto yf = ag::bounded_tanh(ag::constant<float>(Mat<float>(bigf)));
  CHECK(yf.val()(0, 0) < 1.0f);
  CHECK(yf.val()(0, 1) > -1.0f);
}

TEST_CASE("masked softmax yields exact zeros") {
  MD scores = MD::Ones(2, 2);
  const double ninf = -std::numeric_limits<double>::infinity();
  MD bias(2, 2);
  bias << 0, ninf, 0, 0;
  VD y = ag::row_softmax(ag::add(ag::constant(MD(scores)), ag::constant(MD(bias))));
  CHECK(y.val()(0, 1) == 0.0);
  CHECK(y.val()(0, 0) == 1.0);
  CHECK(y.val()(1, 0) == doctest::Approx(0.5));
}
