#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "bcr/br.hpp"
#include "bcr/gradcheck.hpp"
#include "bcr/tensor.hpp"
#include "bcr/tensor_ops.hpp"

using bcr::Rng;
using bcr::Tensor;
namespace ad = bcr::ad;

namespace {

void fill_uniform(Tensor<double>& t, Rng& rng, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.same_shape(b));
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Zeroes every parameter of a BR stack.
void zero_params(bcr::BRParams<double>& p) {
  std::vector<ad::VarPtr<double>> all;
  p.collect(&all);
  for (auto& v : all) v->value.fill(0.0);
}

/// One unrolled descent level computed from the raw kernels: resize, gate,
/// conv, forward attention, fusion. Independent of the graph ops.
Tensor<double> unrolled_level(const Tensor<double>& f_l,
                              const Tensor<double>& f_next,
                              const bcr::BRLevelParams<double>& lp) {
  auto ra_up = bcr::bilinear_resize(f_next, f_l.dim(0), f_l.dim(1));
  Tensor<double> gated(f_l.shape());
  for (int64_t i = 0; i < gated.numel(); ++i) {
    gated[i] = (1.0 - bcr::sigmoid_scalar(ra_up[i])) * f_l[i];
  }
  auto ra = bcr::conv2d(gated, lp.rev_w->value, lp.rev_b->value, 1, 1);
  auto stats =
      bcr::concat_channels(bcr::channel_mean(f_l), bcr::channel_max(f_l));
  auto gate =
      bcr::sigmoid(bcr::conv2d(stats, lp.gate_w->value, lp.gate_b->value, 1, 1));
  Tensor<double> fa(f_l.shape());
  const int H = f_l.dim(0), W = f_l.dim(1), C = f_l.dim(2);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < C; ++c)
        fa.at(i, j, c) = f_l.at(i, j, c) * gate.at(i, j, 0);
  const double l1 = lp.lambda->value[0], l2 = lp.lambda->value[1],
               l3 = lp.lambda->value[2];
  Tensor<double> out(f_l.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = l1 * ra[i] + l2 * fa[i] + l3 * ra_up[i];
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Components
// ---------------------------------------------------------------------------

TEST_CASE("seed conv on the top level") {
  Rng rng(401);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);

  SUBCASE("zero everything gives a zero seed") {
    zero_params(p);
    Tensor<double> f({3, 3, 2});
    auto seed = bcr::init_reverse(ad::constant(f), p);
    for (int64_t i = 0; i < seed->value.numel(); ++i) {
      CHECK(seed->value[i] == 0.0);
    }
  }

  SUBCASE("identity kernel passes the input through") {
    zero_params(p);
    // center tap = identity over channels
    p.init_w->value.at(1, 1, 0, 0) = 1.0;
    p.init_w->value.at(1, 1, 1, 1) = 1.0;
    Tensor<double> f({4, 5, 2});
    fill_uniform(f, rng, -1, 1);
    auto seed = bcr::init_reverse(ad::constant(f), p);
    CHECK(max_abs_diff(seed->value, f) == 0.0);
  }

  SUBCASE("random input equals the bare conv") {
    Tensor<double> f({4, 4, 2});
    fill_uniform(f, rng, -1, 1);
    auto seed = bcr::init_reverse(ad::constant(f), p);
    auto want = bcr::conv2d(f, p.init_w->value, p.init_b->value, 1, 1);
    CHECK(max_abs_diff(seed->value, want) == 0.0);
  }
}

TEST_CASE("reverse attention gating saturates correctly") {
  Rng rng(402);
  auto p = bcr::BRParams<double>::init({3, 3}, rng);
  const auto& lp = p.levels[0];
  Tensor<double> f({5, 5, 3});
  fill_uniform(f, rng, -1, 1);

  SUBCASE("strongly negative carry leaves the level unmodulated") {
    Tensor<double> neg({5, 5, 3}, -40.0);
    auto [ra, ra_up] =
        bcr::reverse_attention(ad::constant(f), ad::constant(neg), lp);
    auto want = bcr::conv2d(f, lp.rev_w->value, lp.rev_b->value, 1, 1);
    CHECK(max_abs_diff(ra->value, want) <= 1e-9);
    CHECK(max_abs_diff(ra_up->value, neg) == 0.0);
  }

  SUBCASE("strongly positive carry suppresses the level to the bias") {
    Tensor<double> pos({5, 5, 3}, 40.0);
    fill_uniform(lp.rev_b->value, rng, -1, 1);
    auto [ra, ra_up] =
        bcr::reverse_attention(ad::constant(f), ad::constant(pos), lp);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j)
        for (int c = 0; c < 3; ++c) {
          CHECK(ra->value.at(i, j, c) ==
                doctest::Approx(lp.rev_b->value[c]).epsilon(1e-9));
        }
  }

  SUBCASE("channel mismatch is rejected") {
    Tensor<double> wrong({3, 3, 2});
    CHECK_THROWS_AS(
        bcr::reverse_attention(ad::constant(f), ad::constant(wrong), lp),
        std::invalid_argument);
  }

  SUBCASE("gate values stay inside (0, 1)") {
    Tensor<double> carry({2, 3, 3});
    fill_uniform(carry, rng, -30, 30);
    auto up = bcr::bilinear_resize(carry, 5, 5);
    for (int64_t i = 0; i < up.numel(); ++i) {
      const double w = 1.0 - bcr::sigmoid_scalar(up[i]);
      CHECK(w > 0.0);
      CHECK(w < 1.0);
    }
  }
}

TEST_CASE("forward attention closed forms") {
  Rng rng(403);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);
  auto& lp = p.levels[0];
  Tensor<double> f({4, 4, 2});
  fill_uniform(f, rng, -2, 2);

  SUBCASE("zero gate conv halves the features") {
    lp.gate_w->value.fill(0.0);
    lp.gate_b->value.fill(0.0);
    auto fa = bcr::forward_attention(ad::constant(f), lp);
    Tensor<double> want(f.shape());
    for (int64_t i = 0; i < f.numel(); ++i) want[i] = 0.5 * f[i];
    CHECK(max_abs_diff(fa->value, want) <= 1e-15);
  }

  SUBCASE("zero input maps to zero") {
    Tensor<double> z({4, 4, 2});
    auto fa = bcr::forward_attention(ad::constant(z), lp);
    for (int64_t i = 0; i < fa->value.numel(); ++i) {
      CHECK(fa->value[i] == 0.0);
    }
  }

  SUBCASE("random input matches the composed primitives") {
    auto fa = bcr::forward_attention(ad::constant(f), lp);
    auto stats =
        bcr::concat_channels(bcr::channel_mean(f), bcr::channel_max(f));
    auto gate = bcr::sigmoid(
        bcr::conv2d(stats, lp.gate_w->value, lp.gate_b->value, 1, 1));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int c = 0; c < 2; ++c) {
          CHECK(fa->value.at(i, j, c) ==
                doctest::Approx(f.at(i, j, c) * gate.at(i, j, 0))
                    .epsilon(1e-12));
        }
  }
}

TEST_CASE("fusion respects the coefficients") {
  Rng rng(404);
  Tensor<double> a({3, 3, 2}), b({3, 3, 2}), c({3, 3, 2});
  fill_uniform(a, rng, -1, 1);
  fill_uniform(b, rng, -1, 1);
  fill_uniform(c, rng, -1, 1);
  auto va = ad::constant(a), vb = ad::constant(b), vc = ad::constant(c);

  auto lam100 = ad::constant(Tensor<double>({3}, std::vector<double>{1, 0, 0}));
  CHECK(max_abs_diff(bcr::fuse(va, vb, vc, lam100)->value, a) == 0.0);

  auto lam001 = ad::constant(Tensor<double>({3}, std::vector<double>{0, 0, 1}));
  CHECK(max_abs_diff(bcr::fuse(va, vb, vc, lam001)->value, c) == 0.0);

  auto lam111 = ad::constant(Tensor<double>({3}, std::vector<double>{1, 1, 1}));
  auto tripled = bcr::fuse(va, va, va, lam111);
  Tensor<double> want(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) want[i] = 3 * a[i];
  CHECK(max_abs_diff(tripled->value, want) <= 1e-15);
}

// ---------------------------------------------------------------------------
// Full descent
// ---------------------------------------------------------------------------

TEST_CASE("zero-parameter descent with pass-through fusion halves each level") {
  Rng rng(405);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);
  zero_params(p);
  for (auto& lp : p.levels) {
    lp.lambda->value = Tensor<double>({3}, std::vector<double>{0, 1, 0});
  }
  Tensor<double> f0({8, 8, 2}), f1({4, 4, 2});
  fill_uniform(f0, rng, -1, 1);
  fill_uniform(f1, rng, -1, 1);
  auto out = bcr::refine_pyramid<double>(
      {ad::constant(f0), ad::constant(f1)}, p);
  REQUIRE(out.size() == 2);
  Tensor<double> h0(f0.shape()), h1(f1.shape());
  for (int64_t i = 0; i < f0.numel(); ++i) h0[i] = 0.5 * f0[i];
  for (int64_t i = 0; i < f1.numel(); ++i) h1[i] = 0.5 * f1[i];
  CHECK(max_abs_diff(out[0]->value, h0) <= 1e-15);
  CHECK(max_abs_diff(out[1]->value, h1) <= 1e-15);
}

TEST_CASE("descent preserves pyramid extents") {
  Rng rng(406);
  auto p = bcr::BRParams<double>::init({3, 3, 3}, rng);
  Tensor<double> f0({16, 12, 3}), f1({8, 6, 3}), f2({4, 3, 3});
  fill_uniform(f0, rng, -1, 1);
  fill_uniform(f1, rng, -1, 1);
  fill_uniform(f2, rng, -1, 1);
  auto out = bcr::refine_pyramid<double>(
      {ad::constant(f0), ad::constant(f1), ad::constant(f2)}, p);
  REQUIRE(out.size() == 3);
  CHECK(out[0]->value.same_shape(f0));
  CHECK(out[1]->value.same_shape(f1));
  CHECK(out[2]->value.same_shape(f2));
  for (const auto& o : out) CHECK(o->value.all_finite());
}

TEST_CASE("descent equals the hand-unrolled two-level computation") {
  Rng rng(407);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);
  // make the lambdas unequal so ordering mistakes cannot cancel
  p.levels[0].lambda->value = Tensor<double>({3}, std::vector<double>{0.7, 0.2, 0.1});
  p.levels[1].lambda->value = Tensor<double>({3}, std::vector<double>{0.1, 0.5, 0.4});
  Tensor<double> f0({6, 6, 2}), f1({3, 3, 2});
  fill_uniform(f0, rng, -1, 1);
  fill_uniform(f1, rng, -1, 1);

  auto got = bcr::refine_pyramid<double>(
      {ad::constant(f0), ad::constant(f1)}, p);

  auto seed = bcr::conv2d(f1, p.init_w->value, p.init_b->value, 1, 1);
  auto top = unrolled_level(f1, seed, p.levels[1]);
  auto bottom = unrolled_level(f0, top, p.levels[0]);
  CHECK(max_abs_diff(got[1]->value, top) <= 1e-12);
  CHECK(max_abs_diff(got[0]->value, bottom) <= 1e-12);
}

TEST_CASE("branch toggles prune the corresponding terms") {
  Rng rng(408);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);
  Tensor<double> f0({6, 6, 2}), f1({3, 3, 2});
  fill_uniform(f0, rng, -1, 1);
  fill_uniform(f1, rng, -1, 1);
  std::vector<ad::VarPtr<double>> pyr{ad::constant(f0), ad::constant(f1)};

  SUBCASE("forward branch off") {
    auto out = bcr::refine_pyramid<double>(pyr, p, /*fa_on=*/false,
                                           /*ra_on=*/true);
    // reconstruct: lambda0 * RA + lambda2 * RA_up at the top level
    auto seed = bcr::conv2d(f1, p.init_w->value, p.init_b->value, 1, 1);
    auto ra_up = bcr::bilinear_resize(seed, 3, 3);
    Tensor<double> gated(f1.shape());
    for (int64_t i = 0; i < gated.numel(); ++i) {
      gated[i] = (1.0 - bcr::sigmoid_scalar(ra_up[i])) * f1[i];
    }
    auto ra = bcr::conv2d(gated, p.levels[1].rev_w->value,
                          p.levels[1].rev_b->value, 1, 1);
    const double l1 = p.levels[1].lambda->value[0];
    const double l3 = p.levels[1].lambda->value[2];
    Tensor<double> want(f1.shape());
    for (int64_t i = 0; i < want.numel(); ++i) {
      want[i] = l1 * ra[i] + l3 * ra_up[i];
    }
    CHECK(max_abs_diff(out[1]->value, want) <= 1e-12);
  }

  SUBCASE("reverse branch off") {
    auto out = bcr::refine_pyramid<double>(pyr, p, /*fa_on=*/true,
                                           /*ra_on=*/false);
    auto fa = bcr::forward_attention(ad::constant(f0), p.levels[0]);
    const double l2 = p.levels[0].lambda->value[1];
    Tensor<double> want(f0.shape());
    for (int64_t i = 0; i < want.numel(); ++i) want[i] = l2 * fa->value[i];
    CHECK(max_abs_diff(out[0]->value, want) <= 1e-12);
  }

  SUBCASE("both branches off passes the pyramid through") {
    auto out = bcr::refine_pyramid<double>(pyr, p, false, false);
    CHECK(max_abs_diff(out[0]->value, f0) == 0.0);
    CHECK(max_abs_diff(out[1]->value, f1) == 0.0);
  }
}

TEST_CASE("descent gradients pass central differences") {
  Rng rng(409);
  auto p = bcr::BRParams<double>::init({2, 2}, rng);
  Tensor<double> f0t({6, 6, 2}), f1t({3, 3, 2});
  fill_uniform(f0t, rng, -1, 1);
  fill_uniform(f1t, rng, -1, 1);
  auto f0 = ad::param(f0t, "f0");
  auto f1 = ad::param(f1t, "f1");

  std::vector<ad::VarPtr<double>> params{f0, f1};
  p.collect(&params);

  auto fn = [&]() {
    auto out = bcr::refine_pyramid<double>({f0, f1}, p);
    return ad::combine_scalars<double>(
        {{1.0, ad::sum_squares(out[0])}, {1.0, ad::sum_squares(out[1])}});
  };
  auto reports = bcr::grad_check<double>(fn, params);
  for (const auto& r : reports) {
    INFO(r.name, " max_rel=", r.max_rel, " max_abs=", r.max_abs);
    CHECK(r.pass);
  }
}
