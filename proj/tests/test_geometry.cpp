#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "bcr/geometry.hpp"
#include "bcr/gradcheck.hpp"
#include "bcr/tensor.hpp"

using bcr::Box;
using bcr::RotatedBox;
using bcr::Rng;
using bcr::ScaleJitter;
using bcr::Tensor;
namespace ad = bcr::ad;

namespace {

constexpr double kPi = 3.141592653589793;

void fill_uniform(Tensor<double>& t, Rng& rng, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

/// Distance between two undirected axis angles, in radians on [0, pi/2].
double axis_distance(double a, double b) {
  double d = std::fmod(std::abs(a - b), kPi);
  return std::min(d, kPi - d);
}

/// Orientation from raw second-order image moments, written independently of
/// the covariance-eigenvector path: psi is the major-axis angle from +x,
/// converted to the vertical-is-zero convention used by the library.
double moment_oracle(const Tensor<double>& p) {
  const int H = p.dim(0), W = p.dim(1);
  double s = 0, sx = 0, sy = 0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      s += p.at(i, j);
      sx += p.at(i, j) * (j + 0.5);
      sy += p.at(i, j) * (i + 0.5);
    }
  const double cx = sx / s, cy = sy / s;
  double u20 = 0, u02 = 0, u11 = 0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double dx = (j + 0.5) - cx, dy = (i + 0.5) - cy;
      u20 += p.at(i, j) * dx * dx;
      u02 += p.at(i, j) * dy * dy;
      u11 += p.at(i, j) * dx * dy;
    }
  const double psi = 0.5 * std::atan2(2 * u11, u20 - u02);
  double theta = -std::atan2(std::cos(psi), std::sin(psi));
  if (theta <= -kPi / 2) theta += kPi;
  if (theta > kPi / 2) theta -= kPi;
  return theta;
}

/// Paints a binary bar of the given half-length/half-width through the map
/// center, long axis at angle phi from vertical (phi=0 -> vertical).
Tensor<double> paint_bar(int size, double phi, double half_len,
                         double half_wid) {
  Tensor<double> p({size, size});
  const double cx = size / 2.0, cy = size / 2.0;
  const double ax = -std::sin(phi), ay = std::cos(phi);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double dx = (j + 0.5) - cx, dy = (i + 0.5) - cy;
      const double along = dx * ax + dy * ay;
      const double across = dx * ay - dy * ax;
      if (std::abs(along) <= half_len && std::abs(across) <= half_wid) {
        p.at(i, j) = 1.0;
      }
    }
  return p;
}

/// Dense RoI align reference: every sample point evaluated with its own
/// bilinear formula over explicitly enumerated corners.
Tensor<double> oracle_align(const Tensor<double>& feat, double cx, double cy,
                            double w, double h, double theta, int out,
                            int ratio) {
  const int H = feat.dim(0), W = feat.dim(1), C = feat.dim(2);
  Tensor<double> res({out, out, C});
  auto read = [&](int y, int x, int c) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return feat.at(y, x, c);
  };
  for (int gy = 0; gy < out; ++gy)
    for (int gx = 0; gx < out; ++gx)
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int sy = 0; sy < ratio; ++sy)
          for (int sx = 0; sx < ratio; ++sx) {
            const double u =
                (gx + (sx + 0.5) / ratio) * (w / out) - 0.5 * w;
            const double v =
                (gy + (sy + 0.5) / ratio) * (h / out) - 0.5 * h;
            const double x = cx + std::cos(theta) * u - std::sin(theta) * v;
            const double y = cy + std::sin(theta) * u + std::cos(theta) * v;
            const double px = x - 0.5, py = y - 0.5;
            const double fx = px - std::floor(px), fy = py - std::floor(py);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            acc += (1 - fy) * ((1 - fx) * read(y0, x0, c) +
                               fx * read(y0, x0 + 1, c)) +
                   fy * ((1 - fx) * read(y0 + 1, x0, c) +
                         fx * read(y0 + 1, x0 + 1, c));
          }
        res.at(gy, gx, c) = acc / (ratio * ratio);
      }
  return res;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.same_shape(b));
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Box algebra
// ---------------------------------------------------------------------------

TEST_CASE("iou on the reference cases and random properties") {
  CHECK(bcr::iou({0, 0, 2, 2}, {1, 1, 3, 3}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(bcr::iou({3, 4, 7, 9}, {3, 4, 7, 9}) == doctest::Approx(1.0));
  CHECK(bcr::iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
  // touching edges have zero intersection area
  CHECK(bcr::iou({0, 0, 1, 1}, {1, 0, 2, 1}) == 0.0);

  Rng rng(201);
  for (int i = 0; i < 300; ++i) {
    Box a{rng.uniform(0, 10), rng.uniform(0, 10), 0, 0};
    Box b{rng.uniform(0, 10), rng.uniform(0, 10), 0, 0};
    a.x2 = a.x1 + rng.uniform(0.1, 8);
    a.y2 = a.y1 + rng.uniform(0.1, 8);
    b.x2 = b.x1 + rng.uniform(0.1, 8);
    b.y2 = b.y1 + rng.uniform(0.1, 8);
    const double ab = bcr::iou(a, b);
    CHECK(ab == doctest::Approx(bcr::iou(b, a)).epsilon(1e-14));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("scale jitter preserves the center and scales extents") {
  const Box b{8, 8, 12, 12};
  const Box j1 = bcr::scale_jitter(b, {1.1, 0.9});
  CHECK(j1.x1 == doctest::Approx(7.8).epsilon(1e-12));
  CHECK(j1.y1 == doctest::Approx(8.2).epsilon(1e-12));
  CHECK(j1.x2 == doctest::Approx(12.2).epsilon(1e-12));
  CHECK(j1.y2 == doctest::Approx(11.8).epsilon(1e-12));

  const Box j2 = bcr::scale_jitter(b, {0.9, 1.1});
  CHECK(j2.x1 == doctest::Approx(8.2).epsilon(1e-12));
  CHECK(j2.y1 == doctest::Approx(7.8).epsilon(1e-12));
  CHECK(j2.x2 == doctest::Approx(11.8).epsilon(1e-12));
  CHECK(j2.y2 == doctest::Approx(12.2).epsilon(1e-12));

  const Box id = bcr::scale_jitter(b, {1.0, 1.0});
  CHECK(id.x1 == b.x1);
  CHECK(id.y2 == b.y2);

  Rng rng(202);
  for (int i = 0; i < 500; ++i) {
    Box r{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
    r.x2 = r.x1 + rng.uniform(0.5, 30);
    r.y2 = r.y1 + rng.uniform(0.5, 30);
    ScaleJitter j{rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1)};
    const Box s = bcr::scale_jitter(r, j);
    CHECK(s.cx() == doctest::Approx(r.cx()).epsilon(1e-12));
    CHECK(s.cy() == doctest::Approx(r.cy()).epsilon(1e-12));
    CHECK(s.area() == doctest::Approx(r.area() * j.dx * j.dy).epsilon(1e-10));
  }
}

TEST_CASE("axis-aligned to rotated conversion") {
  const RotatedBox r = bcr::to_rotated({8, 8, 12, 12}, kPi / 4);
  CHECK(r.cx == 10.0);
  CHECK(r.cy == 10.0);
  CHECK(r.w == 4.0);
  CHECK(r.h == 4.0);
  CHECK(r.theta == kPi / 4);

  const RotatedBox z = bcr::to_rotated({1, 2, 4, 8}, 0.0);
  CHECK(z.cx - z.w / 2 == doctest::Approx(1.0));
  CHECK(z.cy - z.h / 2 == doctest::Approx(2.0));
  CHECK(z.cx + z.w / 2 == doctest::Approx(4.0));
  CHECK(z.cy + z.h / 2 == doctest::Approx(8.0));
}

// ---------------------------------------------------------------------------
// Channel compression and principal orientation
// ---------------------------------------------------------------------------

TEST_CASE("channel compression is mean-then-rectify") {
  Rng rng(203);
  Tensor<double> one({3, 3, 1});
  fill_uniform(one, rng, 0, 2);
  auto c1 = bcr::compress_channels(one);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(c1.at(i, j) == one.at(i, j, 0));

  Tensor<double> neg({2, 2, 3}, -1.0);
  auto cn = bcr::compress_channels(neg);
  for (int64_t i = 0; i < cn.numel(); ++i) CHECK(cn[i] == 0.0);

  Tensor<double> x({4, 5, 3});
  fill_uniform(x, rng, -1, 1);
  auto cx = bcr::compress_channels(x);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += x.at(i, j, c);
      CHECK(cx.at(i, j) == doctest::Approx(std::max(s / 3, 0.0)).epsilon(1e-12));
    }
}

TEST_CASE("principal orientation conventions") {
  // vertical mass -> 0
  Tensor<double> vert({9, 9});
  for (int i = 1; i < 8; ++i) vert.at(i, 4) = 1.0;
  CHECK(bcr::principal_orientation(vert) == doctest::Approx(0.0).epsilon(1e-12));

  // horizontal mass -> pi/2 (folded)
  Tensor<double> horiz({9, 9});
  for (int j = 1; j < 8; ++j) horiz.at(4, j) = 1.0;
  CHECK(std::abs(bcr::principal_orientation(horiz)) ==
        doctest::Approx(kPi / 2).epsilon(1e-9));

  // mass on the diagonal y = x -> -pi/4
  Tensor<double> diag({9, 9});
  for (int i = 0; i < 9; ++i) diag.at(i, i) = 1.0;
  CHECK(bcr::principal_orientation(diag) ==
        doctest::Approx(-kPi / 4).epsilon(1e-9));

  // isotropic disc: eigenvalue tie -> 0
  Tensor<double> disc({21, 21});
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 21; ++j) {
      const double dx = j - 10.0, dy = i - 10.0;
      if (dx * dx + dy * dy <= 64.0) disc.at(i, j) = 1.0;
    }
  CHECK(bcr::principal_orientation(disc) == 0.0);

  // all-zero map raises
  Tensor<double> zero({5, 5});
  CHECK_THROWS_AS(bcr::principal_orientation(zero), bcr::DegenerateOrientation);

  // intensity-scale invariance
  auto bar = paint_bar(33, 0.4, 12, 2);
  Tensor<double> scaled = bar;
  for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] *= 7.25;
  CHECK(bcr::principal_orientation(bar) ==
        doctest::Approx(bcr::principal_orientation(scaled)).epsilon(1e-12));
}

TEST_CASE("principal orientation recovers painted bar angles") {
  for (double deg : {-80.0, -55.0, -25.0, -10.0, 0.0, 10.0, 25.0, 40.0, 55.0,
                     70.0, 88.0}) {
    const double phi = deg * kPi / 180.0;
    auto bar = paint_bar(41, phi, 15, 2.5);
    const double got = bcr::principal_orientation(bar);
    CHECK(axis_distance(got, phi) < 3.0 * kPi / 180.0);
    // agreement with the raw-moment reference
    CHECK(axis_distance(got, moment_oracle(bar)) < 1e-6);
  }
}

TEST_CASE("principal orientation is equivariant under quarter turns") {
  Rng rng(204);
  auto bar = paint_bar(33, 0.3, 12, 3);
  // jitter the weights so nothing is perfectly symmetric
  for (int64_t i = 0; i < bar.numel(); ++i) {
    if (bar[i] > 0) bar[i] += rng.uniform(0, 0.1);
  }
  Tensor<double> rot({33, 33});
  // (i, j) -> (j, size-1-i) rotates the image by 90 degrees
  for (int i = 0; i < 33; ++i)
    for (int j = 0; j < 33; ++j) rot.at(j, 32 - i) = bar.at(i, j);
  const double a = bcr::principal_orientation(bar);
  const double b = bcr::principal_orientation(rot);
  CHECK(axis_distance(a + kPi / 2, b) < 1e-9);
}

// ---------------------------------------------------------------------------
// RoI align
// ---------------------------------------------------------------------------

TEST_CASE("roi align on constant and affine maps") {
  Tensor<double> cmap({10, 12, 2});
  cmap.fill(3.25);
  auto pooled = bcr::roi_align(cmap, {1.3, 2.1, 8.7, 9.4}, 7);
  for (int64_t i = 0; i < pooled.numel(); ++i) {
    CHECK(pooled[i] == doctest::Approx(3.25).epsilon(1e-12));
  }

  // affine map: bilinear sampling reproduces it exactly away from borders,
  // so a unit box centered on a pixel center pools to that pixel's value
  Tensor<double> affine({10, 10, 1});
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) affine.at(i, j, 0) = 2.0 * j - 3.0 * i + 1.0;
  auto point = bcr::roi_align(affine, {4.0, 6.0, 5.0, 7.0}, 1);
  CHECK(point.at(0, 0, 0) == doctest::Approx(affine.at(6, 4, 0)).epsilon(1e-12));

  CHECK_THROWS_AS(bcr::roi_align(cmap, {5, 5, 5, 9}, 7), std::invalid_argument);
}

TEST_CASE("roi align matches the dense sampling reference") {
  Rng rng(205);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int H = rng.uniform_int(6, 14), W = rng.uniform_int(6, 14);
    const int C = rng.uniform_int(1, 3);
    Tensor<double> feat({H, W, C});
    fill_uniform(feat, rng, -2, 2);
    // boxes may extend outside the map on purpose
    Box b{rng.uniform(-3, W - 2.0), rng.uniform(-3, H - 2.0), 0, 0};
    b.x2 = b.x1 + rng.uniform(0.5, W + 2.0);
    b.y2 = b.y1 + rng.uniform(0.5, H + 2.0);
    const int out = rng.uniform_int(1, 7);
    auto got = bcr::roi_align(feat, b, out);
    auto want = oracle_align(feat, b.cx(), b.cy(), b.width(), b.height(), 0.0,
                             out, 2);
    worst = std::max(worst, max_abs_diff(got, want));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("roi align is linear in the feature map") {
  Rng rng(206);
  Tensor<double> u({8, 8, 2}), v({8, 8, 2});
  fill_uniform(u, rng, -1, 1);
  fill_uniform(v, rng, -1, 1);
  Tensor<double> mix({8, 8, 2});
  for (int64_t i = 0; i < mix.numel(); ++i) mix[i] = 1.7 * u[i] - 0.6 * v[i];
  const Box b{1.2, 0.7, 6.9, 7.3};
  auto pu = bcr::roi_align(u, b, 5);
  auto pv = bcr::roi_align(v, b, 5);
  auto pm = bcr::roi_align(mix, b, 5);
  double worst = 0;
  for (int64_t i = 0; i < pm.numel(); ++i) {
    worst = std::max(worst, std::abs(pm[i] - (1.7 * pu[i] - 0.6 * pv[i])));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("rotated roi align reduces to the axis-aligned case at theta zero") {
  Rng rng(207);
  Tensor<double> feat({9, 11, 3});
  fill_uniform(feat, rng, -2, 2);
  const Box b{2.3, 1.1, 8.6, 7.9};
  auto plain = bcr::roi_align(feat, b, 7);
  auto rot = bcr::rotated_roi_align(feat, bcr::to_rotated(b, 0.0), 7);
  CHECK(max_abs_diff(plain, rot) <= 1e-12);
}

TEST_CASE("rotated roi align matches the dense reference and the quarter-turn symmetry") {
  Rng rng(208);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int H = rng.uniform_int(6, 14), W = rng.uniform_int(6, 14);
    const int C = rng.uniform_int(1, 2);
    Tensor<double> feat({H, W, C});
    fill_uniform(feat, rng, -2, 2);
    RotatedBox rb{rng.uniform(1, W - 1.0), rng.uniform(1, H - 1.0),
                  rng.uniform(0.5, W + 1.0), rng.uniform(0.5, H + 1.0),
                  rng.uniform(-kPi / 2, kPi / 2)};
    const int out = rng.uniform_int(1, 7);
    auto got = bcr::rotated_roi_align(feat, rb, out);
    auto want = oracle_align(feat, rb.cx, rb.cy, rb.w, rb.h, rb.theta, out, 2);
    worst = std::max(worst, max_abs_diff(got, want));
  }
  CHECK(worst <= 1e-10);

  // theta = pi/2: equals pooling the width/height-swapped axis-aligned box
  // with the output grid turned a quarter turn
  Tensor<double> feat({12, 12, 2});
  fill_uniform(feat, rng, -1, 1);
  const double cx = 6.2, cy = 5.7, w = 7.0, h = 4.0;
  const int out = 5;
  auto rot = bcr::rotated_roi_align(feat, {cx, cy, w, h, kPi / 2}, out);
  auto swapped =
      bcr::roi_align(feat, {cx - h / 2, cy - w / 2, cx + h / 2, cy + w / 2}, out);
  double sworst = 0;
  for (int gy = 0; gy < out; ++gy)
    for (int gx = 0; gx < out; ++gx)
      for (int c = 0; c < 2; ++c) {
        sworst = std::max(sworst, std::abs(rot.at(gy, gx, c) -
                                           swapped.at(gx, out - 1 - gy, c)));
      }
  CHECK(sworst <= 1e-10);
}

TEST_CASE("both roi align variants pass gradient checks") {
  Rng rng(209);
  Tensor<double> ft({7, 8, 2});
  fill_uniform(ft, rng, -1, 1);
  auto f = ad::param(ft, "feat");
  const Box b{0.8, 1.4, 6.9, 6.2};
  auto fn_plain = [&]() { return ad::sum_squares(ad::roi_align(f, b, 4)); };
  CHECK(bcr::all_pass(bcr::grad_check<double>(fn_plain, {f})));

  const RotatedBox rb{3.5, 3.8, 5.0, 3.0, 0.6};
  auto fn_rot = [&]() {
    return ad::sum_squares(ad::rotated_roi_align(f, rb, 4));
  };
  CHECK(bcr::all_pass(bcr::grad_check<double>(fn_rot, {f})));
}
