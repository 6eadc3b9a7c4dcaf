#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bcr/autodiff.hpp"
#include "bcr/tensor.hpp"

// Box algebra and region feature extraction: IoU, center-preserving scale
// jitter, principal orientation from intensity-weighted spatial covariance,
// and the two RoI align variants.

namespace bcr {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

/// (cx, cy, w, h) with a rotation about the center. theta in (-pi/2, pi/2].
struct RotatedBox {
  double cx = 0, cy = 0, w = 0, h = 0, theta = 0;
};

struct ScaleJitter {
  double dx = 1.0, dy = 1.0;
};

/// Raised when an orientation is requested for an all-zero weight map.
/// Callers substitute theta = 0.
struct DegenerateOrientation : std::runtime_error {
  DegenerateOrientation() : std::runtime_error("all-zero orientation weights") {}
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

/// Scales width by dx and height by dy about the unchanged center.
inline Box scale_jitter(const Box& b, const ScaleJitter& j) {
  const double cx = b.cx(), cy = b.cy();
  const double hw = 0.5 * b.width() * j.dx;
  const double hh = 0.5 * b.height() * j.dy;
  return Box{cx - hw, cy - hh, cx + hw, cy + hh};
}

inline RotatedBox to_rotated(const Box& b, double theta) {
  return RotatedBox{b.cx(), b.cy(), b.width(), b.height(), theta};
}

/// Channel mean rectified at zero: the nonnegative weight map that feeds the
/// orientation statistics.
template <typename T>
Tensor<T> compress_channels(const Tensor<T>& patch) {
  if (patch.rank() != 3 || patch.dim(2) < 1) {
    throw std::invalid_argument("compress_channels: HWC with C >= 1");
  }
  const int H = patch.dim(0), W = patch.dim(1), C = patch.dim(2);
  Tensor<T> out({H, W});
  const T inv = T(1) / static_cast<T>(C);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const T* p = patch.row(i, j);
      T s = T(0);
      for (int c = 0; c < C; ++c) s += p[c];
      s *= inv;
      out.at(i, j) = s > T(0) ? s : T(0);
    }
  }
  return out;
}

/// Orientation of the dominant axis of a nonnegative weight map.
///
/// Weighted mean and 2x2 covariance of pixel-center coordinates; v is the
/// unit eigenvector of the larger eigenvalue; theta = -atan2(vx, vy) folded
/// into (-pi/2, pi/2]. A vertical mass distribution maps to theta = 0.
/// Near-equal eigenvalues (no dominant axis) also map to 0.
template <typename T>
double principal_orientation(const Tensor<T>& p) {
  if (p.rank() != 2) throw std::invalid_argument("principal_orientation: HW");
  const int H = p.dim(0), W = p.dim(1);
  double total = 0, mx = 0, my = 0;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const double w = static_cast<double>(p.at(i, j));
      const double x = j + 0.5, y = i + 0.5;
      total += w;
      mx += w * x;
      my += w * y;
    }
  }
  if (total <= 0) throw DegenerateOrientation{};
  mx /= total;
  my /= total;
  double sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const double w = static_cast<double>(p.at(i, j));
      const double dx = (j + 0.5) - mx, dy = (i + 0.5) - my;
      sxx += w * dx * dx;
      syy += w * dy * dy;
      sxy += w * dx * dy;
    }
  }
  sxx /= total;
  syy /= total;
  sxy /= total;

  const double mean = 0.5 * (sxx + syy);
  const double disc = std::sqrt(0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy);
  const double lmax = mean + disc, lmin = mean - disc;
  if (lmax <= 0 || (lmax - lmin) <= 1e-6 * lmax) return 0.0;

  // eigenvector of lmax; pick the better-conditioned formula
  double vx = sxy, vy = lmax - sxx;
  if (std::abs(vx) + std::abs(vy) < 1e-300) {
    vx = lmax - syy;
    vy = sxy;
  }
  double theta = -std::atan2(vx, vy);
  if (theta <= -1.5707963267948966) theta += 3.141592653589793;
  if (theta > 1.5707963267948966) theta -= 3.141592653589793;
  return theta;
}

namespace detail {

/// Bilinear sample at continuous image coordinates (x, y) where pixel (i, j)
/// has its center at (j + 0.5, i + 0.5). Coordinates outside the map read 0.
template <typename T>
T sample_padded(const Tensor<T>& feat, double x, double y, int c) {
  const int H = feat.dim(0), W = feat.dim(1);
  const double px = x - 0.5, py = y - 0.5;
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0, fy = py - y0;
  T acc = T(0);
  for (int dy = 0; dy < 2; ++dy) {
    const int yy = y0 + dy;
    if (yy < 0 || yy >= H) continue;
    const double wy = dy ? fy : 1.0 - fy;
    for (int dx = 0; dx < 2; ++dx) {
      const int xx = x0 + dx;
      if (xx < 0 || xx >= W) continue;
      const double wx = dx ? fx : 1.0 - fx;
      acc += static_cast<T>(wy * wx) * feat.at(yy, xx, c);
    }
  }
  return acc;
}

template <typename T>
void scatter_padded(Tensor<T>& grad, double x, double y, int c, T g) {
  const int H = grad.dim(0), W = grad.dim(1);
  const double px = x - 0.5, py = y - 0.5;
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0, fy = py - y0;
  for (int dy = 0; dy < 2; ++dy) {
    const int yy = y0 + dy;
    if (yy < 0 || yy >= H) continue;
    const double wy = dy ? fy : 1.0 - fy;
    for (int dx = 0; dx < 2; ++dx) {
      const int xx = x0 + dx;
      if (xx < 0 || xx >= W) continue;
      const double wx = dx ? fx : 1.0 - fx;
      grad.at(yy, xx, c) += static_cast<T>(wy * wx) * g;
    }
  }
}

}  // namespace detail

/// Pools a box into an out x out grid. Each cell averages
/// sampling_ratio^2 bilinear samples at regular sub-cell positions.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& feat, const Box& b, int out,
                    int sampling_ratio = 2) {
  if (!b.valid()) throw std::invalid_argument("roi_align: degenerate box");
  if (out < 1 || sampling_ratio < 1) {
    throw std::invalid_argument("roi_align: bad grid parameters");
  }
  const int C = feat.dim(2);
  Tensor<T> res({out, out, C});
  const double cw = b.width() / out, ch = b.height() / out;
  const double inv = 1.0 / (sampling_ratio * sampling_ratio);
  for (int gy = 0; gy < out; ++gy) {
    for (int gx = 0; gx < out; ++gx) {
      T* o = res.row(gy, gx);
      for (int sy = 0; sy < sampling_ratio; ++sy) {
        const double y = b.y1 + (gy + (sy + 0.5) / sampling_ratio) * ch;
        for (int sx = 0; sx < sampling_ratio; ++sx) {
          const double x = b.x1 + (gx + (sx + 0.5) / sampling_ratio) * cw;
          for (int c = 0; c < C; ++c) {
            o[c] += static_cast<T>(inv) * detail::sample_padded(feat, x, y, c);
          }
        }
      }
    }
  }
  return res;
}

template <typename T>
void roi_align_backward(const Tensor<T>& grad_out, const Box& b,
                        int sampling_ratio, Tensor<T>* grad_feat) {
  const int out = grad_out.dim(0), C = grad_out.dim(2);
  const double cw = b.width() / out, ch = b.height() / out;
  const T inv = static_cast<T>(1.0 / (sampling_ratio * sampling_ratio));
  for (int gy = 0; gy < out; ++gy) {
    for (int gx = 0; gx < out; ++gx) {
      const T* g = grad_out.row(gy, gx);
      for (int sy = 0; sy < sampling_ratio; ++sy) {
        const double y = b.y1 + (gy + (sy + 0.5) / sampling_ratio) * ch;
        for (int sx = 0; sx < sampling_ratio; ++sx) {
          const double x = b.x1 + (gx + (sx + 0.5) / sampling_ratio) * cw;
          for (int c = 0; c < C; ++c) {
            detail::scatter_padded(*grad_feat, x, y, c, inv * g[c]);
          }
        }
      }
    }
  }
}

/// roi_align with the sampling grid rotated by theta about the box center.
/// Rotation matrix [[cos, -sin], [sin, cos]] applied to center offsets.
template <typename T>
Tensor<T> rotated_roi_align(const Tensor<T>& feat, const RotatedBox& rb,
                            int out, int sampling_ratio = 2) {
  if (rb.w <= 0 || rb.h <= 0) {
    throw std::invalid_argument("rotated_roi_align: degenerate box");
  }
  if (out < 1 || sampling_ratio < 1) {
    throw std::invalid_argument("rotated_roi_align: bad grid parameters");
  }
  const int C = feat.dim(2);
  Tensor<T> res({out, out, C});
  const double cw = rb.w / out, ch = rb.h / out;
  const double ct = std::cos(rb.theta), st = std::sin(rb.theta);
  const double inv = 1.0 / (sampling_ratio * sampling_ratio);
  for (int gy = 0; gy < out; ++gy) {
    for (int gx = 0; gx < out; ++gx) {
      T* o = res.row(gy, gx);
      for (int sy = 0; sy < sampling_ratio; ++sy) {
        const double v = (gy + (sy + 0.5) / sampling_ratio) * ch - 0.5 * rb.h;
        for (int sx = 0; sx < sampling_ratio; ++sx) {
          const double u = (gx + (sx + 0.5) / sampling_ratio) * cw - 0.5 * rb.w;
          const double x = rb.cx + ct * u - st * v;
          const double y = rb.cy + st * u + ct * v;
          for (int c = 0; c < C; ++c) {
            o[c] += static_cast<T>(inv) * detail::sample_padded(feat, x, y, c);
          }
        }
      }
    }
  }
  return res;
}

template <typename T>
void rotated_roi_align_backward(const Tensor<T>& grad_out, const RotatedBox& rb,
                                int sampling_ratio, Tensor<T>* grad_feat) {
  const int out = grad_out.dim(0), C = grad_out.dim(2);
  const double cw = rb.w / out, ch = rb.h / out;
  const double ct = std::cos(rb.theta), st = std::sin(rb.theta);
  const T inv = static_cast<T>(1.0 / (sampling_ratio * sampling_ratio));
  for (int gy = 0; gy < out; ++gy) {
    for (int gx = 0; gx < out; ++gx) {
      const T* g = grad_out.row(gy, gx);
      for (int sy = 0; sy < sampling_ratio; ++sy) {
        const double v = (gy + (sy + 0.5) / sampling_ratio) * ch - 0.5 * rb.h;
        for (int sx = 0; sx < sampling_ratio; ++sx) {
          const double u = (gx + (sx + 0.5) / sampling_ratio) * cw - 0.5 * rb.w;
          const double x = rb.cx + ct * u - st * v;
          const double y = rb.cy + st * u + ct * v;
          for (int c = 0; c < C; ++c) {
            detail::scatter_padded(*grad_feat, x, y, c, inv * g[c]);
          }
        }
      }
    }
  }
}

namespace ad {

template <typename T>
VarPtr<T> roi_align(const VarPtr<T>& feat, const Box& b, int out,
                    int sampling_ratio = 2) {
  Tensor<T> res = bcr::roi_align(feat->value, b, out, sampling_ratio);
  return make_node<T>(std::move(res), {feat},
                      [feat, b, sampling_ratio](Var<T>& n) {
                        roi_align_backward(n.grad, b, sampling_ratio,
                                           &feat->ensure_grad());
                      });
}

template <typename T>
VarPtr<T> rotated_roi_align(const VarPtr<T>& feat, const RotatedBox& rb,
                            int out, int sampling_ratio = 2) {
  Tensor<T> res = bcr::rotated_roi_align(feat->value, rb, out, sampling_ratio);
  return make_node<T>(std::move(res), {feat},
                      [feat, rb, sampling_ratio](Var<T>& n) {
                        rotated_roi_align_backward(n.grad, rb, sampling_ratio,
                                                   &feat->ensure_grad());
                      });
}

}  // namespace ad
}  // namespace bcr
