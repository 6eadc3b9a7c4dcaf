#pragma once

#include <cmath>
#include <stdexcept>

#include "bcr/tensor.hpp"

// Forward and backward kernels on plain tensors. Feature maps are HWC,
// conv kernels are [kh][kw][Cin][Cout] so the output-channel loop is
// contiguous and vectorizes.

namespace bcr {

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

/// Cross-correlation of an HWC input with a [k,k,Cin,Cout] kernel.
/// Output spatial size floor((H + 2p - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int padding) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: input must be HWC, kernel kkIO");
  }
  const int H = input.dim(0), W = input.dim(1), Cin = input.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh != kw || kh % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel must be square with odd size");
  }
  if (kernel.dim(2) != Cin) {
    throw std::invalid_argument("conv2d: input channels do not match kernel");
  }
  const int Cout = kernel.dim(3);
  if (bias.numel() != Cout) {
    throw std::invalid_argument("conv2d: bias length does not match Cout");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: empty output");

  Tensor<T> out({Ho, Wo, Cout});
  const T* bptr = bias.data();
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      T* acc = out.row(oy, ox);
      for (int c = 0; c < Cout; ++c) acc[c] = bptr[c];
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride + ky - padding;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride + kx - padding;
          if (ix < 0 || ix >= W) continue;
          const T* xin = input.row(iy, ix);
          const T* wbase = &kernel.at(ky, kx, 0, 0);
          for (int ci = 0; ci < Cin; ++ci) {
            const T xv = xin[ci];
            const T* wrow = wbase + static_cast<size_t>(ci) * Cout;
            for (int c = 0; c < Cout; ++c) acc[c] += xv * wrow[c];
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates input/kernel/bias gradients for conv2d.
template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                     const Tensor<T>& grad_out, int stride, int padding,
                     Tensor<T>* grad_input, Tensor<T>* grad_kernel,
                     Tensor<T>* grad_bias) {
  const int H = input.dim(0), W = input.dim(1), Cin = input.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1), Cout = kernel.dim(3);
  const int Ho = grad_out.dim(0), Wo = grad_out.dim(1);

  if (grad_bias) {
    T* db = grad_bias->data();
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        const T* g = grad_out.row(oy, ox);
        for (int c = 0; c < Cout; ++c) db[c] += g[c];
      }
    }
  }
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      const T* g = grad_out.row(oy, ox);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride + ky - padding;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride + kx - padding;
          if (ix < 0 || ix >= W) continue;
          const T* xin = input.row(iy, ix);
          const T* wbase = &kernel.at(ky, kx, 0, 0);
          T* dxin = grad_input ? grad_input->row(iy, ix) : nullptr;
          T* dwbase = grad_kernel ? &grad_kernel->at(ky, kx, 0, 0) : nullptr;
          for (int ci = 0; ci < Cin; ++ci) {
            const T* wrow = wbase + static_cast<size_t>(ci) * Cout;
            if (dxin) {
              T s = T(0);
              for (int c = 0; c < Cout; ++c) s += wrow[c] * g[c];
              dxin[ci] += s;
            }
            if (dwbase) {
              const T xv = xin[ci];
              T* dwrow = dwbase + static_cast<size_t>(ci) * Cout;
              for (int c = 0; c < Cout; ++c) dwrow[c] += xv * g[c];
            }
          }
        }
      }
    }
  }
}

/// Bilinear resize of an HWC map, half-pixel-center convention:
/// src = (dst + 0.5) * scale - 0.5, clamped to the valid range.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w) {
  if (input.rank() != 3) throw std::invalid_argument("bilinear_resize: HWC");
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("bilinear_resize: non-positive target extents");
  }
  const int H = input.dim(0), W = input.dim(1), C = input.dim(2);
  Tensor<T> out({out_h, out_w, C});
  const double sy = static_cast<double>(H) / out_h;
  const double sx = static_cast<double>(W) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, H - 1);
    const T wy = static_cast<T>(fy - y0);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, W - 1);
      const T wx = static_cast<T>(fx - x0);
      const T* p00 = input.row(y0, x0);
      const T* p01 = input.row(y0, x1);
      const T* p10 = input.row(y1, x0);
      const T* p11 = input.row(y1, x1);
      T* o = out.row(oy, ox);
      const T w00 = (T(1) - wy) * (T(1) - wx);
      const T w01 = (T(1) - wy) * wx;
      const T w10 = wy * (T(1) - wx);
      const T w11 = wy * wx;
      for (int c = 0; c < C; ++c) {
        o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
      }
    }
  }
  return out;
}

template <typename T>
void bilinear_resize_backward(const Tensor<T>& grad_out, int in_h, int in_w,
                              Tensor<T>* grad_input) {
  const int out_h = grad_out.dim(0), out_w = grad_out.dim(1);
  const int C = grad_out.dim(2);
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(in_h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const T wy = static_cast<T>(fy - y0);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(in_w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const T wx = static_cast<T>(fx - x0);
      const T* g = grad_out.row(oy, ox);
      T* p00 = grad_input->row(y0, x0);
      T* p01 = grad_input->row(y0, x1);
      T* p10 = grad_input->row(y1, x0);
      T* p11 = grad_input->row(y1, x1);
      const T w00 = (T(1) - wy) * (T(1) - wx);
      const T w01 = (T(1) - wy) * wx;
      const T w10 = wy * (T(1) - wx);
      const T w11 = wy * wx;
      for (int c = 0; c < C; ++c) {
        p00[c] += w00 * g[c];
        p01[c] += w01 * g[c];
        p10[c] += w10 * g[c];
        p11[c] += w11 * g[c];
      }
    }
  }
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& t) {
  Tensor<T> out(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) out[i] = sigmoid_scalar(t[i]);
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& t) {
  Tensor<T> out(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] > T(0) ? t[i] : T(0);
  return out;
}

/// Per-pixel mean over the channel axis, HWC -> HW1.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(2) < 1) {
    throw std::invalid_argument("channel_mean: HWC with C >= 1");
  }
  const int H = t.dim(0), W = t.dim(1), C = t.dim(2);
  Tensor<T> out({H, W, 1});
  const T inv = T(1) / static_cast<T>(C);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const T* p = t.row(i, j);
      T s = T(0);
      for (int c = 0; c < C; ++c) s += p[c];
      out.at(i, j, 0) = s * inv;
    }
  }
  return out;
}

/// Per-pixel max over the channel axis. When `argmax` is given it records the
/// first maximal channel per pixel (backward routes gradient there).
template <typename T>
Tensor<T> channel_max(const Tensor<T>& t, std::vector<int>* argmax = nullptr) {
  if (t.rank() != 3 || t.dim(2) < 1) {
    throw std::invalid_argument("channel_max: HWC with C >= 1");
  }
  const int H = t.dim(0), W = t.dim(1), C = t.dim(2);
  Tensor<T> out({H, W, 1});
  if (argmax) argmax->assign(static_cast<size_t>(H) * W, 0);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const T* p = t.row(i, j);
      T best = p[0];
      int bi = 0;
      for (int c = 1; c < C; ++c) {
        if (p[c] > best) {
          best = p[c];
          bi = c;
        }
      }
      out.at(i, j, 0) = best;
      if (argmax) (*argmax)[static_cast<size_t>(i) * W + j] = bi;
    }
  }
  return out;
}

/// Channel concatenation of two maps with equal spatial extents.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("concat_channels: spatial extents differ");
  }
  const int H = a.dim(0), W = a.dim(1), Ca = a.dim(2), Cb = b.dim(2);
  Tensor<T> out({H, W, Ca + Cb});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      T* o = out.row(i, j);
      const T* pa = a.row(i, j);
      const T* pb = b.row(i, j);
      for (int c = 0; c < Ca; ++c) o[c] = pa[c];
      for (int c = 0; c < Cb; ++c) o[Ca + c] = pb[c];
    }
  }
  return out;
}

/// out[n][o] = sum_i x[n][i] * w[i][o] + b[o]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  const int N = x.dim(0), I = x.dim(1), O = w.dim(1);
  if (b.numel() != O) throw std::invalid_argument("linear: bad bias");
  Tensor<T> out({N, O});
  for (int n = 0; n < N; ++n) {
    T* o = &out.at(n, 0);
    for (int c = 0; c < O; ++c) o[c] = b[c];
    const T* xr = &x.at(n, 0);
    for (int i = 0; i < I; ++i) {
      const T xv = xr[i];
      const T* wr = &w.at(i, 0);
      for (int c = 0; c < O; ++c) o[c] += xv * wr[c];
    }
  }
  return out;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const int N = x.dim(0), I = x.dim(1), O = w.dim(1);
  for (int n = 0; n < N; ++n) {
    const T* g = &grad_out.at(n, 0);
    const T* xr = &x.at(n, 0);
    if (grad_b) {
      T* db = grad_b->data();
      for (int c = 0; c < O; ++c) db[c] += g[c];
    }
    for (int i = 0; i < I; ++i) {
      if (grad_x) {
        const T* wr = &w.at(i, 0);
        T s = T(0);
        for (int c = 0; c < O; ++c) s += wr[c] * g[c];
        grad_x->at(n, i) += s;
      }
      if (grad_w) {
        const T xv = xr[i];
        T* dwr = &grad_w->at(i, 0);
        for (int c = 0; c < O; ++c) dwr[c] += xv * g[c];
      }
    }
  }
}

}  // namespace bcr
