#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bcr/tensor.hpp"
#include "bcr/tensor_ops.hpp"

// Minimal reverse-mode tape covering exactly the operations this repository
// trains through. Analytic backward per op; finite differences only verify.

namespace bcr {
namespace ad {

template <typename T>
struct Var;

template <typename T>
using VarPtr = std::shared_ptr<Var<T>>;

template <typename T>
struct Var : std::enable_shared_from_this<Var<T>> {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string name;
  std::vector<VarPtr<T>> parents;
  std::function<void(Var<T>&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.numel() != value.numel()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }

  void zero_grad() {
    if (grad.numel() == value.numel()) grad.fill(T(0));
  }

  double scalar() const { return static_cast<double>(value[0]); }
};

template <typename T>
VarPtr<T> constant(Tensor<T> t) {
  auto v = std::make_shared<Var<T>>();
  v->value = std::move(t);
  return v;
}

template <typename T>
VarPtr<T> param(Tensor<T> t, std::string name) {
  auto v = std::make_shared<Var<T>>();
  v->value = std::move(t);
  v->requires_grad = true;
  v->name = std::move(name);
  v->ensure_grad();
  return v;
}

template <typename T>
VarPtr<T> make_node(Tensor<T> value, std::vector<VarPtr<T>> parents,
                    std::function<void(Var<T>&)> backward) {
  auto v = std::make_shared<Var<T>>();
  v->value = std::move(value);
  for (const auto& p : parents) {
    if (p->requires_grad) v->requires_grad = true;
  }
  if (v->requires_grad) {
    v->parents = std::move(parents);
    v->backward_fn = std::move(backward);
  }
  return v;
}

/// Reverse sweep from a scalar root. Seeds d(root)/d(root) = 1.
template <typename T>
void backward(const VarPtr<T>& root) {
  std::vector<Var<T>*> order;
  std::unordered_set<Var<T>*> seen;
  std::vector<std::pair<Var<T>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Var<T>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.fill(T(0));
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("add: extent mismatch");
  }
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Var<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i];
    }
  });
}

template <typename T>
VarPtr<T> mul(const VarPtr<T>& a, const VarPtr<T>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("mul: extent mismatch");
  }
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Var<T>& n) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        ga[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        gb[i] += n.grad[i] * a->value[i];
    }
  });
}

/// 1 - x, the reverse-attention weight transform.
template <typename T>
VarPtr<T> one_minus(const VarPtr<T>& x) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) - x->value[i];
  return make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] -= n.grad[i];
  });
}

template <typename T>
VarPtr<T> sigmoid(const VarPtr<T>& x) {
  Tensor<T> out = bcr::sigmoid(x->value);
  auto node = make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      const T s = n.value[i];
      gx[i] += n.grad[i] * s * (T(1) - s);
    }
  });
  return node;
}

template <typename T>
VarPtr<T> relu(const VarPtr<T>& x) {
  Tensor<T> out = bcr::relu(x->value);
  return make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      if (x->value[i] > T(0)) gx[i] += n.grad[i];
    }
  });
}

template <typename T>
VarPtr<T> conv2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b,
                 int stride, int padding) {
  Tensor<T> out = bcr::conv2d(x->value, w->value, b->value, stride, padding);
  return make_node<T>(std::move(out), {x, w, b},
                      [x, w, b, stride, padding](Var<T>& n) {
                        bcr::conv2d_backward(
                            x->value, w->value, n.grad, stride, padding,
                            x->requires_grad ? &x->ensure_grad() : nullptr,
                            w->requires_grad ? &w->ensure_grad() : nullptr,
                            b->requires_grad ? &b->ensure_grad() : nullptr);
                      });
}

template <typename T>
VarPtr<T> bilinear_resize(const VarPtr<T>& x, int out_h, int out_w) {
  Tensor<T> out = bcr::bilinear_resize(x->value, out_h, out_w);
  const int in_h = x->value.dim(0), in_w = x->value.dim(1);
  return make_node<T>(std::move(out), {x}, [x, in_h, in_w](Var<T>& n) {
    bcr::bilinear_resize_backward(n.grad, in_h, in_w, &x->ensure_grad());
  });
}

template <typename T>
VarPtr<T> concat_channels(const VarPtr<T>& a, const VarPtr<T>& b) {
  Tensor<T> out = bcr::concat_channels(a->value, b->value);
  return make_node<T>(std::move(out), {a, b}, [a, b](Var<T>& n) {
    const int H = n.value.dim(0), W = n.value.dim(1);
    const int Ca = a->value.dim(2), Cb = b->value.dim(2);
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const T* g = n.grad.row(i, j);
        if (a->requires_grad) {
          T* ga = a->ensure_grad().row(i, j);
          for (int c = 0; c < Ca; ++c) ga[c] += g[c];
        }
        if (b->requires_grad) {
          T* gb = b->ensure_grad().row(i, j);
          for (int c = 0; c < Cb; ++c) gb[c] += g[Ca + c];
        }
      }
    }
  });
}

template <typename T>
VarPtr<T> channel_mean(const VarPtr<T>& x) {
  Tensor<T> out = bcr::channel_mean(x->value);
  return make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    const int H = x->value.dim(0), W = x->value.dim(1), C = x->value.dim(2);
    const T inv = T(1) / static_cast<T>(C);
    auto& gx = x->ensure_grad();
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const T g = n.grad.at(i, j, 0) * inv;
        T* gr = gx.row(i, j);
        for (int c = 0; c < C; ++c) gr[c] += g;
      }
    }
  });
}

template <typename T>
VarPtr<T> channel_max(const VarPtr<T>& x) {
  auto argmax = std::make_shared<std::vector<int>>();
  Tensor<T> out = bcr::channel_max(x->value, argmax.get());
  return make_node<T>(std::move(out), {x}, [x, argmax](Var<T>& n) {
    const int H = x->value.dim(0), W = x->value.dim(1);
    auto& gx = x->ensure_grad();
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const int c = (*argmax)[static_cast<size_t>(i) * W + j];
        gx.at(i, j, c) += n.grad.at(i, j, 0);
      }
    }
  });
}

/// F ⊙ gate with a single-channel gate broadcast over all channels of F.
template <typename T>
VarPtr<T> mul_gate(const VarPtr<T>& f, const VarPtr<T>& gate) {
  if (gate->value.dim(2) != 1 || gate->value.dim(0) != f->value.dim(0) ||
      gate->value.dim(1) != f->value.dim(1)) {
    throw std::invalid_argument("mul_gate: gate must be HW1 matching F");
  }
  const int H = f->value.dim(0), W = f->value.dim(1), C = f->value.dim(2);
  Tensor<T> out({H, W, C});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const T g = gate->value.at(i, j, 0);
      const T* p = f->value.row(i, j);
      T* o = out.row(i, j);
      for (int c = 0; c < C; ++c) o[c] = p[c] * g;
    }
  }
  return make_node<T>(std::move(out), {f, gate}, [f, gate](Var<T>& n) {
    const int H = f->value.dim(0), W = f->value.dim(1), C = f->value.dim(2);
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const T* g = n.grad.row(i, j);
        const T gv = gate->value.at(i, j, 0);
        const T* p = f->value.row(i, j);
        if (f->requires_grad) {
          T* gf = f->ensure_grad().row(i, j);
          for (int c = 0; c < C; ++c) gf[c] += g[c] * gv;
        }
        if (gate->requires_grad) {
          T s = T(0);
          for (int c = 0; c < C; ++c) s += g[c] * p[c];
          gate->ensure_grad().at(i, j, 0) += s;
        }
      }
    }
  });
}

/// x * coeffs[idx] where coeffs is a learnable vector (the fusion lambdas).
template <typename T>
VarPtr<T> scale_entry(const VarPtr<T>& x, const VarPtr<T>& coeffs, int idx) {
  const T c = coeffs->value[idx];
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * c;
  return make_node<T>(std::move(out), {x, coeffs}, [x, coeffs, idx](Var<T>& n) {
    const T c = coeffs->value[idx];
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += n.grad[i] * c;
    }
    if (coeffs->requires_grad) {
      T s = T(0);
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        s += n.grad[i] * x->value[i];
      coeffs->ensure_grad()[idx] += s;
    }
  });
}

template <typename T>
VarPtr<T> linear(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
  Tensor<T> out = bcr::linear(x->value, w->value, b->value);
  return make_node<T>(std::move(out), {x, w, b}, [x, w, b](Var<T>& n) {
    bcr::linear_backward(x->value, w->value, n.grad,
                         x->requires_grad ? &x->ensure_grad() : nullptr,
                         w->requires_grad ? &w->ensure_grad() : nullptr,
                         b->requires_grad ? &b->ensure_grad() : nullptr);
  });
}

/// HWC map -> rank-1 [C] spatial average.
template <typename T>
VarPtr<T> spatial_mean(const VarPtr<T>& x) {
  const int H = x->value.dim(0), W = x->value.dim(1), C = x->value.dim(2);
  Tensor<T> out({C});
  const T inv = T(1) / static_cast<T>(H * W);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const T* p = x->value.row(i, j);
      for (int c = 0; c < C; ++c) out[c] += p[c] * inv;
    }
  }
  return make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    const int H = x->value.dim(0), W = x->value.dim(1), C = x->value.dim(2);
    const T inv = T(1) / static_cast<T>(H * W);
    auto& gx = x->ensure_grad();
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        T* gr = gx.row(i, j);
        for (int c = 0; c < C; ++c) gr[c] += n.grad[c] * inv;
      }
    }
  });
}

/// HWC map viewed as a rank-1 vector (row-major, no copy semantics needed).
template <typename T>
VarPtr<T> flatten(const VarPtr<T>& x) {
  Tensor<T> out({static_cast<int>(x->value.numel())});
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i];
  return make_node<T>(std::move(out), {x}, [x](Var<T>& n) {
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += n.grad[i];
  });
}

/// Stacks equal-length rank-1 vars into an [N, D] matrix.
template <typename T>
VarPtr<T> stack_rows(const std::vector<VarPtr<T>>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
  const int D = static_cast<int>(rows[0]->value.numel());
  const int N = static_cast<int>(rows.size());
  Tensor<T> out({N, D});
  for (int n = 0; n < N; ++n) {
    if (rows[n]->value.numel() != D) {
      throw std::invalid_argument("stack_rows: ragged rows");
    }
    for (int d = 0; d < D; ++d) out.at(n, d) = rows[n]->value[d];
  }
  std::vector<VarPtr<T>> parents = rows;
  return make_node<T>(std::move(out), std::move(parents), [rows, D](Var<T>& n) {
    for (size_t r = 0; r < rows.size(); ++r) {
      if (!rows[r]->requires_grad) continue;
      auto& g = rows[r]->ensure_grad();
      for (int d = 0; d < D; ++d) g[d] += n.grad.at(static_cast<int>(r), d);
    }
  });
}

/// Concatenates rank-1 vectors end to end into one rank-1 vector.
template <typename T>
VarPtr<T> concat_vec(const std::vector<VarPtr<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_vec: empty");
  int64_t total = 0;
  for (const auto& p : parts) total += p->value.numel();
  Tensor<T> out({static_cast<int>(total)});
  int64_t off = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < p->value.numel(); ++i) out[off + i] = p->value[i];
    off += p->value.numel();
  }
  std::vector<VarPtr<T>> parents = parts;
  return make_node<T>(std::move(out), std::move(parents), [parts](Var<T>& n) {
    int64_t off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (int64_t i = 0; i < p->value.numel(); ++i) g[i] += n.grad[off + i];
      }
      off += p->value.numel();
    }
  });
}

/// Gathers channel range [c0, c0+len) at pixel (i, j) into a rank-1 vector.
template <typename T>
VarPtr<T> slice_pixel_channels(const VarPtr<T>& map, int i, int j, int c0,
                               int len) {
  Tensor<T> out({len});
  const T* p = map->value.row(i, j);
  for (int c = 0; c < len; ++c) out[c] = p[c0 + c];
  return make_node<T>(std::move(out), {map}, [map, i, j, c0, len](Var<T>& n) {
    T* g = map->ensure_grad().row(i, j);
    for (int c = 0; c < len; ++c) g[c0 + c] += n.grad[c];
  });
}

/// Gathers scalar entries (pixel, channel) from an HWC map into rank-1 [M].
template <typename T>
VarPtr<T> gather_pixels(const VarPtr<T>& map,
                        const std::vector<std::array<int, 3>>& idx) {
  Tensor<T> out({static_cast<int>(idx.size())});
  for (size_t m = 0; m < idx.size(); ++m) {
    out[static_cast<int64_t>(m)] = map->value.at(idx[m][0], idx[m][1], idx[m][2]);
  }
  return make_node<T>(std::move(out), {map}, [map, idx](Var<T>& n) {
    auto& g = map->ensure_grad();
    for (size_t m = 0; m < idx.size(); ++m) {
      g.at(idx[m][0], idx[m][1], idx[m][2]) += n.grad[static_cast<int64_t>(m)];
    }
  });
}

/// Rows scaled to unit L2 norm; the 1e-12 guard leaves a zero row zero.
template <typename T>
VarPtr<T> l2_normalize_rows(const VarPtr<T>& x) {
  // A row whose norm is below the floor stays zero and passes no gradient;
  // dividing such rows by the guard would blow the backward pass up.
  constexpr T kDeadRow = T(1e-8);
  const int N = x->value.dim(0), D = x->value.dim(1);
  Tensor<T> out({N, D});
  auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(N));
  for (int n = 0; n < N; ++n) {
    T s = T(0);
    for (int d = 0; d < D; ++d) s += x->value.at(n, d) * x->value.at(n, d);
    const T norm = std::sqrt(s);
    (*norms)[static_cast<size_t>(n)] = norm;
    for (int d = 0; d < D; ++d) {
      out.at(n, d) = norm < kDeadRow ? T(0) : x->value.at(n, d) / norm;
    }
  }
  return make_node<T>(std::move(out), {x}, [x, norms](Var<T>& n) {
    const int N = x->value.dim(0), D = x->value.dim(1);
    auto& gx = x->ensure_grad();
    for (int r = 0; r < N; ++r) {
      const T norm = (*norms)[static_cast<size_t>(r)];
      if (norm < kDeadRow) continue;
      T dot = T(0);
      for (int d = 0; d < D; ++d) dot += n.grad.at(r, d) * n.value.at(r, d);
      for (int d = 0; d < D; ++d) {
        gx.at(r, d) += (n.grad.at(r, d) - dot * n.value.at(r, d)) / norm;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar loss heads (each returns a shape-{1} var)
// ---------------------------------------------------------------------------

template <typename T>
VarPtr<T> scalar_var(T v) {
  return constant(Tensor<T>({1}, std::vector<T>{v}));
}

/// Weighted sum of scalar losses: sum_i coef[i] * losses[i].
template <typename T>
VarPtr<T> combine_scalars(const std::vector<std::pair<double, VarPtr<T>>>& terms) {
  T total = T(0);
  std::vector<VarPtr<T>> parents;
  for (const auto& [c, v] : terms) {
    total += static_cast<T>(c) * v->value[0];
    parents.push_back(v);
  }
  auto terms_copy = terms;
  return make_node<T>(Tensor<T>({1}, std::vector<T>{total}), std::move(parents),
                      [terms_copy](Var<T>& n) {
                        for (const auto& [c, v] : terms_copy) {
                          if (v->requires_grad) {
                            v->ensure_grad()[0] += static_cast<T>(c) * n.grad[0];
                          }
                        }
                      });
}

/// Mean softmax cross-entropy over rows with integer labels and optional
/// per-row weights (normalized by the weight sum).
template <typename T>
VarPtr<T> softmax_cross_entropy(const VarPtr<T>& logits,
                                const std::vector<int>& labels,
                                const std::vector<double>& row_weights = {}) {
  const int N = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw std::invalid_argument("softmax_cross_entropy: label count");
  }
  auto weights = std::make_shared<std::vector<double>>(
      row_weights.empty() ? std::vector<double>(static_cast<size_t>(N), 1.0)
                          : row_weights);
  double wsum = 0.0;
  for (double w : *weights) wsum += w;
  const double norm = wsum > 0.0 ? 1.0 / wsum : 0.0;
  auto probs = std::make_shared<Tensor<T>>(logits->value.shape());
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const T* row = &logits->value.at(n, 0);
    T m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - m));
    const double logz = std::log(z) + static_cast<double>(m);
    for (int k = 0; k < K; ++k) {
      probs->at(n, k) =
          static_cast<T>(std::exp(static_cast<double>(row[k]) - logz));
    }
    loss += (*weights)[static_cast<size_t>(n)] *
            (logz - static_cast<double>(row[labels[static_cast<size_t>(n)]]));
  }
  loss *= norm;
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_node<T>(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), {logits},
      [logits, probs, labels_copy, weights, norm](Var<T>& n) {
        const int N = logits->value.dim(0), K = logits->value.dim(1);
        auto& g = logits->ensure_grad();
        const T seed = n.grad[0];
        for (int r = 0; r < N; ++r) {
          const T w = static_cast<T>((*weights)[static_cast<size_t>(r)] * norm);
          for (int k = 0; k < K; ++k) {
            T p = probs->at(r, k);
            if (k == (*labels_copy)[static_cast<size_t>(r)]) p -= T(1);
            g.at(r, k) += seed * w * p;
          }
        }
      });
}

/// Mean binary cross-entropy with logits over a rank-1 vector.
template <typename T>
VarPtr<T> bce_with_logits(const VarPtr<T>& logits,
                          const std::vector<double>& targets) {
  const int N = static_cast<int>(logits->value.numel());
  if (static_cast<int>(targets.size()) != N) {
    throw std::invalid_argument("bce_with_logits: target count");
  }
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    const double x = static_cast<double>(logits->value[i]);
    const double t = targets[static_cast<size_t>(i)];
    // log(1 + e^-|x|) + max(x,0) - x*t
    loss += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * t;
  }
  loss /= std::max(N, 1);
  auto targets_copy = std::make_shared<std::vector<double>>(targets);
  return make_node<T>(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), {logits},
      [logits, targets_copy](Var<T>& n) {
        const int N = static_cast<int>(logits->value.numel());
        auto& g = logits->ensure_grad();
        const T seed = n.grad[0] / static_cast<T>(std::max(N, 1));
        for (int i = 0; i < N; ++i) {
          const T s = sigmoid_scalar(logits->value[i]);
          g[i] += seed * (s - static_cast<T>((*targets_copy)[static_cast<size_t>(i)]));
        }
      });
}

/// Smooth-L1 (Huber) loss, summed over coordinates and averaged over rows.
template <typename T>
VarPtr<T> smooth_l1(const VarPtr<T>& pred, const Tensor<T>& target,
                    double beta = 1.0,
                    const std::vector<double>& row_weights = {}) {
  if (!pred->value.same_shape(target)) {
    throw std::invalid_argument("smooth_l1: shape mismatch");
  }
  const int N = pred->value.dim(0), D = pred->value.dim(1);
  auto weights = std::make_shared<std::vector<double>>(
      row_weights.empty() ? std::vector<double>(static_cast<size_t>(N), 1.0)
                          : row_weights);
  double wsum = 0.0;
  for (double w : *weights) wsum += w;
  const double norm = wsum > 0.0 ? 1.0 / wsum : 0.0;
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    double rl = 0.0;
    for (int d = 0; d < D; ++d) {
      const double diff =
          static_cast<double>(pred->value.at(n, d) - target.at(n, d));
      const double a = std::abs(diff);
      rl += a < beta ? 0.5 * diff * diff / beta : a - 0.5 * beta;
    }
    loss += rl * (*weights)[static_cast<size_t>(n)];
  }
  loss *= norm;
  auto target_copy = std::make_shared<Tensor<T>>(target);
  return make_node<T>(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), {pred},
      [pred, target_copy, beta, weights, norm](Var<T>& n) {
        const int N = pred->value.dim(0), D = pred->value.dim(1);
        auto& g = pred->ensure_grad();
        const T seed = n.grad[0];
        for (int r = 0; r < N; ++r) {
          const T w = static_cast<T>((*weights)[static_cast<size_t>(r)] * norm);
          for (int d = 0; d < D; ++d) {
            const double diff =
                static_cast<double>(pred->value.at(r, d) - target_copy->at(r, d));
            double dd;
            if (std::abs(diff) < beta) {
              dd = diff / beta;
            } else {
              dd = diff > 0 ? 1.0 : -1.0;
            }
            g.at(r, d) += seed * w * static_cast<T>(dd);
          }
        }
      });
}

/// sum(x^2) over all entries -> scalar. Test/diagnostic head.
template <typename T>
VarPtr<T> sum_squares(const VarPtr<T>& x) {
  T s = T(0);
  for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i] * x->value[i];
  return make_node<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [x](Var<T>& n) {
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < x->value.numel(); ++i) {
      g[i] += n.grad[0] * T(2) * x->value[i];
    }
  });
}

/// mean(x) over all entries -> scalar.
template <typename T>
VarPtr<T> mean_all(const VarPtr<T>& x) {
  T s = T(0);
  for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  const T inv = T(1) / static_cast<T>(x->value.numel());
  return make_node<T>(Tensor<T>({1}, std::vector<T>{s * inv}), {x},
                      [x, inv](Var<T>& n) {
                        auto& g = x->ensure_grad();
                        for (int64_t i = 0; i < x->value.numel(); ++i) {
                          g[i] += n.grad[0] * inv;
                        }
                      });
}

}  // namespace ad
}  // namespace bcr
