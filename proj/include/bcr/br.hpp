#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bcr/autodiff.hpp"
#include "bcr/tensor.hpp"

// Boundary refinement over a feature pyramid: a coarse-to-fine reverse
// attention chain seeded from the top level, a per-level forward spatial
// attention, and a learnable three-way fusion.

namespace bcr {

template <typename T>
struct BRLevelParams {
  ad::VarPtr<T> rev_w, rev_b;    // conv applied after the reverse gate
  ad::VarPtr<T> gate_w, gate_b;  // 2->1 conv producing the forward gate
  ad::VarPtr<T> lambda;          // fusion coefficients, 3 entries
};

template <typename T>
struct BRParams {
  ad::VarPtr<T> init_w, init_b;  // seed conv on the top pyramid level
  std::vector<BRLevelParams<T>> levels;  // index 0 = finest level

  /// Fresh parameters for a pyramid whose level l has channels[l] channels.
  /// All convs are 3x3 and channel-preserving; fusion starts as an average.
  static BRParams init(const std::vector<int>& channels, Rng& rng) {
    if (channels.size() < 2) {
      throw std::invalid_argument("BRParams: pyramid needs at least 2 levels");
    }
    BRParams p;
    const int ctop = channels.back();
    Tensor<T> iw({3, 3, ctop, ctop});
    he_init(iw, 9 * ctop, rng);
    p.init_w = ad::param(std::move(iw), "br.init.w");
    p.init_b = ad::param(Tensor<T>({ctop}), "br.init.b");
    for (size_t l = 0; l < channels.size(); ++l) {
      const int c = channels[l];
      BRLevelParams<T> lp;
      const std::string base = "br.l" + std::to_string(l) + ".";
      Tensor<T> rw({3, 3, c, c});
      he_init(rw, 9 * c, rng);
      lp.rev_w = ad::param(std::move(rw), base + "rev.w");
      lp.rev_b = ad::param(Tensor<T>({c}), base + "rev.b");
      Tensor<T> gw({3, 3, 2, 1});
      he_init(gw, 18, rng);
      lp.gate_w = ad::param(std::move(gw), base + "gate.w");
      lp.gate_b = ad::param(Tensor<T>({1}), base + "gate.b");
      lp.lambda = ad::param(
          Tensor<T>({3}, std::vector<T>{T(1) / 3, T(1) / 3, T(1) / 3}),
          base + "lambda");
      p.levels.push_back(std::move(lp));
    }
    return p;
  }

  void collect(std::vector<ad::VarPtr<T>>* out) const {
    out->push_back(init_w);
    out->push_back(init_b);
    for (const auto& lp : levels) {
      out->push_back(lp.rev_w);
      out->push_back(lp.rev_b);
      out->push_back(lp.gate_w);
      out->push_back(lp.gate_b);
      out->push_back(lp.lambda);
    }
  }
};

/// Seed map for the descent: a channel-preserving conv of the top level.
/// Same extents as the top level; not part of the refined pyramid itself.
template <typename T>
ad::VarPtr<T> init_reverse(const ad::VarPtr<T>& f_top, const BRParams<T>& p) {
  return ad::conv2d(f_top, p.init_w, p.init_b, 1, 1);
}

/// Upsamples the coarser refined map to this level's extents, gates this
/// level by (1 - sigmoid(upsampled)), and convolves. Returns the attention
/// map and the upsampled carry (both are consumed by the fusion).
template <typename T>
std::pair<ad::VarPtr<T>, ad::VarPtr<T>> reverse_attention(
    const ad::VarPtr<T>& f_l, const ad::VarPtr<T>& f_next,
    const BRLevelParams<T>& p) {
  if (f_next->value.dim(2) != f_l->value.dim(2)) {
    throw std::invalid_argument("reverse_attention: channel mismatch");
  }
  auto ra_up =
      ad::bilinear_resize(f_next, f_l->value.dim(0), f_l->value.dim(1));
  auto gated = ad::mul(ad::one_minus(ad::sigmoid(ra_up)), f_l);
  auto ra = ad::conv2d(gated, p.rev_w, p.rev_b, 1, 1);
  return {ra, ra_up};
}

/// F gated by a sigmoid conv over the channel mean and max statistics.
template <typename T>
ad::VarPtr<T> forward_attention(const ad::VarPtr<T>& f_l,
                                const BRLevelParams<T>& p) {
  auto stats = ad::concat_channels(ad::channel_mean(f_l), ad::channel_max(f_l));
  auto gate = ad::sigmoid(ad::conv2d(stats, p.gate_w, p.gate_b, 1, 1));
  return ad::mul_gate(f_l, gate);
}

/// lambda[0]*RA + lambda[1]*FA + lambda[2]*RA_up, with terms dropped when a
/// branch is disabled.
template <typename T>
ad::VarPtr<T> fuse(const ad::VarPtr<T>& ra, const ad::VarPtr<T>& fa,
                   const ad::VarPtr<T>& ra_up, const ad::VarPtr<T>& lambda,
                   bool fa_on = true, bool ra_on = true) {
  ad::VarPtr<T> acc;
  if (ra_on) {
    acc = ad::scale_entry(ra, lambda, 0);
  }
  if (fa_on) {
    auto term = ad::scale_entry(fa, lambda, 1);
    acc = acc ? ad::add(acc, term) : term;
  }
  if (ra_on) {
    acc = ad::add(acc, ad::scale_entry(ra_up, lambda, 2));
  }
  if (!acc) throw std::invalid_argument("fuse: all branches disabled");
  return acc;
}

/// Runs the descent from the top level down and returns the refined pyramid
/// with the input extents. levels[0] is the finest map.
template <typename T>
std::vector<ad::VarPtr<T>> refine_pyramid(
    const std::vector<ad::VarPtr<T>>& pyr, const BRParams<T>& p,
    bool fa_on = true, bool ra_on = true) {
  const int L = static_cast<int>(pyr.size());
  if (L < 2) throw std::invalid_argument("refine_pyramid: needs >= 2 levels");
  if (p.levels.size() != pyr.size()) {
    throw std::invalid_argument("refine_pyramid: parameter level count");
  }
  if (!fa_on && !ra_on) return pyr;  // both branches ablated: pass-through
  std::vector<ad::VarPtr<T>> out(pyr.size());
  ad::VarPtr<T> seed;
  if (ra_on) seed = init_reverse(pyr.back(), p);
  for (int l = L - 1; l >= 0; --l) {
    const auto& lp = p.levels[static_cast<size_t>(l)];
    ad::VarPtr<T> ra, ra_up;
    if (ra_on) {
      const auto& next = (l == L - 1) ? seed : out[static_cast<size_t>(l + 1)];
      auto pair = reverse_attention(pyr[static_cast<size_t>(l)], next, lp);
      ra = pair.first;
      ra_up = pair.second;
    }
    ad::VarPtr<T> fa;
    if (fa_on) fa = forward_attention(pyr[static_cast<size_t>(l)], lp);
    out[static_cast<size_t>(l)] = fuse(ra, fa, ra_up, lp.lambda, fa_on, ra_on);
  }
  return out;
}

}  // namespace bcr
