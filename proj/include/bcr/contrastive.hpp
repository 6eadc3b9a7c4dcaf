#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "bcr/autodiff.hpp"
#include "bcr/tensor.hpp"

// Contrastive refinement: similarity matrices between embeddings and class
// prototypes, pair masks, and the masked log-probability loss shared by the
// RPN and RoI branches.

namespace bcr {

/// Pairwise masks over R embedding rows. ff excludes self-pairs, label marks
/// same-class pairs, pos marks pairs where both rows are foreground.
struct MaskSet {
  int R = 0;
  std::vector<char> ff, label, pos;

  char combined(int i, int j) const {
    const size_t k = static_cast<size_t>(i) * R + j;
    return ff[k] & label[k] & pos[k];
  }
};

inline MaskSet build_masks(const std::vector<int>& labels,
                           const std::vector<char>& positive) {
  if (labels.size() != positive.size()) {
    throw std::invalid_argument("build_masks: length mismatch");
  }
  const int R = static_cast<int>(labels.size());
  MaskSet m;
  m.R = R;
  m.ff.assign(static_cast<size_t>(R) * R, 0);
  m.label.assign(static_cast<size_t>(R) * R, 0);
  m.pos.assign(static_cast<size_t>(R) * R, 0);
  for (int i = 0; i < R; ++i) {
    for (int j = 0; j < R; ++j) {
      const size_t k = static_cast<size_t>(i) * R + j;
      m.ff[k] = i != j;
      m.label[k] = labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)];
      m.pos[k] = positive[static_cast<size_t>(i)] && positive[static_cast<size_t>(j)];
    }
  }
  return m;
}

/// Sfp = E Y^T / tau, Sff = E E^T / tau. Rows of E and Y must be unit.
template <typename T>
void similarities(const Tensor<T>& E, const Tensor<T>& Y, double tau,
                  Tensor<T>* Sfp, Tensor<T>* Sff) {
  if (tau <= 0) throw std::invalid_argument("similarities: tau must be > 0");
  const int R = E.dim(0), D = E.dim(1), P = Y.dim(0);
  if (Y.dim(1) != D) throw std::invalid_argument("similarities: dim mismatch");
  *Sfp = Tensor<T>({R, P});
  *Sff = Tensor<T>({R, R});
  const T inv = static_cast<T>(1.0 / tau);
  for (int i = 0; i < R; ++i) {
    for (int p = 0; p < P; ++p) {
      T s = T(0);
      for (int d = 0; d < D; ++d) s += E.at(i, d) * Y.at(p, d);
      Sfp->at(i, p) = s * inv;
    }
    for (int j = 0; j < R; ++j) {
      T s = T(0);
      for (int d = 0; d < D; ++d) s += E.at(i, d) * E.at(j, d);
      Sff->at(i, j) = s * inv;
    }
  }
}

/// logp[i][j] = Sff[i][j] - log(sum_k e^{Sff[i][k]} ff[i][k]
///                              + sum_d e^{Sfp[i][d]} + eps),
/// with the per-row denominator evaluated max-shifted.
template <typename T>
Tensor<double> log_prob(const Tensor<T>& Sfp, const Tensor<T>& Sff,
                        const MaskSet& masks, double eps = 1e-10) {
  const int R = Sff.dim(0), P = Sfp.dim(1);
  Tensor<double> out({R, R});
  for (int i = 0; i < R; ++i) {
    double m = -1e300;
    for (int k = 0; k < R; ++k) {
      if (masks.ff[static_cast<size_t>(i) * R + k]) {
        m = std::max(m, static_cast<double>(Sff.at(i, k)));
      }
    }
    for (int d = 0; d < P; ++d) {
      m = std::max(m, static_cast<double>(Sfp.at(i, d)));
    }
    double denom = eps * std::exp(-m);
    for (int k = 0; k < R; ++k) {
      if (masks.ff[static_cast<size_t>(i) * R + k]) {
        denom += std::exp(static_cast<double>(Sff.at(i, k)) - m);
      }
    }
    for (int d = 0; d < P; ++d) {
      denom += std::exp(static_cast<double>(Sfp.at(i, d)) - m);
    }
    const double logdenom = m + std::log(denom);
    for (int j = 0; j < R; ++j) {
      out.at(i, j) = static_cast<double>(Sff.at(i, j)) - logdenom;
    }
  }
  return out;
}

/// Reference value of the masked contrastive loss for one or more variant
/// embedding batches against shared prototypes. Pure; the trainable version
/// is ad::contrastive_loss below.
template <typename T>
double contrastive_loss_value(const std::vector<Tensor<T>>& variants,
                              const Tensor<T>& protos,
                              const std::vector<int>& labels,
                              const std::vector<char>& positive, double tau,
                              double eps = 1e-10) {
  if (variants.empty()) return 0.0;
  const int R = variants[0].dim(0);
  if (R == 0) return 0.0;
  const MaskSet masks = build_masks(labels, positive);
  double total = 0.0;
  for (const auto& E : variants) {
    Tensor<T> Sfp, Sff;
    similarities(E, protos, tau, &Sfp, &Sff);
    const Tensor<double> lp = log_prob(Sfp, Sff, masks, eps);
    for (int i = 0; i < R; ++i) {
      double acc = 0.0;
      int count = 0;
      for (int j = 0; j < R; ++j) {
        if (masks.combined(i, j)) {
          acc += lp.at(i, j);
          ++count;
        }
      }
      total += acc / std::max(count, 1);
    }
  }
  return -total / R;
}

namespace ad {

/// Masked contrastive loss over variant embedding batches (rows unit-norm)
/// and shared prototypes (rows unit-norm). Row i of every variant carries
/// labels[i] / positive[i]. Scalar output; analytic gradients flow to every
/// variant and to the prototypes.
template <typename T>
VarPtr<T> contrastive_loss(const std::vector<VarPtr<T>>& variants,
                           const VarPtr<T>& protos,
                           const std::vector<int>& labels,
                           const std::vector<char>& positive, double tau,
                           double eps = 1e-10) {
  if (variants.empty() || variants[0]->value.dim(0) == 0) {
    return scalar_var<T>(T(0));
  }
  const int R = variants[0]->value.dim(0);
  const int D = variants[0]->value.dim(1);
  const int P = protos->value.dim(0);
  if (static_cast<int>(labels.size()) != R ||
      static_cast<int>(positive.size()) != R) {
    throw std::invalid_argument("contrastive_loss: metadata length mismatch");
  }
  auto masks = std::make_shared<MaskSet>(build_masks(labels, positive));

  // forward pass, keeping per-variant softmax tables for the backward
  struct VariantCache {
    Tensor<T> Sff, Sfp;          // similarities
    Tensor<double> Pff, Pfp;     // exp(S - m) / shifted denominator
  };
  auto caches = std::make_shared<std::vector<VariantCache>>();
  auto pair_count = std::make_shared<std::vector<int>>(static_cast<size_t>(R), 0);
  for (int i = 0; i < R; ++i) {
    int c = 0;
    for (int j = 0; j < R; ++j) c += masks->combined(i, j);
    (*pair_count)[static_cast<size_t>(i)] = c;
  }

  double total = 0.0;
  for (const auto& ev : variants) {
    if (ev->value.dim(0) != R || ev->value.dim(1) != D) {
      throw std::invalid_argument("contrastive_loss: ragged variants");
    }
    VariantCache cache;
    similarities(ev->value, protos->value, tau, &cache.Sfp, &cache.Sff);
    cache.Pff = Tensor<double>({R, R});
    cache.Pfp = Tensor<double>({R, P});
    for (int i = 0; i < R; ++i) {
      double m = -1e300;
      for (int k = 0; k < R; ++k) {
        if (masks->ff[static_cast<size_t>(i) * R + k]) {
          m = std::max(m, static_cast<double>(cache.Sff.at(i, k)));
        }
      }
      for (int d = 0; d < P; ++d) {
        m = std::max(m, static_cast<double>(cache.Sfp.at(i, d)));
      }
      double denom = eps * std::exp(-m);
      for (int k = 0; k < R; ++k) {
        if (masks->ff[static_cast<size_t>(i) * R + k]) {
          denom += std::exp(static_cast<double>(cache.Sff.at(i, k)) - m);
        }
      }
      for (int d = 0; d < P; ++d) {
        denom += std::exp(static_cast<double>(cache.Sfp.at(i, d)) - m);
      }
      const double logdenom = m + std::log(denom);
      for (int k = 0; k < R; ++k) {
        cache.Pff.at(i, k) =
            masks->ff[static_cast<size_t>(i) * R + k]
                ? std::exp(static_cast<double>(cache.Sff.at(i, k)) - m) / denom
                : 0.0;
      }
      for (int d = 0; d < P; ++d) {
        cache.Pfp.at(i, d) =
            std::exp(static_cast<double>(cache.Sfp.at(i, d)) - m) / denom;
      }
      double acc = 0.0;
      for (int j = 0; j < R; ++j) {
        if (masks->combined(i, j)) {
          acc += static_cast<double>(cache.Sff.at(i, j)) - logdenom;
        }
      }
      total += acc / std::max((*pair_count)[static_cast<size_t>(i)], 1);
    }
    caches->push_back(std::move(cache));
  }
  const double loss = -total / R;

  std::vector<VarPtr<T>> parents = variants;
  parents.push_back(protos);
  auto variants_copy = variants;
  return make_node<T>(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), std::move(parents),
      [variants_copy, protos, masks, caches, pair_count, tau, R, D,
       P](Var<T>& n) {
        const double seed = static_cast<double>(n.grad[0]);
        const double inv_tau = 1.0 / tau;
        Tensor<double> dY({P, D});
        for (size_t t = 0; t < variants_copy.size(); ++t) {
          const auto& ev = variants_copy[t];
          const auto& cache = (*caches)[t];
          // gradients wrt the similarity matrices
          Tensor<double> Gff({R, R}), Gfp({R, P});
          for (int i = 0; i < R; ++i) {
            const int a = (*pair_count)[static_cast<size_t>(i)];
            const double inv_a = 1.0 / std::max(a, 1);
            const double row_on = a > 0 ? 1.0 : 0.0;
            for (int j = 0; j < R; ++j) {
              const double w = masks->combined(i, j) ? 1.0 : 0.0;
              Gff.at(i, j) = -seed / R *
                             (w * inv_a - row_on * cache.Pff.at(i, j));
            }
            for (int d = 0; d < P; ++d) {
              Gfp.at(i, d) = seed / R * row_on * cache.Pfp.at(i, d);
            }
          }
          // dE = (Gff + Gff^T) E / tau + Gfp Y / tau; dY += Gfp^T E / tau
          if (ev->requires_grad) {
            auto& gE = ev->ensure_grad();
            for (int i = 0; i < R; ++i) {
              for (int j = 0; j < R; ++j) {
                const double g = (Gff.at(i, j) + Gff.at(j, i)) * inv_tau;
                if (g == 0.0) continue;
                for (int d = 0; d < D; ++d) {
                  gE.at(i, d) += static_cast<T>(g * ev->value.at(j, d));
                }
              }
              for (int p = 0; p < P; ++p) {
                const double g = Gfp.at(i, p) * inv_tau;
                for (int d = 0; d < D; ++d) {
                  gE.at(i, d) += static_cast<T>(g * protos->value.at(p, d));
                }
              }
            }
          }
          if (protos->requires_grad) {
            for (int p = 0; p < P; ++p) {
              for (int i = 0; i < R; ++i) {
                const double g = Gfp.at(i, p) * inv_tau;
                for (int d = 0; d < D; ++d) {
                  dY.at(p, d) += g * ev->value.at(i, d);
                }
              }
            }
          }
        }
        if (protos->requires_grad) {
          auto& gY = protos->ensure_grad();
          for (int64_t i = 0; i < dY.numel(); ++i) {
            gY[i] += static_cast<T>(dY[i]);
          }
        }
      });
}

}  // namespace ad
}  // namespace bcr
