#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcr/autodiff.hpp"
#include "bcr/tensor.hpp"

// Central-difference verification of analytic gradients. Always runs in
// double precision; the training path instantiates the same templates in
// float.

namespace bcr {

struct GradCheckOptions {
  double eps = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;
  // 0 = check every coordinate; otherwise a seeded subsample per tensor.
  int max_coords_per_tensor = 0;
  uint64_t sample_seed = 17;
};

struct GradReport {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
  int coords_checked = 0;
  bool pass = true;
};

/// Checks d(loss)/d(param) for every listed parameter against central
/// differences. `loss_fn` must rebuild the graph from current param values
/// and return the scalar loss var; any discrete choices inside it must be
/// frozen so perturbed evaluations stay on the same code path.
template <typename T>
std::vector<GradReport> grad_check(
    const std::function<ad::VarPtr<T>()>& loss_fn,
    const std::vector<ad::VarPtr<T>>& params,
    const GradCheckOptions& opts = {}) {
  auto loss = loss_fn();
  for (const auto& p : params) {
    p->ensure_grad();
    p->grad.fill(T(0));
  }
  ad::backward(loss);
  if (!loss->value.all_finite()) {
    throw std::runtime_error("grad_check: non-finite loss");
  }

  std::vector<GradReport> reports;
  for (const auto& p : params) {
    GradReport rep;
    rep.name = p->name;
    const int64_t n = p->value.numel();
    std::vector<int64_t> coords;
    if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
      Rng rng(hash_seed(opts.sample_seed,
                        std::hash<std::string>{}(p->name) & 0xffffffffull));
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }
    for (int64_t i : coords) {
      const T saved = p->value[i];
      p->value[i] = saved + static_cast<T>(opts.eps);
      const double fp = loss_fn()->scalar();
      p->value[i] = saved - static_cast<T>(opts.eps);
      const double fm = loss_fn()->scalar();
      p->value[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("grad_check: non-finite perturbed loss at " +
                                 p->name);
      }
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double analytic = static_cast<double>(p->grad[i]);
      const double abs_err = std::abs(analytic - numeric);
      rep.max_abs = std::max(rep.max_abs, abs_err);
      if (abs_err > opts.abs_floor) {
        const double denom =
            std::max(std::abs(analytic), std::abs(numeric));
        rep.max_rel = std::max(rep.max_rel, abs_err / denom);
      }
      ++rep.coords_checked;
    }
    rep.pass = rep.max_rel <= opts.rel_tol || rep.max_abs <= opts.abs_floor;
    reports.push_back(std::move(rep));
  }
  return reports;
}

inline bool all_pass(const std::vector<GradReport>& reports) {
  for (const auto& r : reports) {
    if (!r.pass) return false;
  }
  return true;
}

}  // namespace bcr
