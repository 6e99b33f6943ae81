#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "eeg4d/diff/tensor.hpp"

namespace eeg4d::diff {

struct GradCheckOptions {
  double step = 1e-3;
  // Coordinates probed per tensor; tensors at or below this size are probed exhaustively.
  std::size_t samples_per_tensor = 16;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

struct NamedVar {
  std::string name;
  Var<double> var;
};

// Compares reverse-mode gradients of `loss_fn` with central differences.
// Error per coordinate is |a - n| / max(1, |a|, |n|). `loss_fn` must rebuild
// the graph from the current parameter values on every call.
inline GradCheckResult grad_check(const std::function<Var<double>()>& loss_fn, std::vector<NamedVar> params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& p : params) p.var.zero_grad();
  backward(loss_fn());

  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (auto& p : params) {
    std::vector<double> analytic(p.var.grad().begin(), p.var.grad().end());
    std::vector<std::size_t> coords(p.var.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      auto& v = p.var.value();
      const double orig = v[i];
      v[i] = orig + opt.step;
      const double fp = loss_fn().item();
      v[i] = orig - opt.step;
      const double fm = loss_fn().item();
      v[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double err = std::abs(analytic[i] - numeric) / std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      ++res.coords_checked;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = p.name;
        res.worst_index = i;
        res.worst_analytic = analytic[i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace eeg4d::diff
