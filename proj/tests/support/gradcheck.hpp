#pragma once

// Central finite-difference gradient checks against the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dmasknas/autodiff/tape.hpp"

namespace dmasknas::testing {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // stencils that crossed an activation kink
};

using ScalarFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Relative error |a - n| / max(|a|, |n|, floor).
inline double rel_error(double a, double n, double floor = 1e-2) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradCheckOptions {
  double step = 1e-3;
  std::size_t max_coords_per_input = 24;
  std::uint64_t seed = 1234;
};

inline GradCheckResult check_gradients(const std::vector<Tensor<double>>& inputs,
                                       const ScalarFn& f, GradCheckOptions opt = {}) {
  GradCheckResult res;
  std::vector<double> analytic_flat;
  std::vector<std::uint8_t> base_regions;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> t;
    t.enable_region_log(true);
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(t.leaf(x, true));
    Var loss = f(t, leaves);
    auto grads = t.backward(loss);
    for (Var v : leaves) analytic.push_back(grads[v]);
    base_regions = t.region_log();
  }
  auto eval = [&](std::size_t which, std::size_t coord, double delta,
                  std::vector<std::uint8_t>& regions) {
    Tape<double> t;
    t.enable_region_log(true);
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Tensor<double> x = inputs[i];
      if (i == which) x[coord] += delta;
      leaves.push_back(t.leaf(std::move(x), true));
    }
    double v = t.value(f(t, leaves)).item();
    regions = t.region_log();
    return v;
  };
  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].size());
    for (std::size_t c = 0; c < coords.size(); ++c) coords[c] = c;
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(coords.size(), opt.max_coords_per_input));
    for (auto c : coords) {
      std::vector<std::uint8_t> rp, rm;
      const double fp = eval(i, c, opt.step, rp);
      const double fm = eval(i, c, -opt.step, rm);
      if (rp != base_regions || rm != base_regions) {
        ++res.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2 * opt.step);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[i][c], numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1,
                                    double hi = 1) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

}  // namespace dmasknas::testing
