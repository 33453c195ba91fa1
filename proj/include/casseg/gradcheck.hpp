#pragma once

// Central-difference gradient verification for float64 graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "casseg/ops.hpp"
#include "casseg/tensor.hpp"

namespace casseg::nn {

struct GradCheckOptions {
  double eps = 1e-4;
  // Coordinates probed per input; <= 0 probes all of them. When limited, the
  // probed coordinates are a seeded random sample.
  std::int64_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // Skip coordinates whose +-eps probes leave the linear piece of some
  // leaky_relu or max_pool3d (a sign flip or a new pooling winner).
  bool skip_kinks = true;
  // Before skipping, retry such a coordinate with eps shrunk tenfold at a
  // time down to this floor. 0 disables the retry.
  double min_eps = 1e-7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;
  // Checked coordinates that needed a step smaller than eps.
  std::int64_t coords_refined = 0;
  // Location of the worst coordinate.
  std::size_t worst_input = 0;
  std::int64_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// f evaluates a scalar loss from the current values of `inputs`, which must
// require gradients. Returns the max over probed coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult finite_diff_check_detailed(const std::function<Tensor<double>()>& f,
                                                  std::vector<Tensor<double>> inputs,
                                                  const GradCheckOptions& opts = {}) {
  for (auto& t : inputs) {
    require(t.requires_grad(), ErrorKind::Misuse, "finite_diff_check inputs must require grad");
    t.zero_grad();
  }
  std::uint64_t base_piece = 0;
  Tensor<double> loss;
  {
    BranchRecorder rec;
    loss = f();
    base_piece = rec.digest();
  }
  require(std::isfinite(loss.item()), ErrorKind::Numeric, "loss is not finite at the base point");
  backward(loss);

  GradCheckResult result;
  std::mt19937_64 rng(opts.seed);
  auto probe = [&](std::uint64_t& piece) {
    BranchRecorder rec;
    const double v = f().item();
    piece = rec.digest();
    return v;
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0);

    std::vector<std::int64_t> coords(static_cast<std::size_t>(t.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_input > 0 && static_cast<std::int64_t>(coords.size()) > opts.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opts.max_coords_per_input));
    }

    auto vals = t.values();
    for (std::int64_t i : coords) {
      const double saved = vals[i];
      double h = opts.eps, up = 0.0, down = 0.0;
      bool clean = false;
      for (;;) {
        std::uint64_t up_piece = 0, down_piece = 0;
        vals[i] = saved + h;
        up = probe(up_piece);
        vals[i] = saved - h;
        down = probe(down_piece);
        vals[i] = saved;
        require(std::isfinite(up) && std::isfinite(down), ErrorKind::Numeric, "non-finite loss under perturbation");
        clean = !opts.skip_kinks || (up_piece == base_piece && down_piece == base_piece);
        if (clean || h / 10.0 < opts.min_eps * (1.0 - 1e-9) || opts.min_eps <= 0.0) break;
        h /= 10.0;
      }
      if (!clean) {
        ++result.coords_skipped;
        continue;
      }
      if (h < opts.eps) ++result.coords_refined;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      require(std::isfinite(a), ErrorKind::Numeric, "non-finite analytic gradient");
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.coords_checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

inline double finite_diff_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                double eps = 1e-4) {
  GradCheckOptions opts;
  opts.eps = eps;
  return finite_diff_check_detailed(f, std::move(inputs), opts).max_rel_error;
}

}  // namespace casseg::nn
