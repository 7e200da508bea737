// Central-difference gradient checking against the autodiff backward pass.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "augdet/rng.hpp"
#include "augdet/tensor.hpp"

namespace augdet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Central-difference gradients of a scalar function for the listed
// coordinates of one parameter. Restores the parameter afterwards.
inline std::vector<double> central_diff_grads(
    const std::function<Tensor()>& f, Parameter& param,
    const std::vector<std::size_t>& coords, double eps) {
  std::vector<double> out;
  out.reserve(coords.size());
  auto& val = param.tensor.value_mut();
  for (std::size_t c : coords) {
    const double saved = val[c];
    val[c] = saved + eps;
    const double fp = f().item();
    val[c] = saved - eps;
    const double fm = f().item();
    val[c] = saved;
    out.push_back((fp - fm) / (2.0 * eps));
  }
  return out;
}

// rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Runs f once for the analytic gradients, then central differences per
// coordinate. Parameters with more than `max_coords_per_param` entries get a
// seeded coordinate subsample; small parameters are swept exhaustively.
inline GradCheckReport finite_diff_check(
    const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
    double eps, std::size_t max_coords_per_param = SIZE_MAX,
    std::uint64_t sample_seed = 17) {
  zero_grads(params);
  Tensor loss = f();
  loss.backward();
  std::unordered_map<Parameter*, std::vector<double>> analytic;
  for (Parameter* p : params) analytic[p] = p->tensor.grad();

  GradCheckReport report;
  Rng rng(sample_seed);
  for (Parameter* p : params) {
    const std::size_t n = p->tensor.size();
    std::vector<std::size_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<std::size_t>(rng.below(n)));
    }
    const std::vector<double> numeric =
        central_diff_grads(f, *p, coords, eps);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const double a = analytic[p][coords[i]];
      const double rel = relative_error(a, numeric[i]);
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p->name;
        report.worst_coord = coords[i];
        report.worst_analytic = a;
        report.worst_numeric = numeric[i];
      }
    }
  }
  zero_grads(params);
  return report;
}

}  // namespace augdet
