#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cdvgm/tensor.hpp"

namespace cdvgm {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

// Compares the tape gradient of scalar f at x with central differences
// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate.
// eps must lie in [1e-7, 1e-3].
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double eps = 1e-5);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParamCheck {
  std::string name;
  GradCheckResult result;
};

// Same comparison for leaf tensors that f() reads by reference. Each leaf is
// perturbed in place and restored afterwards; f must be deterministic.
std::vector<ParamCheck> finite_diff_check_params(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                                 double eps = 1e-5);

}  // namespace cdvgm
