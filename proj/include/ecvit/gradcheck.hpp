#pragma once

#include <functional>
#include <span>

#include "ecvit/tensor.hpp"

namespace ecvit {

inline constexpr double kFiniteDiffStep = 1e-4;

/// Central differences of a scalar function at x, one element at a time.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h = kFiniteDiffStep);

/// Same, but perturbs `param` in place (restoring each value afterwards), for
/// functions that read the parameter through a model rather than an argument.
std::vector<double> finite_diff_inplace(const std::function<double()>& f, Tensor<double>& param,
                                        double h = kFiniteDiffStep);

/// ||a - b|| / max(||a||, ||b||, 1e-8).
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace ecvit
