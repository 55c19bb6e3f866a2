#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fsadapt/tensor.hpp"

namespace fsadapt {

/// Fourth-order five-point difference gradient of f with respect to every coordinate of
/// every tensor in params. Each coordinate is perturbed in place and
/// restored exactly. f must be deterministic; a non-finite value raises
/// NumericError.
std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  std::span<Tensor> params, double eps);

/// Ridders extrapolation: a Neville tableau of central differences with
/// steps initial_step / 1.6^k, keeping the entry with the smallest estimated
/// error. Robust where one fixed step is either truncation- or
/// roundoff-limited; costs roughly ten evaluations per coordinate.
std::vector<std::vector<double>> ridders_diff_grad(const std::function<double()>& f,
                                                   std::span<Tensor> params, double initial_step);

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from reporting finite-difference noise as huge errors.
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares stored .grad buffers against numeric gradients.
GradCheckResult compare_gradients(std::span<const Tensor> params,
                                  const std::vector<std::vector<double>>& numeric,
                                  double floor = 1e-6);

}  // namespace fsadapt
