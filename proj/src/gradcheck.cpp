#include "fsadapt/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "fsadapt/errors.hpp"

namespace fsadapt {

std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  std::span<Tensor> params, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  auto eval = [&f] {
    const double v = f();
    if (!std::isfinite(v)) throw NumericError("finite_diff_grad: objective is not finite");
    return v;
  };
  NoGradGuard no_grad;
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    auto values = p.mutable_data();
    std::vector<double> g(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      auto at = [&](double offset) {
        values[i] = original + offset;
        return eval();
      };
      const double p2 = at(2.0 * eps), p1 = at(eps), m1 = at(-eps), m2 = at(-2.0 * eps);
      values[i] = original;
      g[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

std::vector<std::vector<double>> ridders_diff_grad(const std::function<double()>& f,
                                                   std::span<Tensor> params, double initial_step) {
  if (!(initial_step > 0.0)) throw ContractError("ridders_diff_grad: initial_step must be positive");
  constexpr int kTab = 8;
  constexpr double kShrink = 1.6;
  constexpr double kShrink2 = kShrink * kShrink;
  constexpr double kSafe = 2.0;
  NoGradGuard no_grad;
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    auto values = p.mutable_data();
    std::vector<double> g(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      auto central = [&](double h) {
        values[i] = original + h;
        const double plus = f();
        values[i] = original - h;
        const double minus = f();
        values[i] = original;
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
          throw NumericError("ridders_diff_grad: objective is not finite");
        }
        return (plus - minus) / (2.0 * h);
      };
      std::array<std::array<double, kTab>, kTab> a{};
      double h = initial_step;
      double best_err = std::numeric_limits<double>::max();
      a[0][0] = central(h);
      double best = a[0][0];
      for (int col = 1; col < kTab; ++col) {
        h /= kShrink;
        a[0][col] = central(h);
        double fac = kShrink2;
        for (int row = 1; row <= col; ++row) {
          a[row][col] = (a[row - 1][col] * fac - a[row - 1][col - 1]) / (fac - 1.0);
          fac *= kShrink2;
          const double err = std::max(std::abs(a[row][col] - a[row - 1][col]),
                                      std::abs(a[row][col] - a[row - 1][col - 1]));
          if (err <= best_err) {
            best_err = err;
            best = a[row][col];
          }
        }
        if (std::abs(a[col][col] - a[col - 1][col - 1]) >= kSafe * best_err) break;
      }
      g[i] = best;
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult compare_gradients(std::span<const Tensor> params,
                                  const std::vector<std::vector<double>>& numeric,
                                  double floor) {
  if (params.size() != numeric.size()) {
    throw ContractError("compare_gradients: parameter count mismatch");
  }
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto analytic = params[p].grad();
    const auto& num = numeric[p];
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = analytic.empty() ? 0.0 : analytic[i];
      result.max_relative_error = std::max(result.max_relative_error, relative_error(a, num[i], floor));
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace fsadapt
