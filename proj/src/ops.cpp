#include <cmath>
#include <numbers>
#include <numeric>

#include "fsadapt/errors.hpp"
#include "fsadapt/tensor.hpp"
#include "tensor_internal.hpp"

namespace fsadapt {

namespace {

[[noreturn]] void dim_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(x.shape()));
  }
}

// Rows of the last dimension: (number of rows, row length).
std::pair<std::size_t, std::size_t> rows_of(const char* op, const Tensor& x) {
  if (x.rank() == 0) {
    throw DimensionError(std::string(op) + ": needs at least one dimension");
  }
  const std::size_t n = x.shape().back();
  return {x.numel() / n, n};
}

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.rank() == 0) return Broadcast::kLeftScalar;
  if (b.rank() == 0) return Broadcast::kRightScalar;
  dim_error(op, a, b);
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Broadcast kind = broadcast_kind(op, a, b);
  const Shape out_shape = kind == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto ad = a.data();
  const auto bd = b.data();
  auto at_a = [kind](std::span<const double> v, std::size_t i) {
    return kind == Broadcast::kLeftScalar ? v[0] : v[i];
  };
  auto at_b = [kind](std::span<const double> v, std::size_t i) {
    return kind == Broadcast::kRightScalar ? v[0] : v[i];
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(at_a(ad, i), at_b(bd, i));
  return make_op_result(out_shape, std::move(out), op, {&a, &b},
                        [a, b, n, kind, at_a, at_b, da, db](std::span<const double> g) {
                          const auto av = a.data();
                          const auto bv = b.data();
                          if (auto* ga = grad_sink(a)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              const double d = g[i] * da(at_a(av, i), at_b(bv, i));
                              (*ga)[kind == Broadcast::kLeftScalar ? 0 : i] += d;
                            }
                          }
                          if (auto* gb = grad_sink(b)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              const double d = g[i] * db(at_a(av, i), at_b(bv, i));
                              (*gb)[kind == Broadcast::kRightScalar ? 0 : i] += d;
                            }
                          }
                        });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  // deriv(x, y) so ops like sigmoid/exp can reuse their output.
  auto result_data = out;
  return make_op_result(x.shape(), std::move(out), op, {&x},
                        [x, y = std::move(result_data), deriv](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            const auto xv = x.data();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*gx)[i] += g[i] * deriv(xv[i], y[i]);
                            }
                          }
                        });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) dim_error("matmul", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_op_result({m, n}, std::move(out), "matmul", {&a, &b},
                        [a, b, m, k, n](std::span<const double> g) {
                          const auto av = a.data();
                          const auto bv = b.data();
                          if (auto* ga = grad_sink(a)) {
                            // dA = G * B^T
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                double acc = 0.0;
                                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                                (*ga)[i * k + p] += acc;
                              }
                            }
                          }
                          if (auto* gb = grad_sink(b)) {
                            // dB = A^T * G
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                const double aval = av[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aval * g[i * n + j];
                              }
                            }
                          }
                        });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) dim_error("bmm", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* as = ad.data() + s * m * k;
    const double* bs = bd.data() + s * k * n;
    double* os = out.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = as[i * k + p];
        for (std::size_t j = 0; j < n; ++j) os[i * n + j] += av * bs[p * n + j];
      }
    }
  }
  return make_op_result({batch, m, n}, std::move(out), "bmm", {&a, &b},
                        [a, b, batch, m, k, n](std::span<const double> g) {
                          const auto av = a.data();
                          const auto bv = b.data();
                          auto* ga = grad_sink(a);
                          auto* gb = grad_sink(b);
                          for (std::size_t s = 0; s < batch; ++s) {
                            const double* as = av.data() + s * m * k;
                            const double* bs = bv.data() + s * k * n;
                            const double* gs = g.data() + s * m * n;
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                if (ga) {
                                  double acc = 0.0;
                                  for (std::size_t j = 0; j < n; ++j) acc += gs[i * n + j] * bs[p * n + j];
                                  (*ga)[s * m * k + i * k + p] += acc;
                                }
                                if (gb) {
                                  const double aval = as[i * k + p];
                                  for (std::size_t j = 0; j < n; ++j) {
                                    (*gb)[s * k * n + p * n + j] += aval * gs[i * n + j];
                                  }
                                }
                              }
                            }
                          }
                        });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (const double v : x.data()) {
    if (!(v > 0.0)) {
      throw DomainError("log: argument must be positive, got " + std::to_string(v));
    }
  }
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  return unary(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  double acc = 0.0;
  for (const double v : xd) acc += v;
  return make_op_result({}, {acc}, "sum", {&x}, [x](std::span<const double> g) {
    if (auto* gx = grad_sink(x)) {
      for (auto& v : *gx) v += g[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  const auto xd = x.data();
  const double n = static_cast<double>(xd.size());
  double acc = 0.0;
  for (const double v : xd) acc += v;
  return make_op_result({}, {acc / n}, "mean", {&x}, [x, n](std::span<const double> g) {
    if (auto* gx = grad_sink(x)) {
      for (auto& v : *gx) v += g[0] / n;
    }
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  const auto xd = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xd[(o * len + l) * inner + i];
    }
  }
  for (auto& v : out) v /= static_cast<double>(len);
  return make_op_result(out_shape, std::move(out), "mean_axis", {&x},
                        [x, outer, inner, len](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            const double w = 1.0 / static_cast<double>(len);
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t l = 0; l < len; ++l) {
                                for (std::size_t i = 0; i < inner; ++i) {
                                  (*gx)[(o * len + l) * inner + i] += g[o * inner + i] * w;
                                }
                              }
                            }
                          }
                        });
}

Tensor softmax_lastdim(const Tensor& x) {
  const auto [rows, n] = rows_of("softmax_lastdim", x);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  auto y = out;
  return make_op_result(x.shape(), std::move(out), "softmax_lastdim", {&x},
                        [x, y = std::move(y), rows, n](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                              for (std::size_t j = 0; j < n; ++j) {
                                (*gx)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                              }
                            }
                          }
                        });
}

Tensor layer_norm_lastdim(const Tensor& x, double eps) {
  if (!(eps >= 0.0)) throw ContractError("layer_norm: epsilon must be non-negative");
  const auto [rows, n] = rows_of("layer_norm_lastdim", x);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    if (!(var + eps > 0.0)) {
      throw NumericError("layer_norm: zero variance row with epsilon 0");
    }
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mu) * inv_std[r];
  }
  auto y = out;
  return make_op_result(
      x.shape(), std::move(out), "layer_norm_lastdim", {&x},
      [x, y = std::move(y), inv_std = std::move(inv_std), rows, n](std::span<const double> g) {
        if (auto* gx = grad_sink(x)) {
          const double dn = static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double g_mean = 0.0, gy_mean = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              g_mean += g[r * n + j];
              gy_mean += g[r * n + j] * y[r * n + j];
            }
            g_mean /= dn;
            gy_mean /= dn;
            for (std::size_t j = 0; j < n; ++j) {
              (*gx)[r * n + j] +=
                  inv_std[r] * (g[r * n + j] - g_mean - y[r * n + j] * gy_mean);
            }
          }
        }
      });
}

Tensor normalize_lastdim(const Tensor& x) {
  const auto [rows, n] = rows_of("normalize_lastdim", x);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += xd[r * n + j] * xd[r * n + j];
    norms[r] = std::sqrt(sq);
    if (!(norms[r] > 0.0)) {
      throw NumericError("normalize: zero-norm row " + std::to_string(r));
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] / norms[r];
  }
  auto y = out;
  return make_op_result(
      x.shape(), std::move(out), "normalize_lastdim", {&x},
      [x, y = std::move(y), norms = std::move(norms), rows, n](std::span<const double> g) {
        if (auto* gx = grad_sink(x)) {
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
              (*gx)[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / norms[r];
            }
          }
        }
      });
}

namespace {

std::size_t trailing_check(const char* op, const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.empty() || bs.size() > xs.size() ||
      !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    dim_error(op, x, b);
  }
  return shape_numel(bs);
}

}  // namespace

Tensor add_trailing(const Tensor& x, const Tensor& b) {
  const std::size_t inner = trailing_check("add_trailing", x, b);
  const auto xd = x.data();
  const auto bd = b.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] + bd[i % inner];
  return make_op_result(x.shape(), std::move(out), "add_trailing", {&x, &b},
                        [x, b, inner](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                          }
                          if (auto* gb = grad_sink(b)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] += g[i];
                          }
                        });
}

Tensor mul_trailing(const Tensor& x, const Tensor& gain) {
  const std::size_t inner = trailing_check("mul_trailing", x, gain);
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * gd[i % inner];
  return make_op_result(x.shape(), std::move(out), "mul_trailing", {&x, &gain},
                        [x, gain, inner](std::span<const double> g) {
                          const auto xv = x.data();
                          const auto gv = gain.data();
                          if (auto* gx = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * gv[i % inner];
                          }
                          if (auto* gg = grad_sink(gain)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % inner] += g[i] * xv[i];
                          }
                        });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(out), "reshape", {&x},
                        [x](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                          }
                        });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t rank = s.size();
  if (axes.size() != rank) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for " + shape_str(s));
  }
  std::vector<bool> seen(rank, false);
  for (const auto a : axes) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid axis order");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[axes[i]];

  // Source offset of each output element, in output order.
  const std::size_t n = x.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[axes[i]];
    source[o] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[source[o]];
  return make_op_result(out_shape, std::move(out), "permute", {&x},
                        [x, source = std::move(source)](std::span<const double> g) {
                          if (auto* gx = grad_sink(x)) {
                            for (std::size_t o = 0; o < g.size(); ++o) (*gx)[source[o]] += g[o];
                          }
                        });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  return permute(x, {1, 0});
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("stack: no tensors");
  const Shape& inner = items.front().shape();
  for (const auto& t : items) {
    if (t.shape() != inner) dim_error("stack", items.front(), t);
  }
  const std::size_t block = shape_numel(inner);
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<double> out;
  out.reserve(block * items.size());
  for (const auto& t : items) out.insert(out.end(), t.data().begin(), t.data().end());

  std::vector<const Tensor*> inputs;
  for (const auto& t : items) inputs.push_back(&t);
  std::vector<Tensor> parts(items.begin(), items.end());
  return make_op_result(out_shape, std::move(out), "stack", inputs,
                        [parts = std::move(parts), block](std::span<const double> g) {
                          for (std::size_t i = 0; i < parts.size(); ++i) {
                            if (auto* gp = grad_sink(parts[i])) {
                              for (std::size_t j = 0; j < block; ++j) (*gp)[j] += g[i * block + j];
                            }
                          }
                        });
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  require_rank("patchify", images, 4);
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_str(images.shape()) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t tokens = gh * gw;
  const std::size_t feat = c * patch * patch;
  std::vector<std::size_t> source(b * tokens * feat);
  std::size_t o = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ty = 0; ty < gh; ++ty) {
      for (std::size_t tx = 0; tx < gw; ++tx) {
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t py = 0; py < patch; ++py) {
            for (std::size_t px = 0; px < patch; ++px) {
              source[o++] = ((bi * c + ci) * h + ty * patch + py) * w + tx * patch + px;
            }
          }
        }
      }
    }
  }
  const auto xd = images.data();
  std::vector<double> out(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) out[i] = xd[source[i]];
  return make_op_result({b, tokens, feat}, std::move(out), "patchify", {&images},
                        [images, source = std::move(source)](std::span<const double> g) {
                          if (auto* gx = grad_sink(images)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[source[i]] += g[i];
                          }
                        });
}

}  // namespace fsadapt
