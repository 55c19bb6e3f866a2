#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fsadapt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense float64 tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a cheap shared handle. Values produced by operations are never
/// modified afterwards; only leaves (parameters) are updated in place by the
/// optimizer through mutable_data(). Every operation rejects non-finite
/// results with NumericError.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access for leaves. Throws ContractError on graph outputs.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Allocates (or resets) a zero gradient buffer.
  void zero_grad();
  void clear_grad();

  /// Reverse-mode sweep from a scalar. Gradients accumulate into every
  /// reachable tensor with requires_grad.
  void backward() const;

  /// Copy of the values without graph history.
  Tensor detach() const;

  const detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_op_result(Shape, std::vector<double>, const char*,
                               std::span<const Tensor* const>,
                               std::function<void(std::span<const double>)>);
  friend std::vector<double>* grad_sink(const Tensor&);
};

bool grad_enabled();

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Matrix products.
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);

// Elementwise. Binary ops accept equal shapes or a scalar on either side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm_lastdim(const Tensor& x, double eps = 1e-5);
/// Rows scaled to unit L2 norm. Zero rows raise NumericError.
Tensor normalize_lastdim(const Tensor& x);

// Trailing-dimension broadcasts: b's shape must equal the last dims of x.
Tensor add_trailing(const Tensor& x, const Tensor& b);
Tensor mul_trailing(const Tensor& x, const Tensor& g);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x);
Tensor stack(std::span<const Tensor> items);
/// [B,C,H,W] -> [B, (H/p)*(W/p), C*p*p], patches in row-major grid order.
Tensor patchify(const Tensor& images, std::size_t patch);

}  // namespace fsadapt
