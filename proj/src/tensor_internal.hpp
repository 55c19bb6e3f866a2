#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "fsadapt/tensor.hpp"

namespace fsadapt {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = nullptr;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Receives this node's output gradient and accumulates into the parents.
  std::function<void(std::span<const double>)> backward_fn;
};

}  // namespace detail

/// Wraps an op's forward values. Records a graph node when grad mode is on
/// and any input requires grad. Non-finite values raise NumericError.
Tensor make_op_result(Shape shape, std::vector<double> data, const char* op,
                      std::span<const Tensor* const> inputs,
                      std::function<void(std::span<const double>)> backward);

inline Tensor make_op_result(Shape shape, std::vector<double> data, const char* op,
                             std::initializer_list<const Tensor*> inputs,
                             std::function<void(std::span<const double>)> backward) {
  return make_op_result(std::move(shape), std::move(data), op,
                        std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                        std::move(backward));
}

/// Gradient buffer of t (allocated on demand), or nullptr when t does not
/// take gradients.
std::vector<double>* grad_sink(const Tensor& t);

}  // namespace fsadapt
