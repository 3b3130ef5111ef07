#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmoe/error.hpp"
#include "cmoe/rng.hpp"

namespace cmoe {

// Dimensions of a dense tensor. Rank 0 denotes a scalar (one element).
using Shape = std::vector<int>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily; shape mirrors data when present

  // Reverse-mode graph; populated only while a forward pass is live and
  // released after backward().
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// When grad recording is disabled, ops produce plain values with no graph.
// Used for inference and frozen-model evaluation.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense 64-bit float tensor with optional reverse-mode gradient tracking.
// Value-like handle: copies share the underlying buffer. A computation graph
// is confined to the thread that built it; distinct tensors may be used from
// different threads freely.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Entries i.i.d. normal(0, stddev^2) drawn in index order from `rng`.
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
  size_t numel() const;

  std::span<double> values();
  std::span<const double> values() const;
  double operator[](size_t i) const { return values()[i]; }

  // Scalar extraction; throws ShapeError unless numel() == 1.
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;  // throws if no grad buffer
  void zero_grad();

  // Reverse-mode sweep from a scalar loss. Populates grad on every reachable
  // tensor that requires grad, then frees the recorded graph.
  void backward();

  // Same values, detached from any graph and with requires_grad = false.
  Tensor detach() const;
  Tensor clone() const;  // deep copy, shares nothing

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

}  // namespace cmoe
