#include "cmoe/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace cmoe {

size_t shape_numel(const Shape& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

std::shared_ptr<detail::TensorNode> make_node(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad && g_grad_enabled;
  if (node->requires_grad) node->ensure_grad();
  return node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  return wrap(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  size_t n = shape_numel(shape);
  return wrap(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return wrap(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return wrap(make_node(Shape{}, std::vector<double>{value}, requires_grad));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<double> vals(n);
  for (auto& v : vals) v = rng.normal() * stddev;
  return wrap(make_node(std::move(shape), std::move(vals), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("tensor is undefined");
  return node_->shape;
}

size_t Tensor::numel() const {
  if (!node_) throw ShapeError("tensor is undefined");
  return node_->numel();
}

std::span<double> Tensor::values() {
  if (!node_) throw ShapeError("tensor is undefined");
  return node_->data;
}

std::span<const double> Tensor::values() const {
  if (!node_) throw ShapeError("tensor is undefined");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a one-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ValueError("tensor has no gradient buffer");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() {
  if (!node_) throw ShapeError("backward() on undefined tensor");
  if (node_->numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) {
    throw ValueError("backward() on a tensor with no recorded graph");
  }

  // Iterative post-order DFS yields a topological order of the graph.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<std::pair<detail::TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [cur, idx] = stack.back();
    if (idx < cur->parents.size()) {
      detail::TensorNode* parent = cur->parents[idx].get();
      ++idx;
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->ensure_grad();
  node_->grad[0] = 1.0;

  // order is post-order: parents before children; walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }

  // Free the recorded graph. Leaf grads stay in place for the optimizer.
  for (auto* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = false;
  return wrap(std::move(node));
}

Tensor Tensor::clone() const {
  if (!node_) return Tensor();
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad;
  node->grad = node_->grad;
  return wrap(std::move(node));
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

}  // namespace cmoe
