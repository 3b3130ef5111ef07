#pragma once

#include <string>
#include <vector>

#include "cmoe/ops.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe {

// A named trainable tensor plus its SGD momentum buffer.
struct Parameter {
  std::string name;
  Tensor tensor;                 // requires_grad = true
  std::vector<double> momentum;  // same length as tensor

  Parameter() = default;
  Parameter(std::string name_, Tensor t)
      : name(std::move(name_)), tensor(std::move(t)), momentum(tensor.numel(), 0.0) {}
};

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// v <- momentum*v + grad + weight_decay*theta;  theta <- theta - lr*v.
// Grads are zeroed afterwards. Throws ValueError if any param has no grad.
void sgd_step(const std::vector<Parameter*>& params, const OptimizerConfig& cfg);

// Normalized 2D Gaussian, entries proportional to exp(-(dx^2+dy^2)/(2 sigma^2)).
// Size must be odd and positive; sigma positive.
Tensor gaussian_kernel2d(int size, double sigma);

// Fully connected layer with He-normal init.
struct DenseLayer {
  Parameter weight;  // out x in
  Parameter bias;    // out

  DenseLayer() = default;
  DenseLayer(const std::string& name, int in, int out, Rng& rng);

  Tensor forward(const Tensor& x) const {
    return ops::add(ops::matmul(weight.tensor, x), bias.tensor);
  }
  void collect(std::vector<Parameter*>& out);
};

// 3x3-style conv layer, stride 1, same padding.
struct ConvLayer {
  Parameter weight;  // out x in x k x k
  Parameter bias;    // out

  ConvLayer() = default;
  ConvLayer(const std::string& name, int in, int out, int k, Rng& rng);

  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight.tensor, bias.tensor); }
  void collect(std::vector<Parameter*>& out);
};

// FNV-1a over the raw parameter bytes; used for freeze checks.
uint64_t params_hash(const std::vector<Parameter*>& params);

}  // namespace cmoe
