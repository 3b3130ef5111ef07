#include "cmoe/nn.hpp"

#include <cmath>
#include <cstring>

namespace cmoe {

void sgd_step(const std::vector<Parameter*>& params, const OptimizerConfig& cfg) {
  for (Parameter* p : params) {
    if (!p->tensor.has_grad()) {
      throw ValueError("sgd_step: parameter '" + p->name + "' has no gradient");
    }
    auto theta = p->tensor.values();
    const auto grad = p->tensor.grad();
    for (size_t i = 0; i < theta.size(); ++i) {
      const double v = cfg.momentum * p->momentum[i] + grad[i] + cfg.weight_decay * theta[i];
      p->momentum[i] = v;
      theta[i] -= cfg.learning_rate * v;
    }
    p->tensor.zero_grad();
  }
}

Tensor gaussian_kernel2d(int size, double sigma) {
  if (size < 1 || size % 2 == 0) {
    throw ValueError("gaussian_kernel2d: size must be odd and positive, got " + std::to_string(size));
  }
  if (!(sigma > 0.0)) throw ValueError("gaussian_kernel2d: sigma must be positive");
  const int m = (size - 1) / 2;
  std::vector<double> vals(static_cast<size_t>(size) * size);
  double total = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy = y - m, dx = x - m;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      vals[static_cast<size_t>(y) * size + x] = v;
      total += v;
    }
  }
  for (auto& v : vals) v /= total;
  return Tensor::from(Shape{size, size}, std::move(vals));
}

DenseLayer::DenseLayer(const std::string& name, int in, int out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  weight = Parameter(name + ".weight", Tensor::randn(Shape{out, in}, rng, stddev, true));
  bias = Parameter(name + ".bias", Tensor::zeros(Shape{out}, true));
}

void DenseLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

ConvLayer::ConvLayer(const std::string& name, int in, int out, int k, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  weight = Parameter(name + ".weight", Tensor::randn(Shape{out, in, k, k}, rng, stddev, true));
  bias = Parameter(name + ".bias", Tensor::zeros(Shape{out}, true));
}

void ConvLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

uint64_t params_hash(const std::vector<Parameter*>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const Parameter* p : params) {
    mix(p->name.data(), p->name.size());
    const auto vals = p->tensor.values();
    mix(vals.data(), vals.size() * sizeof(double));
  }
  return h;
}

}  // namespace cmoe
