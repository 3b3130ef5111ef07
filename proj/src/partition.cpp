#include "cmoe/partition.hpp"

#include <cmath>
#include <string>

namespace cmoe {

ConceptBank::ConceptBank(int num_concepts, int dim, Rng& rng) {
  if (num_concepts < 1 || dim < 1) throw ValueError("ConceptBank: K and D must be >= 1");
  concepts = Parameter("bank.concepts", Tensor::randn(Shape{num_concepts, dim}, rng, 0.1, true));
  alpha_raw = Parameter("bank.alpha_raw", Tensor::zeros(Shape{num_concepts}, true));
}

void ConceptBank::collect(std::vector<Parameter*>& out) {
  out.push_back(&concepts);
  out.push_back(&alpha_raw);
}

Backbone::Backbone(int out_dim, Rng& rng)
    : conv1("backbone.conv1", 3, 16, 3, rng),
      conv2("backbone.conv2", 16, 32, 3, rng),
      conv3("backbone.conv3", 32, out_dim, 3, rng) {}

Tensor Backbone::forward(const Tensor& image) const {
  Tensor x = ops::max_pool2d(ops::relu(conv1.forward(image)));
  x = ops::max_pool2d(ops::relu(conv2.forward(x)));
  return ops::relu(conv3.forward(x));
}

void Backbone::collect(std::vector<Parameter*>& out) {
  conv1.collect(out);
  conv2.collect(out);
  conv3.collect(out);
}

PartitionHead::PartitionHead(int num_concepts, int dim, int num_classes, Rng& rng, int hidden)
    : fc1("head.fc1", num_concepts * dim, hidden, rng), fc2("head.fc2", hidden, num_classes, rng) {}

Tensor PartitionHead::forward(const Tensor& concept_features) const {
  return fc2.forward(ops::relu(fc1.forward(ops::flatten(concept_features))));
}

void PartitionHead::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

Tensor occurrence_probs(const Tensor& features, const Tensor& concepts, const Tensor& alphas) {
  Tensor logits = ops::scale(ops::concept_sq_dists(features, concepts, alphas), -0.5);
  return ops::softmax(logits, 0);
}

std::vector<int> hard_partition(const Tensor& occurrence) {
  if (occurrence.rank() != 3) {
    throw ShapeError("hard_partition: expected K x H x W, got " + shape_str(occurrence.shape()));
  }
  const int k = occurrence.dim(0);
  const size_t plane = static_cast<size_t>(occurrence.dim(1)) * occurrence.dim(2);
  const auto ov = occurrence.values();
  std::vector<int> grid(plane, 0);
  for (size_t p = 0; p < plane; ++p) {
    double best = ov[p];
    int arg = 0;
    for (int j = 1; j < k; ++j) {
      const double v = ov[static_cast<size_t>(j) * plane + p];
      if (v > best) {
        best = v;
        arg = j;
      }
    }
    grid[p] = arg;
  }
  return grid;
}

Tensor presence_prob(const Tensor& occurrence, const Tensor& kernel) {
  if (kernel.rank() != 2) throw ShapeError("presence_prob: kernel must be rank 2");
  double total = 0.0;
  for (double v : kernel.values()) total += v;
  if (std::fabs(total - 1.0) > 1e-6) {
    throw ValueError("presence_prob: kernel must be normalized to sum 1");
  }
  return ops::global_max(ops::smooth2d(occurrence, kernel));
}

Tensor pool_concept_features(const Tensor& features, const Tensor& occurrence,
                             const Tensor& concepts, const Tensor& alphas) {
  Tensor mass = ops::sum_spatial(occurrence);                          // K
  Tensor pooled = ops::weighted_spatial_pool(occurrence, features);    // K x D
  Tensor residual = ops::sub(ops::div_rows(pooled, mass), concepts);   // K x D
  Tensor t = ops::div_rows(residual, alphas);
  return ops::normalize_rows(t, 1e-8);
}

Tensor partition_cls_loss(const std::vector<Tensor>& logits, const std::vector<int>& labels) {
  if (logits.empty() || logits.size() != labels.size()) {
    throw ShapeError("partition_cls_loss: need one label per logits vector");
  }
  std::vector<Tensor> terms;
  terms.reserve(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    terms.push_back(ops::cross_entropy(logits[i], labels[i]));
  }
  return ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

Tensor concept_presence_loss(const std::vector<Tensor>& presences, double delta) {
  if (presences.empty()) throw ShapeError("concept_presence_loss: empty batch");
  for (const auto& p : presences) {
    for (double v : p.values()) {
      if (v < -1e-6 || v > 1.0 + 1e-6) {
        throw ValueError("concept_presence_loss: presence " + std::to_string(v) +
                         " outside [0,1]");
      }
    }
  }
  std::vector<Tensor> terms;
  terms.reserve(presences.size());
  for (const auto& p : presences) {
    terms.push_back(ops::mean_all(ops::abs(ops::log(ops::add_scalar(p, delta)))));
  }
  return ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

Tensor partition_total_loss(const Tensor& cls, const Tensor& reg, double lambda_r) {
  if (lambda_r < 0.0) throw ValueError("partition_total_loss: lambda_r must be >= 0");
  return ops::add(cls, ops::scale(reg, lambda_r));
}

PartitionModel::PartitionModel(int num_concepts, int num_classes_, Rng& rng)
    : backbone(kFeatureDim, rng),
      bank(num_concepts, kFeatureDim, rng),
      head(num_concepts, kFeatureDim, num_classes_, rng),
      gauss(gaussian_kernel2d(kKernelSize, kKernelSigma)),
      num_classes(num_classes_) {}

PartitionModel::Forward PartitionModel::forward(const Tensor& image) const {
  Forward out;
  out.features = backbone.forward(image);
  Tensor alphas = bank.alphas();
  out.occurrence = occurrence_probs(out.features, bank.concepts.tensor, alphas);
  out.presence = presence_prob(out.occurrence, gauss);
  out.concept_features =
      pool_concept_features(out.features, out.occurrence, bank.concepts.tensor, alphas);
  out.logits = head.forward(out.concept_features);
  return out;
}

std::vector<Parameter*> PartitionModel::params() {
  std::vector<Parameter*> out;
  backbone.collect(out);
  bank.collect(out);
  head.collect(out);
  return out;
}

}  // namespace cmoe
