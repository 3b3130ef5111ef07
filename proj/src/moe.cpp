#include "cmoe/moe.hpp"

#include <string>

namespace cmoe {

int argmax_lowest(std::span<const double> values) {
  int arg = 0;
  for (size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<size_t>(arg)]) arg = static_cast<int>(i);
  }
  return arg;
}

Expert::Expert(int index, int dim, int num_classes, Rng& rng, int hidden)
    : fc1("expert" + std::to_string(index) + ".fc1", dim, hidden, rng),
      fc2("expert" + std::to_string(index) + ".fc2", hidden, num_classes, rng) {}

Tensor Expert::forward(const Tensor& concept_feature) const {
  return ops::softmax(fc2.forward(ops::relu(fc1.forward(concept_feature))), 0);
}

void Expert::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

GateNetwork::GateNetwork(int num_concepts, int dim, Rng& rng, int hidden)
    : fc1("gate.fc1", num_concepts * dim, hidden, rng), fc2("gate.fc2", hidden, num_concepts, rng) {}

Tensor GateNetwork::forward(const Tensor& concept_features) const {
  return ops::softmax(fc2.forward(ops::relu(fc1.forward(ops::flatten(concept_features)))), 0);
}

void GateNetwork::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

Tensor aggregate_probs(const Tensor& weights, const std::vector<Tensor>& expert_probs) {
  if (weights.rank() != 1) throw ShapeError("aggregate_probs: weights must be rank 1");
  if (static_cast<size_t>(weights.dim(0)) != expert_probs.size()) {
    throw ShapeError("aggregate_probs: " + std::to_string(weights.dim(0)) + " weights for " +
                     std::to_string(expert_probs.size()) + " expert outputs");
  }
  // P^T w with P the K x C matrix of expert probability rows.
  return ops::matmul(ops::transpose(ops::stack_rows(expert_probs)), weights);
}

Tensor expert_loss(const std::vector<std::vector<Tensor>>& expert_probs,
                   const std::vector<int>& labels) {
  if (expert_probs.empty() || expert_probs.size() != labels.size()) {
    throw ShapeError("expert_loss: need one label per sample");
  }
  std::vector<Tensor> terms;
  terms.reserve(expert_probs.size() * expert_probs.front().size());
  for (size_t i = 0; i < expert_probs.size(); ++i) {
    for (const auto& probs : expert_probs[i]) {
      terms.push_back(ops::nll_probs(probs, labels[i]));
    }
  }
  return ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(expert_probs.size()));
}

Tensor gate_loss(const std::vector<Tensor>& aggregates, const std::vector<int>& labels,
                 const std::vector<Tensor>& weights, double gamma) {
  if (aggregates.empty() || aggregates.size() != labels.size() ||
      aggregates.size() != weights.size()) {
    throw ShapeError("gate_loss: batch sizes differ");
  }
  if (gamma < 0.0) throw ValueError("gate_loss: gamma must be >= 0");
  const double n = static_cast<double>(aggregates.size());
  const int k = weights.front().dim(0);

  std::vector<Tensor> ce_terms;
  std::vector<Tensor> pen_terms;
  ce_terms.reserve(aggregates.size());
  pen_terms.reserve(aggregates.size());
  for (size_t i = 0; i < aggregates.size(); ++i) {
    ce_terms.push_back(ops::nll_probs(aggregates[i], labels[i]));
    Tensor dev = ops::add_scalar(weights[i], -1.0 / static_cast<double>(k));
    pen_terms.push_back(ops::sum_all(ops::mul(dev, dev)));
  }
  Tensor ce = ops::scale(ops::add_n(ce_terms), 1.0 / n);
  Tensor pen = ops::scale(ops::add_n(pen_terms), 1.0 / (static_cast<double>(k) * n));
  return ops::add(ce, ops::scale(pen, gamma));
}

Tensor moe_total_loss(const Tensor& l_ept, const Tensor& l_g) { return ops::add(l_ept, l_g); }

MoeModel::MoeModel(int num_concepts, int dim, int num_classes_, Rng& rng)
    : feature_dim(dim), num_classes(num_classes_) {
  if (num_concepts < 1) throw ValueError("MoeModel: need at least one expert");
  experts.reserve(static_cast<size_t>(num_concepts));
  for (int j = 0; j < num_concepts; ++j) experts.emplace_back(j, dim, num_classes_, rng);
  gate = GateNetwork(num_concepts, dim, rng);
}

GateOutput MoeModel::forward(const Tensor& concept_features) const {
  if (concept_features.rank() != 2 ||
      concept_features.dim(0) != static_cast<int>(experts.size()) ||
      concept_features.dim(1) != feature_dim) {
    throw ShapeError("MoeModel: concept features must be K x D, got " +
                     shape_str(concept_features.shape()));
  }
  GateOutput out;
  out.weights = gate.forward(concept_features);
  out.expert_probs.reserve(experts.size());
  for (size_t j = 0; j < experts.size(); ++j) {
    out.expert_probs.push_back(
        experts[j].forward(ops::take_row(concept_features, static_cast<int>(j))));
  }
  out.aggregate = aggregate_probs(out.weights, out.expert_probs);
  out.predicted_class = argmax_lowest(out.aggregate.values());
  return out;
}

std::vector<Parameter*> MoeModel::params() {
  std::vector<Parameter*> out;
  for (auto& e : experts) e.collect(out);
  gate.collect(out);
  return out;
}

}  // namespace cmoe
