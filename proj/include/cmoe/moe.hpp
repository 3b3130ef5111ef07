#pragma once

#include <span>
#include <vector>

#include "cmoe/nn.hpp"
#include "cmoe/ops.hpp"

// Concept-based recognition model: one expert per concept plus a gate
// network whose softmax output both mixes the expert predictions and serves
// as the per-concept importance explanation.

namespace cmoe {

// Index of the largest entry; ties resolve to the lowest index.
int argmax_lowest(std::span<const double> values);

// MLP over one concept feature row, softmax output. All experts share this
// architecture with independent parameters.
struct Expert {
  DenseLayer fc1, fc2;  // D -> hidden -> classes

  Expert() = default;
  Expert(int index, int dim, int num_classes, Rng& rng, int hidden = 32);

  Tensor forward(const Tensor& concept_feature) const;
  void collect(std::vector<Parameter*>& out);
};

// MLP over all concept features; final softmax yields simplex weights.
struct GateNetwork {
  DenseLayer fc1, fc2;  // K*D -> hidden -> K

  GateNetwork() = default;
  GateNetwork(int num_concepts, int dim, Rng& rng, int hidden = 32);

  Tensor forward(const Tensor& concept_features) const;
  void collect(std::vector<Parameter*>& out);
};

struct GateOutput {
  Tensor weights;                    // K, on the simplex
  std::vector<Tensor> expert_probs;  // K probability vectors of length C
  Tensor aggregate;                  // sum_j w_j * expert_probs[j]
  int predicted_class = -1;
};

// Convex combination of expert probability vectors by the gate weights.
Tensor aggregate_probs(const Tensor& weights, const std::vector<Tensor>& expert_probs);

// l_ept = (1/N) sum_i sum_j -log f_j(Z_i^j)[y_i].
Tensor expert_loss(const std::vector<std::vector<Tensor>>& expert_probs,
                   const std::vector<int>& labels);

// l_g = (1/N) sum_i -log f(Z_i)[y_i] + gamma * (1/(K N)) sum_i sum_j (w_i^j - 1/K)^2.
Tensor gate_loss(const std::vector<Tensor>& aggregates, const std::vector<int>& labels,
                 const std::vector<Tensor>& weights, double gamma);

// Unweighted sum of the two recognition-stage losses.
Tensor moe_total_loss(const Tensor& l_ept, const Tensor& l_g);

struct MoeModel {
  std::vector<Expert> experts;
  GateNetwork gate;
  int feature_dim = 0;
  int num_classes = 0;

  MoeModel() = default;
  MoeModel(int num_concepts, int dim, int num_classes, Rng& rng);

  GateOutput forward(const Tensor& concept_features) const;

  int num_concepts() const { return static_cast<int>(experts.size()); }
  std::vector<Parameter*> params();
};

}  // namespace cmoe
