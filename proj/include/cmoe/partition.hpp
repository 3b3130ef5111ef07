#pragma once

#include <vector>

#include "cmoe/nn.hpp"
#include "cmoe/ops.hpp"

// Concept partition model: backbone features are softly assigned to K
// learnable concept vectors; per-position assignment probabilities give an
// occurrence map, a hard partition, per-concept presence probabilities and
// pooled per-concept features that feed a small classification head.
//
// Parameters are owned by a single training thread; inference over a frozen
// model (NoGradGuard) may run from multiple threads concurrently.

namespace cmoe {

// K learnable concept vectors plus per-concept smoothing factors. Smoothing
// is stored unconstrained and mapped through a sigmoid so the effective
// value always lies in (0,1); raw zeros give an initial value of 0.5.
struct ConceptBank {
  Parameter concepts;   // K x D, init N(0, 0.1^2)
  Parameter alpha_raw;  // K

  ConceptBank() = default;
  ConceptBank(int num_concepts, int dim, Rng& rng);

  int num_concepts() const { return concepts.tensor.dim(0); }
  int dim() const { return concepts.tensor.dim(1); }
  Tensor alphas() const { return ops::sigmoid(alpha_raw.tensor); }
  void collect(std::vector<Parameter*>& out);
};

// Small trainable conv stack: 3 -> 16 -> 32 -> D channels, 3x3 kernels,
// 2x2 max-pool after the first two blocks, so 3 x 32 x 32 inputs map to
// D x 8 x 8 feature maps.
struct Backbone {
  ConvLayer conv1, conv2, conv3;

  Backbone() = default;
  Backbone(int out_dim, Rng& rng);

  Tensor forward(const Tensor& image) const;
  void collect(std::vector<Parameter*>& out);
};

// Two-layer MLP over the flattened K x D concept features.
struct PartitionHead {
  DenseLayer fc1, fc2;  // K*D -> hidden -> classes

  PartitionHead() = default;
  PartitionHead(int num_concepts, int dim, int num_classes, Rng& rng, int hidden = 64);

  Tensor forward(const Tensor& concept_features) const;
  void collect(std::vector<Parameter*>& out);
};

// Per-position concept probabilities:
//   O[j,h,w] = softmax_j( -||(s_hw - c_j)/alpha_j||^2 / 2 ).
// Differentiable in features, concepts and alphas.
Tensor occurrence_probs(const Tensor& features, const Tensor& concepts, const Tensor& alphas);

// Argmax concept per position, ties broken by the lowest concept index.
// Returns H*W labels in row-major order.
std::vector<int> hard_partition(const Tensor& occurrence);

// p_j = max over positions of (kernel * O_j) with zero padding. The kernel
// must be odd, normalized to sum 1, and no larger than 2*min(H,W)+1.
Tensor presence_prob(const Tensor& occurrence, const Tensor& kernel);

// Z_j = t_j / ||t_j||  with  t_j = (sum_hw p^j_hw (s_hw - c_j)/alpha_j) / sum_hw p^j_hw.
// Rows with ||t|| < 1e-8 come back as zero vectors with zero gradient.
Tensor pool_concept_features(const Tensor& features, const Tensor& occurrence,
                             const Tensor& concepts, const Tensor& alphas);

// Mean softmax cross-entropy of per-sample head logits.
Tensor partition_cls_loss(const std::vector<Tensor>& logits, const std::vector<int>& labels);

// Presence regularizer: mean over samples and concepts of |log(p + delta)|.
// Presence entries must lie in [0,1] within 1e-6.
Tensor concept_presence_loss(const std::vector<Tensor>& presences, double delta = 1e-5);

// cls + lambda_r * reg, lambda_r >= 0.
Tensor partition_total_loss(const Tensor& cls, const Tensor& reg, double lambda_r);

struct PartitionModel {
  static constexpr int kFeatureDim = 32;
  static constexpr int kKernelSize = 3;
  static constexpr double kKernelSigma = 1.0;

  Backbone backbone;
  ConceptBank bank;
  PartitionHead head;
  Tensor gauss;  // fixed smoothing kernel
  int num_classes = 0;

  PartitionModel() = default;
  PartitionModel(int num_concepts, int num_classes, Rng& rng);

  struct Forward {
    Tensor features;          // D x H x W
    Tensor occurrence;        // K x H x W
    Tensor presence;          // K
    Tensor concept_features;  // K x D
    Tensor logits;            // C
  };
  Forward forward(const Tensor& image) const;

  int num_concepts() const { return bank.num_concepts(); }
  std::vector<Parameter*> params();
};

}  // namespace cmoe
