#pragma once

#include <vector>

#include "cmoe/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes up front
// (ShapeError) and records a backward closure when any input requires grad.
// Reductions accumulate in fixed index order so results are reproducible.

namespace cmoe::ops {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor add_n(const std::vector<Tensor>& xs);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);  // requires strictly positive entries
Tensor abs(const Tensor& x);

// ---- shape ----
Tensor flatten(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);                    // rank-2
Tensor take_row(const Tensor& x, int row);            // rank-2 -> rank-1
Tensor stack_rows(const std::vector<Tensor>& rows);   // K rank-1 -> K x C

// ---- linear algebra ----
// (m x k)(k x n) -> (m x n), or (m x k)(k) -> (m).
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor l2_norm(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

// ---- spatial ----
// x: Cin x H x W, w: Cout x Cin x kh x kw, b: Cout.
// pad < 0 selects "same" zero padding (odd kernels, stride 1).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = -1);
Tensor max_pool2d(const Tensor& x, int k = 2, int stride = 2);
// Per-channel max over all spatial positions: C x H x W -> C.
Tensor global_max(const Tensor& x);
// Depthwise same-size convolution of each channel with one fixed 2D kernel
// (odd, non-trainable). Kernel side must be <= 2*min(H,W)+1.
Tensor smooth2d(const Tensor& x, const Tensor& kernel);

// ---- losses ----
// Softmax cross-entropy from raw logits (rank-1, length C), label in [0, C).
Tensor cross_entropy(const Tensor& logits, int label);
// Negative log of probs[label], with probabilities floored at `floor`.
Tensor nll_probs(const Tensor& probs, int label, double floor = 1e-12);

// ---- concept-model kernels ----
// dists[j,h,w] = || (s_hw - c_j) / alpha_j ||^2 for features D x H x W,
// concepts K x D, alphas K (strictly positive).
Tensor concept_sq_dists(const Tensor& features, const Tensor& concepts, const Tensor& alphas);
// out[j,d] = sum_hw occ[j,h,w] * features[d,h,w].
Tensor weighted_spatial_pool(const Tensor& occ, const Tensor& features);
// K x H x W -> K, summing over positions.
Tensor sum_spatial(const Tensor& x);
// Divide row j of x (K x D) by s[j]; every s[j] must be nonzero.
Tensor div_rows(const Tensor& x, const Tensor& s);
// Rows scaled to unit L2 norm; rows with norm < eps map to zero with zero grad.
Tensor normalize_rows(const Tensor& x, double eps = 1e-8);

}  // namespace cmoe::ops
