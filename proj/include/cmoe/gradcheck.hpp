#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmoe/tensor.hpp"

namespace cmoe::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
};

// Central finite differences of a scalar loss against the analytic backward
// pass. `loss_fn` must rebuild the loss from the current values of `inputs`.
// Error metric per entry: |analytic - numeric| / max(1, |analytic|, |numeric|).
double check_scalar_fn(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                       double step = 1e-5);

// One randomized finite-difference case per differentiable op.
std::vector<CheckResult> op_suite(uint64_t seed);

// Finite-difference checks of every training loss (classification, presence
// regularizer, expert, gate, combined objectives) on small random pipeline
// instances; max error over `instances` seeded repetitions.
std::vector<CheckResult> loss_suite(uint64_t seed, int instances = 20);

}  // namespace cmoe::gradcheck
