#include "cmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cmoe/moe.hpp"
#include "cmoe/nn.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/partition.hpp"

namespace cmoe::gradcheck {

namespace {

// Random tensor with entries kept away from zero by `margin` (kink avoidance
// for relu/abs and friends).
Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, double margin = 0.0,
                   bool requires_grad = true) {
  std::vector<double> vals(shape_numel(shape));
  for (auto& v : vals) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::fabs(v) < margin);
  }
  return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

// Values pairwise separated by at least ~0.05 so FD steps never cross a
// max/argmax tie.
Tensor rand_separated(Shape shape, Rng& rng, bool requires_grad = true) {
  const size_t n = shape_numel(shape);
  std::vector<double> vals(n);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  for (size_t i = 0; i < n; ++i) vals[order[i]] = 0.1 * static_cast<double>(i) + rng.uniform(0.0, 0.02);
  return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

}  // namespace

double check_scalar_fn(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                       double step) {
  for (const auto& t : inputs) {
    const_cast<Tensor&>(t).zero_grad();
  }
  Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ShapeError("check_scalar_fn: loss must be scalar");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  double max_err = 0.0;
  NoGradGuard no_grad;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti];
    auto vals = t.values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + step;
      const double lp = loss_fn().item();
      vals[i] = orig - step;
      const double lm = loss_fn().item();
      vals[i] = orig;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[ti][i];
      const double err = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

std::vector<CheckResult> op_suite(uint64_t seed) {
  std::vector<CheckResult> results;
  uint64_t case_idx = 0;
  auto run = [&](const std::string& name, auto&& setup) {
    Rng rng = Rng::fork(seed, case_idx++);
    auto [inputs, fn] = setup(rng);
    results.push_back({name, check_scalar_fn(fn, inputs)});
  };
  using Case = std::pair<std::vector<Tensor>, std::function<Tensor()>>;

  run("add", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    Tensor r = rand_tensor({3, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::add(a, b), r)); }};
  });
  run("sub", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    Tensor r = rand_tensor({3, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::sub(a, b), r)); }};
  });
  run("mul", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    Tensor r = rand_tensor({3, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::mul(a, b), r)); }};
  });
  run("add_scalar", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({5}, rng);
    Tensor r = rand_tensor({5}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::add_scalar(x, 0.7), r)); }};
  });
  run("scale", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({5}, rng);
    Tensor r = rand_tensor({5}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::scale(x, -1.7), r)); }};
  });
  run("add_n", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng), c = rand_tensor({2, 3}, rng);
    Tensor r = rand_tensor({2, 3}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b, c}, [=] { return ops::sum_all(ops::mul(ops::add_n({a, b, c}), r)); }};
  });
  run("relu", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({4, 4}, rng, -1.0, 1.0, 1e-3);
    Tensor r = rand_tensor({4, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::relu(x), r)); }};
  });
  run("sigmoid", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({6}, rng, -3.0, 3.0);
    Tensor r = rand_tensor({6}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::sigmoid(x), r)); }};
  });
  run("log", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({6}, rng, 0.5, 2.0);
    Tensor r = rand_tensor({6}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::log(x), r)); }};
  });
  run("abs", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({6}, rng, -1.0, 1.0, 1e-3);
    Tensor r = rand_tensor({6}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::abs(x), r)); }};
  });
  run("reshape", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor r = rand_tensor({2, 6}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::reshape(x, {2, 6}), r)); }};
  });
  run("transpose", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 5}, rng);
    Tensor r = rand_tensor({5, 3}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::transpose(x), r)); }};
  });
  run("take_row", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({4, 3}, rng);
    Tensor r = rand_tensor({3}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::take_row(x, 2), r)); }};
  });
  run("stack_rows", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({4}, rng), b = rand_tensor({4}, rng);
    Tensor r = rand_tensor({2, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::stack_rows({a, b}), r)); }};
  });
  run("matmul", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng);
    Tensor r = rand_tensor({3, 2}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::matmul(a, b), r)); }};
  });
  run("matmul_vec", [](Rng& rng) -> Case {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4}, rng);
    Tensor r = rand_tensor({3}, rng, 0.1, 1.0, 0.0, false);
    return {{a, b}, [=] { return ops::sum_all(ops::mul(ops::matmul(a, b), r)); }};
  });
  run("sum_all", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 3}, rng);
    return {{x}, [=] { return ops::sum_all(x); }};
  });
  run("mean_all", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 3}, rng);
    return {{x}, [=] { return ops::mean_all(x); }};
  });
  run("l2_norm", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({7}, rng, 0.2, 1.0);
    return {{x}, [=] { return ops::l2_norm(x); }};
  });
  run("softmax", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 2, 4}, rng, -2.0, 2.0);
    Tensor r = rand_tensor({3, 2, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::softmax(x, 0), r)); }};
  });
  run("conv2d", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({2, 5, 5}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    Tensor r = rand_tensor({3, 5, 5}, rng, 0.1, 1.0, 0.0, false);
    return {{x, w, b}, [=] { return ops::sum_all(ops::mul(ops::conv2d(x, w, b), r)); }};
  });
  run("conv2d_stride2", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({2, 6, 6}, rng);
    Tensor w = rand_tensor({2, 2, 3, 3}, rng);
    Tensor b = rand_tensor({2}, rng);
    Tensor r = rand_tensor({2, 3, 3}, rng, 0.1, 1.0, 0.0, false);
    return {{x, w, b}, [=] { return ops::sum_all(ops::mul(ops::conv2d(x, w, b, 2, 1), r)); }};
  });
  run("max_pool2d", [](Rng& rng) -> Case {
    Tensor x = rand_separated({2, 4, 4}, rng);
    Tensor r = rand_tensor({2, 2, 2}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::max_pool2d(x), r)); }};
  });
  run("global_max", [](Rng& rng) -> Case {
    Tensor x = rand_separated({3, 4, 4}, rng);
    Tensor r = rand_tensor({3}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::global_max(x), r)); }};
  });
  run("smooth2d", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({2, 5, 5}, rng);
    Tensor g = gaussian_kernel2d(3, 1.0);
    Tensor r = rand_tensor({2, 5, 5}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::smooth2d(x, g), r)); }};
  });
  run("cross_entropy", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({5}, rng, -2.0, 2.0);
    return {{x}, [=] { return ops::cross_entropy(x, 2); }};
  });
  run("nll_probs", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({5}, rng, 0.1, 1.0);
    return {{x}, [=] { return ops::nll_probs(x, 3); }};
  });
  run("concept_sq_dists", [](Rng& rng) -> Case {
    Tensor s = rand_tensor({3, 4, 4}, rng);
    Tensor c = rand_tensor({2, 3}, rng);
    Tensor a = rand_tensor({2}, rng, 0.3, 1.2);
    Tensor r = rand_tensor({2, 4, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{s, c, a}, [=] { return ops::sum_all(ops::mul(ops::concept_sq_dists(s, c, a), r)); }};
  });
  run("weighted_spatial_pool", [](Rng& rng) -> Case {
    Tensor o = rand_tensor({2, 4, 4}, rng, 0.1, 1.0);
    Tensor s = rand_tensor({3, 4, 4}, rng);
    Tensor r = rand_tensor({2, 3}, rng, 0.1, 1.0, 0.0, false);
    return {{o, s}, [=] { return ops::sum_all(ops::mul(ops::weighted_spatial_pool(o, s), r)); }};
  });
  run("sum_spatial", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 4, 4}, rng);
    Tensor r = rand_tensor({3}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::sum_spatial(x), r)); }};
  });
  run("div_rows", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor s = rand_tensor({3}, rng, 0.5, 1.5);
    Tensor r = rand_tensor({3, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{x, s}, [=] { return ops::sum_all(ops::mul(ops::div_rows(x, s), r)); }};
  });
  run("normalize_rows", [](Rng& rng) -> Case {
    Tensor x = rand_tensor({3, 4}, rng, -1.0, 1.0, 0.2);
    Tensor r = rand_tensor({3, 4}, rng, 0.1, 1.0, 0.0, false);
    return {{x}, [=] { return ops::sum_all(ops::mul(ops::normalize_rows(x), r)); }};
  });
  return results;
}

namespace {

// Toy partition pipeline: leaf feature map standing in for the backbone
// output, two concepts, 4x4 spatial grid, tiny head.
struct ToyPartition {
  Tensor features;   // D x 4 x 4
  Tensor concepts;   // K x D
  Tensor alpha_raw;  // K
  Tensor w1, b1, w2, b2;
  Tensor gauss;
  int label = 0;
  static constexpr int kK = 2, kD = 3, kC = 3, kH = 4, kW = 4, kHidden = 5;

  explicit ToyPartition(Rng& rng)
      : features(rand_tensor({kD, kH, kW}, rng)),
        concepts(rand_tensor({kK, kD}, rng)),
        alpha_raw(rand_tensor({kK}, rng, -1.0, 1.0)),
        w1(rand_tensor({kHidden, kK * kD}, rng)),
        b1(rand_tensor({kHidden}, rng)),
        w2(rand_tensor({kC, kHidden}, rng)),
        b2(rand_tensor({kC}, rng)),
        gauss(gaussian_kernel2d(3, 1.0)),
        label(static_cast<int>(rng.uniform_int(kC))) {}

  std::vector<Tensor> inputs() const { return {features, concepts, alpha_raw, w1, b1, w2, b2}; }

  Tensor cls() const {
    Tensor alphas = ops::sigmoid(alpha_raw);
    Tensor occ = occurrence_probs(features, concepts, alphas);
    Tensor z = pool_concept_features(features, occ, concepts, alphas);
    Tensor h = ops::relu(ops::add(ops::matmul(w1, ops::flatten(z)), b1));
    Tensor logits = ops::add(ops::matmul(w2, h), b2);
    return partition_cls_loss({logits}, {label});
  }

  Tensor reg() const {
    Tensor alphas = ops::sigmoid(alpha_raw);
    Tensor occ = occurrence_probs(features, concepts, alphas);
    return concept_presence_loss({presence_prob(occ, gauss)});
  }

  Tensor total() const { return partition_total_loss(cls(), reg(), 0.7); }
};

// Toy recognition stage: leaf concept features, two experts, gate.
struct ToyMoe {
  Tensor z;  // K x D
  Tensor e1w1, e1b1, e1w2, e1b2;
  Tensor e2w1, e2b1, e2w2, e2b2;
  Tensor gw1, gb1, gw2, gb2;
  int label = 0;
  double gamma = 0.8;
  static constexpr int kK = 2, kD = 3, kC = 3, kHidden = 4;

  explicit ToyMoe(Rng& rng)
      : z(rand_tensor({kK, kD}, rng)),
        e1w1(rand_tensor({kHidden, kD}, rng)),
        e1b1(rand_tensor({kHidden}, rng)),
        e1w2(rand_tensor({kC, kHidden}, rng)),
        e1b2(rand_tensor({kC}, rng)),
        e2w1(rand_tensor({kHidden, kD}, rng)),
        e2b1(rand_tensor({kHidden}, rng)),
        e2w2(rand_tensor({kC, kHidden}, rng)),
        e2b2(rand_tensor({kC}, rng)),
        gw1(rand_tensor({kHidden, kK * kD}, rng)),
        gb1(rand_tensor({kHidden}, rng)),
        gw2(rand_tensor({kK, kHidden}, rng)),
        gb2(rand_tensor({kK}, rng)),
        label(static_cast<int>(rng.uniform_int(kC))) {}

  std::vector<Tensor> inputs() const {
    return {z, e1w1, e1b1, e1w2, e1b2, e2w1, e2b1, e2w2, e2b2, gw1, gb1, gw2, gb2};
  }

  Tensor expert_out(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                    int row) const {
    Tensor h = ops::relu(ops::add(ops::matmul(w1, ops::take_row(z, row)), b1));
    return ops::softmax(ops::add(ops::matmul(w2, h), b2), 0);
  }

  Tensor gate_out() const {
    Tensor h = ops::relu(ops::add(ops::matmul(gw1, ops::flatten(z)), gb1));
    return ops::softmax(ops::add(ops::matmul(gw2, h), gb2), 0);
  }

  Tensor ept() const {
    return expert_loss({{expert_out(e1w1, e1b1, e1w2, e1b2, 0), expert_out(e2w1, e2b1, e2w2, e2b2, 1)}},
                       {label});
  }

  Tensor gate() const {
    Tensor w = gate_out();
    Tensor agg = aggregate_probs(
        w, {expert_out(e1w1, e1b1, e1w2, e1b2, 0), expert_out(e2w1, e2b1, e2w2, e2b2, 1)});
    return gate_loss({agg}, {label}, {w}, gamma);
  }

  Tensor total() const { return moe_total_loss(ept(), gate()); }
};

}  // namespace

std::vector<CheckResult> loss_suite(uint64_t seed, int instances) {
  std::vector<CheckResult> results = {
      {"l_cls", 0.0}, {"l_r", 0.0}, {"partition_total", 0.0},
      {"l_ept", 0.0}, {"l_g", 0.0}, {"moe_total", 0.0},
  };
  for (int i = 0; i < instances; ++i) {
    {
      Rng rng = Rng::fork(seed, 2 * static_cast<uint64_t>(i));
      ToyPartition toy(rng);
      results[0].max_rel_err =
          std::max(results[0].max_rel_err, check_scalar_fn([&] { return toy.cls(); }, toy.inputs()));
      results[1].max_rel_err =
          std::max(results[1].max_rel_err, check_scalar_fn([&] { return toy.reg(); }, toy.inputs()));
      results[2].max_rel_err = std::max(results[2].max_rel_err,
                                        check_scalar_fn([&] { return toy.total(); }, toy.inputs()));
    }
    {
      Rng rng = Rng::fork(seed, 2 * static_cast<uint64_t>(i) + 1);
      ToyMoe toy(rng);
      results[3].max_rel_err =
          std::max(results[3].max_rel_err, check_scalar_fn([&] { return toy.ept(); }, toy.inputs()));
      results[4].max_rel_err =
          std::max(results[4].max_rel_err, check_scalar_fn([&] { return toy.gate(); }, toy.inputs()));
      results[5].max_rel_err = std::max(results[5].max_rel_err,
                                        check_scalar_fn([&] { return toy.total(); }, toy.inputs()));
    }
  }
  return results;
}

}  // namespace cmoe::gradcheck
