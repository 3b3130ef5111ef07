#include "cmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmoe::ops {

namespace {

using detail::TensorNode;
using Node = TensorNode*;

// Builds the output tensor and, when grad recording applies, wires parents
// and the backward closure. `make_backward(self)` must return a callable that
// accumulates into the grad buffers of inputs that require grad.
template <typename F>
Tensor finish_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                 F&& make_backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) rg = rg || t.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backprop = make_backward(node.get());
  }
  return Tensor::wrap(std::move(node));
}

void check_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!same_shape(a.shape(), b.shape())) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

void check_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return finish_op(a.shape(), std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self->grad[i];
        if (bn->requires_grad) bn->grad[i] += self->grad[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return finish_op(a.shape(), std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self->grad[i];
        if (bn->requires_grad) bn->grad[i] -= self->grad[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return finish_op(a.shape(), std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self->grad[i] * bn->data[i];
        if (bn->requires_grad) bn->grad[i] += self->grad[i] * an->data[i];
      }
    };
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  check_defined(x, "add_scalar");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) xn->grad[i] += self->grad[i];
    };
  });
}

Tensor scale(const Tensor& x, double c) {
  check_defined(x, "scale");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get(), c](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) xn->grad[i] += self->grad[i] * c;
    };
  });
}

Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty input list");
  for (const auto& t : xs) {
    check_defined(t, "add_n");
    check_same_shape(xs.front(), t, "add_n");
  }
  std::vector<double> out(xs.front().numel(), 0.0);
  for (const auto& t : xs) {
    const auto tv = t.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += tv[i];
  }
  std::vector<Node> nodes;
  nodes.reserve(xs.size());
  for (const auto& t : xs) nodes.push_back(t.node().get());
  return finish_op(xs.front().shape(), std::move(out), xs, [nodes = std::move(nodes)](Node self) {
    return [=] {
      for (Node n : nodes) {
        if (!n->requires_grad) continue;
        for (size_t i = 0; i < self->data.size(); ++i) n->grad[i] += self->grad[i];
      }
    };
  });
}

Tensor relu(const Tensor& x) {
  check_defined(x, "relu");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        if (xn->data[i] > 0.0) xn->grad[i] += self->grad[i];
      }
    };
  });
}

Tensor sigmoid(const Tensor& x) {
  check_defined(x, "sigmoid");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        const double y = self->data[i];
        xn->grad[i] += self->grad[i] * y * (1.0 - y);
      }
    };
  });
}

Tensor log(const Tensor& x) {
  check_defined(x, "log");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw ValueError("log: entry " + std::to_string(i) + " = " + std::to_string(xv[i]) +
                       " is outside the positive domain");
    }
    out[i] = std::log(xv[i]);
  }
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) xn->grad[i] += self->grad[i] / xn->data[i];
    };
  });
}

Tensor abs(const Tensor& x) {
  check_defined(x, "abs");
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(xv[i]);
  return finish_op(x.shape(), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) {
        const double xi = xn->data[i];
        if (xi > 0.0) {
          xn->grad[i] += self->grad[i];
        } else if (xi < 0.0) {
          xn->grad[i] -= self->grad[i];
        }
      }
    };
  });
}

namespace {

Tensor reshape_impl(const Tensor& x, Shape shape, const char* what) {
  check_defined(x, what);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError(std::string(what) + ": cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return finish_op(std::move(shape), std::move(out), {x}, [xn = x.node().get()](Node self) {
    return [=] {
      for (size_t i = 0; i < self->data.size(); ++i) xn->grad[i] += self->grad[i];
    };
  });
}

}  // namespace

Tensor flatten(const Tensor& x) {
  check_defined(x, "flatten");
  return reshape_impl(x, Shape{static_cast<int>(x.numel())}, "flatten");
}

Tensor reshape(const Tensor& x, Shape shape) { return reshape_impl(x, std::move(shape), "reshape"); }

Tensor transpose(const Tensor& x) {
  check_defined(x, "transpose");
  check_rank(x, 2, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = xv[static_cast<size_t>(i) * c + j];
  return finish_op(Shape{c, r}, std::move(out), {x}, [xn = x.node().get(), r, c](Node self) {
    return [=] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          xn->grad[static_cast<size_t>(i) * c + j] += self->grad[static_cast<size_t>(j) * r + i];
    };
  });
}

Tensor take_row(const Tensor& x, int row) {
  check_defined(x, "take_row");
  check_rank(x, 2, "take_row");
  if (row < 0 || row >= x.dim(0)) {
    throw ShapeError("take_row: row " + std::to_string(row) + " out of range for " +
                     shape_str(x.shape()));
  }
  const int c = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<size_t>(row) * c,
                          xv.begin() + static_cast<size_t>(row + 1) * c);
  return finish_op(Shape{c}, std::move(out), {x}, [xn = x.node().get(), row, c](Node self) {
    return [=] {
      for (int j = 0; j < c; ++j) xn->grad[static_cast<size_t>(row) * c + j] += self->grad[static_cast<size_t>(j)];
    };
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input list");
  for (const auto& t : rows) {
    check_defined(t, "stack_rows");
    check_rank(t, 1, "stack_rows");
    if (t.dim(0) != rows.front().dim(0)) throw ShapeError("stack_rows: row lengths differ");
  }
  const int k = static_cast<int>(rows.size());
  const int c = rows.front().dim(0);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(k) * c);
  for (const auto& t : rows) out.insert(out.end(), t.values().begin(), t.values().end());
  std::vector<Node> nodes;
  nodes.reserve(rows.size());
  for (const auto& t : rows) nodes.push_back(t.node().get());
  return finish_op(Shape{k, c}, std::move(out), rows, [nodes = std::move(nodes), c](Node self) {
    return [=] {
      for (size_t r = 0; r < nodes.size(); ++r) {
        Node n = nodes[r];
        if (!n->requires_grad) continue;
        for (int j = 0; j < c; ++j) n->grad[static_cast<size_t>(j)] += self->grad[r * c + j];
      }
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_rank(a, 2, "matmul");
  if (b.rank() != 1 && b.rank() != 2) {
    throw ShapeError("matmul: rhs must be rank 1 or 2, got " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int n = b.rank() == 2 ? b.dim(1) : 1;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<size_t>(i) * k + p];
      const double* brow = &bv[static_cast<size_t>(p) * n];
      double* orow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Shape out_shape = b.rank() == 2 ? Shape{m, n} : Shape{m};
  return finish_op(std::move(out_shape), std::move(out), {a, b},
                   [an = a.node().get(), bn = b.node().get(), m, k, n](Node self) {
    return [=] {
      // gA = g * B^T, gB = A^T * g
      if (an->requires_grad) {
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* gr = &self->grad[static_cast<size_t>(i) * n];
            const double* br = &bn->data[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
            an->grad[static_cast<size_t>(i) * k + p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        for (int i = 0; i < m; ++i) {
          const double* gr = &self->grad[static_cast<size_t>(i) * n];
          const double* ar = &an->data[static_cast<size_t>(i) * k];
          for (int p = 0; p < k; ++p) {
            const double aip = ar[p];
            double* gb = &bn->grad[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) gb[j] += aip * gr[j];
          }
        }
      }
    };
  });
}

Tensor sum_all(const Tensor& x) {
  check_defined(x, "sum_all");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return finish_op(Shape{}, {acc}, {x}, [xn = x.node().get()](Node self) {
    return [=] {
      const double g = self->grad[0];
      for (auto& gi : xn->grad) gi += g;
    };
  });
}

Tensor mean_all(const Tensor& x) {
  check_defined(x, "mean_all");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return finish_op(Shape{}, {acc * inv}, {x}, [xn = x.node().get(), inv](Node self) {
    return [=] {
      const double g = self->grad[0] * inv;
      for (auto& gi : xn->grad) gi += g;
    };
  });
}

Tensor l2_norm(const Tensor& x) {
  check_defined(x, "l2_norm");
  double acc = 0.0;
  for (double v : x.values()) acc += v * v;
  const double norm = std::sqrt(acc);
  return finish_op(Shape{}, {norm}, {x}, [xn = x.node().get(), norm](Node self) {
    return [=] {
      if (norm == 0.0) return;  // subgradient 0 at the origin
      const double g = self->grad[0] / norm;
      for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g * xn->data[i];
    };
  });
}

Tensor softmax(const Tensor& x, int axis) {
  check_defined(x, "softmax");
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const int len = shape[static_cast<size_t>(axis)];
  if (len < 1) throw ShapeError("softmax: empty axis");
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(shape[static_cast<size_t>(i)]);

  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * static_cast<size_t>(len) * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < len; ++a) mx = std::max(mx, xv[base + static_cast<size_t>(a) * inner]);
      double denom = 0.0;
      for (int a = 0; a < len; ++a) {
        const double e = std::exp(xv[base + static_cast<size_t>(a) * inner] - mx);
        out[base + static_cast<size_t>(a) * inner] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int a = 0; a < len; ++a) out[base + static_cast<size_t>(a) * inner] *= inv;
    }
  }
  return finish_op(shape, std::move(out), {x}, [xn = x.node().get(), outer, inner, len](Node self) {
    return [=] {
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = o * static_cast<size_t>(len) * inner + in;
          double dot = 0.0;
          for (int a = 0; a < len; ++a) {
            const size_t idx = base + static_cast<size_t>(a) * inner;
            dot += self->grad[idx] * self->data[idx];
          }
          for (int a = 0; a < len; ++a) {
            const size_t idx = base + static_cast<size_t>(a) * inner;
            xn->grad[idx] += self->data[idx] * (self->grad[idx] - dot);
          }
        }
      }
    };
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_defined(x, "conv2d");
  check_defined(w, "conv2d");
  check_defined(b, "conv2d");
  check_rank(x, 3, "conv2d");
  check_rank(w, 4, "conv2d");
  check_rank(b, 1, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  }
  if (b.dim(0) != cout) throw ShapeError("conv2d: bias length does not match output channels");
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) {
    if (kh != kw || kh % 2 == 0) throw ValueError("conv2d: same padding requires odd square kernels");
    pad = (kh - 1) / 2;
  }
  const int hp = h + 2 * pad, wp = wd + 2 * pad;
  const int ho = (hp - kh) / stride + 1;
  const int wo = (wp - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

  // Padded copy keeps the inner loops branch-free.
  std::vector<double> xpad(static_cast<size_t>(cin) * hp * wp, 0.0);
  const auto xv = x.values();
  for (int c = 0; c < cin; ++c)
    for (int y = 0; y < h; ++y)
      std::copy_n(&xv[(static_cast<size_t>(c) * h + y) * wd], wd,
                  &xpad[(static_cast<size_t>(c) * hp + y + pad) * wp + pad]);

  const auto wv = w.values();
  const auto bv = b.values();
  std::vector<double> out(static_cast<size_t>(cout) * ho * wo);
  for (int co = 0; co < cout; ++co)
    std::fill_n(&out[static_cast<size_t>(co) * ho * wo], static_cast<size_t>(ho) * wo, bv[static_cast<size_t>(co)]);
  for (int co = 0; co < cout; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wc = wv[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
          for (int oy = 0; oy < ho; ++oy) {
            const double* xrow = &xpad[(static_cast<size_t>(ci) * hp + oy * stride + ky) * wp + kx];
            double* orow = &out[(static_cast<size_t>(co) * ho + oy) * wo];
            if (stride == 1) {
              for (int ox = 0; ox < wo; ++ox) orow[ox] += wc * xrow[ox];
            } else {
              for (int ox = 0; ox < wo; ++ox) orow[ox] += wc * xrow[ox * stride];
            }
          }
        }
      }
    }
  }

  return finish_op(Shape{cout, ho, wo}, std::move(out), {x, w, b},
                   [xn = x.node().get(), wn = w.node().get(), bn = b.node().get(),
                    xpad = std::move(xpad), cin, h, wd, cout, kh, kw, stride, pad, hp, wp, ho,
                    wo](Node self) mutable {
    return [=, xpad = std::move(xpad)] {
      const auto& g = self->grad;
      if (bn->requires_grad) {
        for (int co = 0; co < cout; ++co) {
          double acc = 0.0;
          const double* gp = &g[static_cast<size_t>(co) * ho * wo];
          for (int i = 0; i < ho * wo; ++i) acc += gp[i];
          bn->grad[static_cast<size_t>(co)] += acc;
        }
      }
      if (wn->requires_grad) {
        for (int co = 0; co < cout; ++co) {
          for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                double acc = 0.0;
                for (int oy = 0; oy < ho; ++oy) {
                  const double* xrow = &xpad[(static_cast<size_t>(ci) * hp + oy * stride + ky) * wp + kx];
                  const double* grow = &g[(static_cast<size_t>(co) * ho + oy) * wo];
                  if (stride == 1) {
                    for (int ox = 0; ox < wo; ++ox) acc += grow[ox] * xrow[ox];
                  } else {
                    for (int ox = 0; ox < wo; ++ox) acc += grow[ox] * xrow[ox * stride];
                  }
                }
                wn->grad[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx] += acc;
              }
            }
          }
        }
      }
      if (xn->requires_grad) {
        std::vector<double> gxpad(static_cast<size_t>(cin) * hp * wp, 0.0);
        for (int co = 0; co < cout; ++co) {
          for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const double wc = wn->data[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                for (int oy = 0; oy < ho; ++oy) {
                  double* gxrow = &gxpad[(static_cast<size_t>(ci) * hp + oy * stride + ky) * wp + kx];
                  const double* grow = &g[(static_cast<size_t>(co) * ho + oy) * wo];
                  if (stride == 1) {
                    for (int ox = 0; ox < wo; ++ox) gxrow[ox] += wc * grow[ox];
                  } else {
                    for (int ox = 0; ox < wo; ++ox) gxrow[ox * stride] += wc * grow[ox];
                  }
                }
              }
            }
          }
        }
        for (int c = 0; c < cin; ++c)
          for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < wd; ++xw)
              xn->grad[(static_cast<size_t>(c) * h + y) * wd + xw] +=
                  gxpad[(static_cast<size_t>(c) * hp + y + pad) * wp + xw + pad];
      }
    };
  });
}

Tensor max_pool2d(const Tensor& x, int k, int stride) {
  check_defined(x, "max_pool2d");
  check_rank(x, 3, "max_pool2d");
  if (k < 1 || stride < 1) throw ValueError("max_pool2d: window and stride must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < k || w < k) throw ShapeError("max_pool2d: window larger than input");
  const int ho = (h - k) / stride + 1;
  const int wo = (w - k) / stride + 1;
  const auto xv = x.values();
  std::vector<double> out(static_cast<size_t>(c) * ho * wo);
  std::vector<int> arg(out.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * stride + ky, ix = ox * stride + kx;
            const size_t idx = (static_cast<size_t>(ch) * h + iy) * w + ix;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = static_cast<int>(idx);
            }
          }
        }
        const size_t oidx = (static_cast<size_t>(ch) * ho + oy) * wo + ox;
        out[oidx] = best;
        arg[oidx] = best_idx;
      }
    }
  }
  return finish_op(Shape{c, ho, wo}, std::move(out), {x},
                   [xn = x.node().get(), arg = std::move(arg)](Node self) mutable {
    return [=, arg = std::move(arg)] {
      for (size_t i = 0; i < self->data.size(); ++i) xn->grad[static_cast<size_t>(arg[i])] += self->grad[i];
    };
  });
}

Tensor global_max(const Tensor& x) {
  check_defined(x, "global_max");
  check_rank(x, 3, "global_max");
  const int c = x.dim(0);
  const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
  const auto xv = x.values();
  std::vector<double> out(static_cast<size_t>(c));
  std::vector<size_t> arg(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* p = &xv[static_cast<size_t>(ch) * plane];
    size_t best = 0;
    for (size_t i = 1; i < plane; ++i)
      if (p[i] > p[best]) best = i;
    out[static_cast<size_t>(ch)] = p[best];
    arg[static_cast<size_t>(ch)] = static_cast<size_t>(ch) * plane + best;
  }
  return finish_op(Shape{c}, std::move(out), {x}, [xn = x.node().get(), arg = std::move(arg)](Node self) mutable {
    return [=, arg = std::move(arg)] {
      for (size_t ch = 0; ch < arg.size(); ++ch) xn->grad[arg[ch]] += self->grad[ch];
    };
  });
}

Tensor smooth2d(const Tensor& x, const Tensor& kernel) {
  check_defined(x, "smooth2d");
  check_defined(kernel, "smooth2d");
  check_rank(x, 3, "smooth2d");
  check_rank(kernel, 2, "smooth2d");
  if (kernel.requires_grad()) throw ValueError("smooth2d: kernel is not trainable");
  const int k = kernel.dim(0);
  if (kernel.dim(1) != k) throw ShapeError("smooth2d: kernel must be square");
  if (k % 2 == 0) throw ValueError("smooth2d: kernel size must be odd");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k > 2 * std::min(h, w) + 1) {
    throw ValueError("smooth2d: kernel size " + std::to_string(k) + " exceeds 2*min(H,W)+1");
  }
  const int m = (k - 1) / 2;
  const auto xv = x.values();
  const auto kv = kernel.values();
  std::vector<double> out(x.numel(), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = &xv[static_cast<size_t>(ch) * h * w];
    double* op = &out[static_cast<size_t>(ch) * h * w];
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double wc = kv[static_cast<size_t>(ky) * k + kx];
        const int dy = ky - m, dx = kx - m;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          const double* xrow = &xp[static_cast<size_t>(y + dy) * w + dx];
          double* orow = &op[static_cast<size_t>(y) * w];
          for (int xi = x0; xi < x1; ++xi) orow[xi] += wc * xrow[xi];
        }
      }
    }
  }
  return finish_op(x.shape(), std::move(out), {x, kernel},
                   [xn = x.node().get(), kn = kernel.node().get(), c, h, w, k, m](Node self) {
    return [=] {
      for (int ch = 0; ch < c; ++ch) {
        double* gxp = &xn->grad[static_cast<size_t>(ch) * h * w];
        const double* gp = &self->grad[static_cast<size_t>(ch) * h * w];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wc = kn->data[static_cast<size_t>(ky) * k + kx];
            const int dy = ky - m, dx = kx - m;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int y = y0; y < y1; ++y) {
              double* gxrow = &gxp[static_cast<size_t>(y + dy) * w + dx];
              const double* grow = &gp[static_cast<size_t>(y) * w];
              for (int xi = x0; xi < x1; ++xi) gxrow[xi] += wc * grow[xi];
            }
          }
        }
      }
    };
  });
}

Tensor cross_entropy(const Tensor& logits, int label) {
  check_defined(logits, "cross_entropy");
  check_rank(logits, 1, "cross_entropy");
  const int c = logits.dim(0);
  if (label < 0 || label >= c) {
    throw ValueError("cross_entropy: label " + std::to_string(label) + " invalid for " +
                     std::to_string(c) + " classes");
  }
  const auto lv = logits.values();
  double mx = lv[0];
  for (int i = 1; i < c; ++i) mx = std::max(mx, lv[static_cast<size_t>(i)]);
  double denom = 0.0;
  for (int i = 0; i < c; ++i) denom += std::exp(lv[static_cast<size_t>(i)] - mx);
  const double lse = mx + std::log(denom);
  const double loss = lse - lv[static_cast<size_t>(label)];
  return finish_op(Shape{}, {loss}, {logits},
                   [ln = logits.node().get(), label, c, mx, denom](Node self) {
    return [=] {
      const double g = self->grad[0];
      for (int i = 0; i < c; ++i) {
        const double p = std::exp(ln->data[static_cast<size_t>(i)] - mx) / denom;
        ln->grad[static_cast<size_t>(i)] += g * (p - (i == label ? 1.0 : 0.0));
      }
    };
  });
}

Tensor nll_probs(const Tensor& probs, int label, double floor) {
  check_defined(probs, "nll_probs");
  check_rank(probs, 1, "nll_probs");
  const int c = probs.dim(0);
  if (label < 0 || label >= c) {
    throw ValueError("nll_probs: label " + std::to_string(label) + " invalid for " +
                     std::to_string(c) + " classes");
  }
  const double p = probs.values()[static_cast<size_t>(label)];
  const bool clamped = p < floor;
  const double loss = -std::log(clamped ? floor : p);
  return finish_op(Shape{}, {loss}, {probs}, [pn = probs.node().get(), label, clamped](Node self) {
    return [=] {
      if (clamped) return;  // flat region below the floor
      pn->grad[static_cast<size_t>(label)] -= self->grad[0] / pn->data[static_cast<size_t>(label)];
    };
  });
}

Tensor concept_sq_dists(const Tensor& features, const Tensor& concepts, const Tensor& alphas) {
  check_defined(features, "concept_sq_dists");
  check_defined(concepts, "concept_sq_dists");
  check_defined(alphas, "concept_sq_dists");
  check_rank(features, 3, "concept_sq_dists");
  check_rank(concepts, 2, "concept_sq_dists");
  check_rank(alphas, 1, "concept_sq_dists");
  const int d = features.dim(0);
  const size_t plane = static_cast<size_t>(features.dim(1)) * features.dim(2);
  const int k = concepts.dim(0);
  if (concepts.dim(1) != d) {
    throw ShapeError("concept_sq_dists: concept dimension " + std::to_string(concepts.dim(1)) +
                     " does not match feature channels " + std::to_string(d));
  }
  if (alphas.dim(0) != k) throw ShapeError("concept_sq_dists: one smoothing factor per concept required");
  const auto sv = features.values();
  const auto cv = concepts.values();
  const auto av = alphas.values();
  for (int j = 0; j < k; ++j) {
    if (!(av[static_cast<size_t>(j)] > 0.0)) throw ValueError("concept_sq_dists: alphas must be positive");
  }
  std::vector<double> out(static_cast<size_t>(k) * plane, 0.0);
  for (int j = 0; j < k; ++j) {
    double* orow = &out[static_cast<size_t>(j) * plane];
    for (int ch = 0; ch < d; ++ch) {
      const double cj = cv[static_cast<size_t>(j) * d + ch];
      const double* srow = &sv[static_cast<size_t>(ch) * plane];
      for (size_t p = 0; p < plane; ++p) {
        const double diff = srow[p] - cj;
        orow[p] += diff * diff;
      }
    }
    const double inv2 = 1.0 / (av[static_cast<size_t>(j)] * av[static_cast<size_t>(j)]);
    for (size_t p = 0; p < plane; ++p) orow[p] *= inv2;
  }
  return finish_op(Shape{k, features.dim(1), features.dim(2)}, std::move(out),
                   {features, concepts, alphas},
                   [sn = features.node().get(), cn = concepts.node().get(),
                    an = alphas.node().get(), d, k, plane](Node self) {
    return [=] {
      for (int j = 0; j < k; ++j) {
        const double a = an->data[static_cast<size_t>(j)];
        const double inv2 = 1.0 / (a * a);
        const double* grow = &self->grad[static_cast<size_t>(j) * plane];
        for (int ch = 0; ch < d; ++ch) {
          const double cj = cn->data[static_cast<size_t>(j) * d + ch];
          const double* srow = &sn->data[static_cast<size_t>(ch) * plane];
          double csum = 0.0;
          if (sn->requires_grad) {
            double* gsrow = &sn->grad[static_cast<size_t>(ch) * plane];
            for (size_t p = 0; p < plane; ++p) {
              const double t = 2.0 * inv2 * (srow[p] - cj) * grow[p];
              gsrow[p] += t;
              csum += t;
            }
          } else {
            for (size_t p = 0; p < plane; ++p) csum += 2.0 * inv2 * (srow[p] - cj) * grow[p];
          }
          if (cn->requires_grad) cn->grad[static_cast<size_t>(j) * d + ch] -= csum;
        }
        if (an->requires_grad) {
          const double* orow = &self->data[static_cast<size_t>(j) * plane];
          double asum = 0.0;
          for (size_t p = 0; p < plane; ++p) asum += grow[p] * orow[p];
          an->grad[static_cast<size_t>(j)] -= 2.0 * asum / a;
        }
      }
    };
  });
}

Tensor weighted_spatial_pool(const Tensor& occ, const Tensor& features) {
  check_defined(occ, "weighted_spatial_pool");
  check_defined(features, "weighted_spatial_pool");
  check_rank(occ, 3, "weighted_spatial_pool");
  check_rank(features, 3, "weighted_spatial_pool");
  if (occ.dim(1) != features.dim(1) || occ.dim(2) != features.dim(2)) {
    throw ShapeError("weighted_spatial_pool: spatial dims differ, " + shape_str(occ.shape()) +
                     " vs " + shape_str(features.shape()));
  }
  const int k = occ.dim(0), d = features.dim(0);
  const size_t plane = static_cast<size_t>(occ.dim(1)) * occ.dim(2);
  const auto ov = occ.values();
  const auto sv = features.values();
  std::vector<double> out(static_cast<size_t>(k) * d, 0.0);
  for (int j = 0; j < k; ++j) {
    const double* orow = &ov[static_cast<size_t>(j) * plane];
    for (int ch = 0; ch < d; ++ch) {
      const double* srow = &sv[static_cast<size_t>(ch) * plane];
      double acc = 0.0;
      for (size_t p = 0; p < plane; ++p) acc += orow[p] * srow[p];
      out[static_cast<size_t>(j) * d + ch] = acc;
    }
  }
  return finish_op(Shape{k, d}, std::move(out), {occ, features},
                   [on = occ.node().get(), sn = features.node().get(), k, d, plane](Node self) {
    return [=] {
      if (on->requires_grad) {
        for (int j = 0; j < k; ++j) {
          double* gorow = &on->grad[static_cast<size_t>(j) * plane];
          for (int ch = 0; ch < d; ++ch) {
            const double g = self->grad[static_cast<size_t>(j) * d + ch];
            const double* srow = &sn->data[static_cast<size_t>(ch) * plane];
            for (size_t p = 0; p < plane; ++p) gorow[p] += g * srow[p];
          }
        }
      }
      if (sn->requires_grad) {
        for (int j = 0; j < k; ++j) {
          const double* orow = &on->data[static_cast<size_t>(j) * plane];
          for (int ch = 0; ch < d; ++ch) {
            const double g = self->grad[static_cast<size_t>(j) * d + ch];
            double* gsrow = &sn->grad[static_cast<size_t>(ch) * plane];
            for (size_t p = 0; p < plane; ++p) gsrow[p] += g * orow[p];
          }
        }
      }
    };
  });
}

Tensor sum_spatial(const Tensor& x) {
  check_defined(x, "sum_spatial");
  check_rank(x, 3, "sum_spatial");
  const int k = x.dim(0);
  const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
  const auto xv = x.values();
  std::vector<double> out(static_cast<size_t>(k), 0.0);
  for (int j = 0; j < k; ++j) {
    const double* row = &xv[static_cast<size_t>(j) * plane];
    double acc = 0.0;
    for (size_t p = 0; p < plane; ++p) acc += row[p];
    out[static_cast<size_t>(j)] = acc;
  }
  return finish_op(Shape{k}, std::move(out), {x}, [xn = x.node().get(), k, plane](Node self) {
    return [=] {
      for (int j = 0; j < k; ++j) {
        const double g = self->grad[static_cast<size_t>(j)];
        double* grow = &xn->grad[static_cast<size_t>(j) * plane];
        for (size_t p = 0; p < plane; ++p) grow[p] += g;
      }
    };
  });
}

Tensor div_rows(const Tensor& x, const Tensor& s) {
  check_defined(x, "div_rows");
  check_defined(s, "div_rows");
  check_rank(x, 2, "div_rows");
  check_rank(s, 1, "div_rows");
  const int k = x.dim(0), d = x.dim(1);
  if (s.dim(0) != k) throw ShapeError("div_rows: one divisor per row required");
  const auto xv = x.values();
  const auto svv = s.values();
  for (int j = 0; j < k; ++j) {
    if (svv[static_cast<size_t>(j)] == 0.0) throw ValueError("div_rows: zero divisor at row " + std::to_string(j));
  }
  std::vector<double> out(x.numel());
  for (int j = 0; j < k; ++j) {
    const double inv = 1.0 / svv[static_cast<size_t>(j)];
    for (int ch = 0; ch < d; ++ch)
      out[static_cast<size_t>(j) * d + ch] = xv[static_cast<size_t>(j) * d + ch] * inv;
  }
  return finish_op(x.shape(), std::move(out), {x, s},
                   [xn = x.node().get(), sn = s.node().get(), k, d](Node self) {
    return [=] {
      for (int j = 0; j < k; ++j) {
        const double sj = sn->data[static_cast<size_t>(j)];
        const double inv = 1.0 / sj;
        double dot = 0.0;
        for (int ch = 0; ch < d; ++ch) {
          const size_t idx = static_cast<size_t>(j) * d + ch;
          if (xn->requires_grad) xn->grad[idx] += self->grad[idx] * inv;
          dot += self->grad[idx] * self->data[idx];
        }
        if (sn->requires_grad) sn->grad[static_cast<size_t>(j)] -= dot * inv;
      }
    };
  });
}

Tensor normalize_rows(const Tensor& x, double eps) {
  check_defined(x, "normalize_rows");
  check_rank(x, 2, "normalize_rows");
  const int k = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  std::vector<double> norms(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    double acc = 0.0;
    for (int ch = 0; ch < d; ++ch) {
      const double v = xv[static_cast<size_t>(j) * d + ch];
      acc += v * v;
    }
    const double n = std::sqrt(acc);
    norms[static_cast<size_t>(j)] = n;
    if (n < eps) {
      for (int ch = 0; ch < d; ++ch) out[static_cast<size_t>(j) * d + ch] = 0.0;
    } else {
      const double inv = 1.0 / n;
      for (int ch = 0; ch < d; ++ch)
        out[static_cast<size_t>(j) * d + ch] = xv[static_cast<size_t>(j) * d + ch] * inv;
    }
  }
  return finish_op(x.shape(), std::move(out), {x},
                   [xn = x.node().get(), norms = std::move(norms), k, d, eps](Node self) mutable {
    return [=, norms = std::move(norms)] {
      for (int j = 0; j < k; ++j) {
        const double n = norms[static_cast<size_t>(j)];
        if (n < eps) continue;  // degenerate row: zero output, zero grad
        const double inv = 1.0 / n;
        double dot = 0.0;
        for (int ch = 0; ch < d; ++ch) {
          const size_t idx = static_cast<size_t>(j) * d + ch;
          dot += self->grad[idx] * self->data[idx];
        }
        for (int ch = 0; ch < d; ++ch) {
          const size_t idx = static_cast<size_t>(j) * d + ch;
          xn->grad[idx] += (self->grad[idx] - self->data[idx] * dot) * inv;
        }
      }
    };
  });
}

}  // namespace cmoe::ops
