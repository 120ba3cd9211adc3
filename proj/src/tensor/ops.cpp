#include <algorithm>
#include <cmath>

#include "difftalk/tensor.hpp"

namespace difftalk::ops {

using detail::make_result;
using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    ok = a[a.size() - b.size() + i] == b[i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(b) +
                         " does not broadcast onto " + shape_str(a));
  }
  return difftalk::numel(b);
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& a, Fwd fwd, Dfdx dfdx) {
  const auto& av = a.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  NodePtr an = a.node();
  return make_result(a.shape(), std::move(out), {a}, [an, dfdx](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period(a.shape(), b.shape(), "add");
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % period];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn, period](Node& self) {
    if (an->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i % period] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period(a.shape(), b.shape(), "sub");
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % period];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn, period](Node& self) {
    if (an->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i % period] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period(a.shape(), b.shape(), "mul");
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % period];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn, period](Node& self) {
    if (an->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        an->grad[i] += self.grad[i] * bn->value[i % period];
      }
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        bn->grad[i % period] += self.grad[i] * an->value[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  NodePtr an = a.node();
  return make_result({1}, {total}, {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    for (auto& g : an->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return mean(square(sub(a, b)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (difftalk::numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  NodePtr an = a.node();
  return make_result(std::move(shape), an->value, {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

Tensor swap_last2(const Tensor& a) {
  if (a.ndim() < 2) throw DimensionError("swap_last2 on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  const std::size_t rows = out_shape[out_shape.size() - 2];
  const std::size_t cols = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  const std::size_t batch = a.numel() / (rows * cols);
  const auto& av = a.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = av.data() + b * rows * cols;
    double* dst = out.data() + b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
  NodePtr an = a.node();
  return make_result(std::move(out_shape), std::move(out), {a},
                     [an, batch, rows, cols](Node& self) {
                       if (!an->requires_grad) return;
                       for (std::size_t b = 0; b < batch; ++b) {
                         double* dst = an->grad.data() + b * rows * cols;
                         const double* src = self.grad.data() + b * rows * cols;
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) {
                             dst[r * cols + c] += src[c * rows + r];
                           }
                         }
                       }
                     });
}

Tensor repeat_leading(const Tensor& a, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  const auto& av = a.node()->value;
  std::vector<double> out;
  out.reserve(av.size() * n);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), av.begin(), av.end());
  NodePtr an = a.node();
  return make_result(std::move(shape), std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    const std::size_t period = an->grad.size();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i % period] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " on axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  std::vector<double> out(difftalk::numel(out_shape));
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> widths;
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto& pv = p.node()->value;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * w, w, out.data() + o * out_row + offset);
    }
    offset += w;
    nodes.push_back(p.node());
    widths.push_back(w);
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [nodes, widths, outer, out_row](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         const std::size_t w = widths[k];
                         if (nodes[k]->requires_grad) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * out_row + off;
                             double* dst = nodes[k]->grad.data() + o * w;
                             for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                           }
                         }
                         off += w;
                       }
                     });
}

Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("index_select axis out of range for " + shape_str(s));
  for (auto idx : indices) {
    if (idx >= s[axis]) {
      throw DimensionError("index_select: index " + std::to_string(idx) + " out of range for " +
                           shape_str(s) + " axis " + std::to_string(axis));
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = indices.size();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t n_in = s[axis];
  const auto& av = a.node()->value;
  std::vector<double> out(difftalk::numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::copy_n(av.data() + (o * n_in + idx[j]) * inner, inner,
                  out.data() + (o * idx.size() + j) * inner);
    }
  }
  NodePtr an = a.node();
  return make_result(std::move(out_shape), std::move(out), {a},
                     [an, idx, outer, inner, n_in](Node& self) {
                       if (!an->requires_grad) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < idx.size(); ++j) {
                           const double* src = self.grad.data() + (o * idx.size() + j) * inner;
                           double* dst = an->grad.data() + (o * n_in + idx[j]) * inner;
                           for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0, out.data());
  NodePtr an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    if (an->requires_grad) {
      detail::gemm(false, true, m, k, n, 1.0, self.grad.data(), bn->value.data(), 1.0,
                   an->grad.data());
    }
    if (bn->requires_grad) {
      detail::gemm(true, false, k, n, m, 1.0, an->value.data(), self.grad.data(), 1.0,
                   bn->grad.data());
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.ndim() != 2 || x.ndim() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  if (bias.defined()) {
    const auto& bv = bias.node()->value;
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  }
  detail::gemm(false, false, rows, out_dim, in, 1.0, x.data().data(), w.data().data(),
               bias.defined() ? 1.0 : 0.0, out.data());
  NodePtr xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
  return make_result(std::move(out_shape), std::move(out), {x, w, bias},
                     [xn, wn, bn, rows, in, out_dim](Node& self) {
                       if (xn->requires_grad) {
                         detail::gemm(false, true, rows, in, out_dim, 1.0, self.grad.data(),
                                      wn->value.data(), 1.0, xn->grad.data());
                       }
                       if (wn->requires_grad) {
                         detail::gemm(true, false, in, out_dim, rows, 1.0, xn->value.data(),
                                      self.grad.data(), 1.0, wn->grad.data());
                       }
                       if (bn && bn->requires_grad) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < out_dim; ++j) {
                             bn->grad[j] += self.grad[r * out_dim + j];
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  const auto& xv = x.node()->value;
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  NodePtr xn = x.node();
  return make_result(s, std::move(out), {x}, [xn, outer, inner, n](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dot += self.grad[base + j * inner] * self.value[base + j * inner];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          xn->grad[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor to_tokens(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("to_tokens expects [B,C,H,W], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  return swap_last2(reshape(x, {s[0], s[1], s[2] * s[3]}));
}

Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
  if (t.ndim() != 3 || t.dim(1) != h * w) {
    throw DimensionError("from_tokens: " + shape_str(t.shape()) + " to " + std::to_string(h) +
                         "x" + std::to_string(w));
  }
  const std::size_t b = t.dim(0), c = t.dim(2);
  return reshape(swap_last2(t), {b, c, h, w});
}

}  // namespace difftalk::ops
