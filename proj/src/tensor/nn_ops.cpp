#include <algorithm>
#include <cmath>

#include "difftalk/tensor.hpp"

namespace difftalk::ops {

using detail::gemm;
using detail::make_result;
using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

struct AttnDims {
  std::size_t batch, lq, lk, d, dv;
};

AttnDims attention_dims(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const auto mismatch = [&] {
    return DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                          ", v " + shape_str(v.shape()) + ", heads " + std::to_string(heads));
  };
  const std::size_t r = q.ndim();
  if ((r != 2 && r != 3) || k.ndim() != r || v.ndim() != r || heads == 0) throw mismatch();
  const std::size_t o = r - 2;
  AttnDims dims{r == 3 ? q.dim(0) : 1, q.dim(o), k.dim(o), q.dim(o + 1), v.dim(o + 1)};
  if (r == 3 && (k.dim(0) != dims.batch || v.dim(0) != dims.batch)) throw mismatch();
  if (k.dim(o + 1) != dims.d || v.dim(o) != dims.lk) throw mismatch();
  if (dims.d % heads != 0 || dims.dv % heads != 0) throw mismatch();
  return dims;
}

// Copies columns [col0, col0 + width) of a row-major [rows, stride] block.
void gather_cols(const double* src, std::size_t rows, std::size_t stride, std::size_t col0,
                 std::size_t width, double* dst) {
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * stride + col0, width, dst + r * width);
}

void scatter_add_cols(const double* src, std::size_t rows, std::size_t stride, std::size_t col0,
                      std::size_t width, double* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) dst[r * stride + col0 + c] += src[r * width + c];
  }
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, kh, kw, hout, wout;
  Conv2dGeometry g;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return hout * wout; }
};

void im2col(const double* x, const ConvDims& d, double* cols) {
  const std::size_t n = d.positions();
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        double* row = cols + ((c * d.kh + ki) * d.kw + kj) * n;
        for (std::size_t oy = 0; oy < d.hout; ++oy) {
          const long iy = static_cast<long>(oy * d.g.stride_h + ki) - static_cast<long>(d.g.pad_h);
          double* out = row + oy * d.wout;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill_n(out, d.wout, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.wout; ++ox) {
            const long ix = static_cast<long>(ox * d.g.stride_w + kj) - static_cast<long>(d.g.pad_w);
            out[ox] = (ix < 0 || ix >= static_cast<long>(d.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, double* dx) {
  const std::size_t n = d.positions();
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * n;
        for (std::size_t oy = 0; oy < d.hout; ++oy) {
          const long iy = static_cast<long>(oy * d.g.stride_h + ki) - static_cast<long>(d.g.pad_h);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          double* dst = dx + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const double* src = row + oy * d.wout;
          for (std::size_t ox = 0; ox < d.wout; ++ox) {
            const long ix = static_cast<long>(ox * d.g.stride_w + kj) - static_cast<long>(d.g.pad_w);
            if (ix >= 0 && ix < static_cast<long>(d.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const AttnDims d = attention_dims(q, k, v, heads);
  const std::size_t dh = d.d / heads, dvh = d.dv / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Shape out_shape = q.shape();
  out_shape.back() = d.dv;
  std::vector<double> out(d.batch * d.lq * d.dv);
  auto probs = std::make_shared<std::vector<double>>(d.batch * heads * d.lq * d.lk);

  std::vector<double> qh(d.lq * dh), kh(d.lk * dh), vh(d.lk * dvh), oh(d.lq * dvh);
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather_cols(qv + b * d.lq * d.d, d.lq, d.d, h * dh, dh, qh.data());
      gather_cols(kv + b * d.lk * d.d, d.lk, d.d, h * dh, dh, kh.data());
      gather_cols(vv + b * d.lk * d.dv, d.lk, d.dv, h * dvh, dvh, vh.data());
      double* p = probs->data() + (b * heads + h) * d.lq * d.lk;
      gemm(false, true, d.lq, d.lk, dh, scale, qh.data(), kh.data(), 0.0, p);
      for (std::size_t i = 0; i < d.lq; ++i) {
        double* row = p + i * d.lk;
        const double mx = *std::max_element(row, row + d.lk);
        double z = 0.0;
        for (std::size_t j = 0; j < d.lk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < d.lk; ++j) row[j] /= z;
      }
      gemm(false, false, d.lq, dvh, d.lk, 1.0, p, vh.data(), 0.0, oh.data());
      for (std::size_t i = 0; i < d.lq; ++i) {
        std::copy_n(oh.data() + i * dvh, dvh, out.data() + (b * d.lq + i) * d.dv + h * dvh);
      }
    }
  }

  NodePtr qn = q.node(), kn = k.node(), vn = v.node();
  return make_result(std::move(out_shape), std::move(out), {q, k, v},
                     [qn, kn, vn, probs, d, heads, dh, dvh, scale](Node& self) {
    std::vector<double> qh(d.lq * dh), kh(d.lk * dh), vh(d.lk * dvh), doh(d.lq * dvh);
    std::vector<double> dp(d.lq * d.lk), dq(d.lq * dh), dk(d.lk * dh), dv(d.lk * dvh);
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * d.lq * d.lk;
        gather_cols(self.grad.data() + b * d.lq * d.dv, d.lq, d.dv, h * dvh, dvh, doh.data());
        if (vn->requires_grad) {
          gemm(true, false, d.lk, dvh, d.lq, 1.0, p, doh.data(), 0.0, dv.data());
          scatter_add_cols(dv.data(), d.lk, d.dv, h * dvh, dvh, vn->grad.data() + b * d.lk * d.dv);
        }
        if (!qn->requires_grad && !kn->requires_grad) continue;
        gather_cols(vn->value.data() + b * d.lk * d.dv, d.lk, d.dv, h * dvh, dvh, vh.data());
        gemm(false, true, d.lq, d.lk, dvh, 1.0, doh.data(), vh.data(), 0.0, dp.data());
        for (std::size_t i = 0; i < d.lq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d.lk; ++j) dot += dp[i * d.lk + j] * p[i * d.lk + j];
          for (std::size_t j = 0; j < d.lk; ++j) {
            dp[i * d.lk + j] = p[i * d.lk + j] * (dp[i * d.lk + j] - dot);
          }
        }
        if (qn->requires_grad) {
          gather_cols(kn->value.data() + b * d.lk * d.d, d.lk, d.d, h * dh, dh, kh.data());
          gemm(false, false, d.lq, dh, d.lk, scale, dp.data(), kh.data(), 0.0, dq.data());
          scatter_add_cols(dq.data(), d.lq, d.d, h * dh, dh, qn->grad.data() + b * d.lq * d.d);
        }
        if (kn->requires_grad) {
          gather_cols(qn->value.data() + b * d.lq * d.d, d.lq, d.d, h * dh, dh, qh.data());
          gemm(true, false, d.lk, dh, d.lq, scale, dp.data(), qh.data(), 0.0, dk.data());
          scatter_add_cols(dk.data(), d.lk, d.d, h * dh, dh, kn->grad.data() + b * d.lk * d.d);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.shape().back();
  if ((gamma.defined() && gamma.numel() != n) || (beta.defined() && beta.numel() != n)) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with affine of size " +
                         std::to_string(gamma.defined() ? gamma.numel() : beta.numel()));
  }
  const std::size_t rows = x.numel() / n;
  const auto& xv = x.node()->value;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[r * n + j] = xh;
      double y = xh;
      if (gamma.defined()) y *= gamma.data()[j];
      if (beta.defined()) y += beta.data()[j];
      out[r * n + j] = y;
    }
  }
  NodePtr xn = x.node();
  NodePtr gn = gamma.defined() ? gamma.node() : nullptr;
  NodePtr bn = beta.defined() ? beta.node() : nullptr;
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xn, gn, bn, xhat, inv_std, rows, n](Node& self) {
    std::vector<double> dxh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * n;
      const double* xh = xhat->data() + r * n;
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        dxh[j] = gn ? g[j] * gn->value[j] : g[j];
        mean_d += dxh[j];
        mean_dx += dxh[j] * xh[j];
        if (gn && gn->requires_grad) gn->grad[j] += g[j] * xh[j];
        if (bn && bn->requires_grad) bn->grad[j] += g[j];
      }
      if (!xn->requires_grad) continue;
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      const double is = (*inv_std)[r];
      for (std::size_t j = 0; j < n; ++j) {
        xn->grad[r * n + j] += is * (dxh[j] - mean_d - xh[j] * mean_dx);
      }
    }
  });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.ndim() < 2 || groups == 0 || x.dim(1) % groups != 0) {
    throw DimensionError("group_norm: " + shape_str(x.shape()) + " with " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("group_norm: affine size does not match channels of " +
                         shape_str(x.shape()));
  }
  const std::size_t per_group = channels / groups * spatial;
  const std::size_t n_groups = batch * groups;
  const auto& xv = x.node()->value;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(n_groups);
  std::vector<double> out(xv.size());
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  for (std::size_t gi = 0; gi < n_groups; ++gi) {
    const double* blk = xv.data() + gi * per_group;
    double mu = 0.0;
    for (std::size_t j = 0; j < per_group; ++j) mu += blk[j];
    mu /= static_cast<double>(per_group);
    double var = 0.0;
    for (std::size_t j = 0; j < per_group; ++j) var += (blk[j] - mu) * (blk[j] - mu);
    var /= static_cast<double>(per_group);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[gi] = is;
    for (std::size_t j = 0; j < per_group; ++j) {
      const std::size_t i = gi * per_group + j;
      const std::size_t c = (i / spatial) % channels;
      (*xhat)[i] = (blk[j] - mu) * is;
      out[i] = (*xhat)[i] * gv[c] + bv[c];
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xn, gn, bn, xhat, inv_std, n_groups, per_group, spatial,
                      channels](Node& self) {
    std::vector<double> dxh(per_group);
    for (std::size_t gi = 0; gi < n_groups; ++gi) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < per_group; ++j) {
        const std::size_t i = gi * per_group + j;
        const std::size_t c = (i / spatial) % channels;
        const double g = self.grad[i];
        dxh[j] = g * gn->value[c];
        mean_d += dxh[j];
        mean_dx += dxh[j] * (*xhat)[i];
        if (gn->requires_grad) gn->grad[c] += g * (*xhat)[i];
        if (bn->requires_grad) bn->grad[c] += g;
      }
      if (!xn->requires_grad) continue;
      mean_d /= static_cast<double>(per_group);
      mean_dx /= static_cast<double>(per_group);
      const double is = (*inv_std)[gi];
      for (std::size_t j = 0; j < per_group; ++j) {
        const std::size_t i = gi * per_group + j;
        xn->grad[i] += is * (dxh[j] - mean_d - (*xhat)[i] * mean_dx);
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dGeometry geom) {
  const auto bad = [&] {
    return DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " +
                          shape_str(w.shape()));
  };
  if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) throw bad();
  if (geom.stride_h == 0 || geom.stride_w == 0) throw bad();
  ConvDims d{};
  d.batch = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.g = geom;
  if (d.h + 2 * geom.pad_h < d.kh || d.w + 2 * geom.pad_w < d.kw) throw bad();
  d.hout = (d.h + 2 * geom.pad_h - d.kh) / geom.stride_h + 1;
  d.wout = (d.w + 2 * geom.pad_w - d.kw) / geom.stride_w + 1;
  if (bias.defined() && bias.numel() != d.cout) throw bad();

  const std::size_t k = d.patch(), n = d.positions();
  const std::size_t in_stride = d.cin * d.h * d.w, out_stride = d.cout * n;
  std::vector<double> out(d.batch * out_stride);
  std::vector<double> cols(k * n);
  for (std::size_t b = 0; b < d.batch; ++b) {
    im2col(x.data().data() + b * in_stride, d, cols.data());
    double* ob = out.data() + b * out_stride;
    if (bias.defined()) {
      for (std::size_t c = 0; c < d.cout; ++c) std::fill_n(ob + c * n, n, bias.data()[c]);
    }
    gemm(false, false, d.cout, n, k, 1.0, w.data().data(), cols.data(), bias.defined() ? 1.0 : 0.0,
         ob);
  }
  NodePtr xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
  return make_result({d.batch, d.cout, d.hout, d.wout}, std::move(out), {x, w, bias},
                     [xn, wn, bn, d, k, n, in_stride, out_stride](Node& self) {
    std::vector<double> cols(k * n), dcols(k * n);
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* gb = self.grad.data() + b * out_stride;
      if (wn->requires_grad) {
        im2col(xn->value.data() + b * in_stride, d, cols.data());
        gemm(false, true, d.cout, k, n, 1.0, gb, cols.data(), 1.0, wn->grad.data());
      }
      if (bn && bn->requires_grad) {
        for (std::size_t c = 0; c < d.cout; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gb[c * n + j];
          bn->grad[c] += s;
        }
      }
      if (xn->requires_grad) {
        gemm(true, false, k, n, d.cout, 1.0, wn->value.data(), gb, 0.0, dcols.data());
        col2im_add(dcols.data(), d, xn->grad.data() + b * in_stride);
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  if (x.ndim() != 3 || w.ndim() != 3) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()));
  }
  Tensor x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
  Tensor w4 = reshape(w, {w.dim(0), w.dim(1), 1, w.dim(2)});
  Tensor y = conv2d(x4, w4, bias, Conv2dGeometry{1, stride, 0, pad});
  return reshape(y, {y.dim(0), y.dim(1), y.dim(3)});
}

Tensor upsample2x(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("upsample2x expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto& xv = x.node()->value;
  std::vector<double> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) {
        out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
      }
    }
  }
  NodePtr xn = x.node();
  return make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                     [xn, planes, h, w](Node& self) {
                       if (!xn->requires_grad) return;
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (std::size_t i = 0; i < 2 * h; ++i) {
                           for (std::size_t j = 0; j < 2 * w; ++j) {
                             xn->grad[(p * h + i / 2) * w + j / 2] +=
                                 self.grad[(p * 2 * h + i) * 2 * w + j];
                           }
                         }
                       }
                     });
}

Tensor add_channelwise(const Tensor& x, const Tensor& e) {
  if (x.ndim() < 2 || e.ndim() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1)) {
    throw DimensionError("add_channelwise: " + shape_str(x.shape()) + " + " + shape_str(e.shape()));
  }
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t inner = x.numel() / rows;
  const auto& xv = x.node()->value;
  const auto& ev = e.node()->value;
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = xv[r * inner + i] + ev[r];
  }
  NodePtr xn = x.node(), en = e.node();
  return make_result(x.shape(), std::move(out), {x, e}, [xn, en, rows, inner](Node& self) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < inner; ++i) {
        const double g = self.grad[r * inner + i];
        if (xn->requires_grad) xn->grad[r * inner + i] += g;
        if (en->requires_grad) en->grad[r] += g;
      }
    }
  });
}

}  // namespace difftalk::ops
