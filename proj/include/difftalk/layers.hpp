#pragma once

#include <string>

#include "difftalk/param_store.hpp"
#include "difftalk/tensor.hpp"

namespace difftalk::nn {

enum class Init { kDefault, kZero };

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined

  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true, Init init = Init::kDefault);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
};

struct GroupNorm {
  Tensor gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t groups);
  Tensor operator()(const Tensor& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  ops::Conv2dGeometry geom;

  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
         std::size_t kernel, std::size_t stride, Rng& rng, Init init = Init::kDefault);
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, geom); }
};

/// Two-layer perceptron with SiLU in between.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
      std::size_t out, Rng& rng, Init last = Init::kDefault);
  Tensor operator()(const Tensor& x) const { return fc2(ops::silu(fc1(x))); }
};

/// Pre-norm residual attention: x + W_o attn(W_q LN(x), W_k ctx, W_v ctx).
/// Self-attention when the context is the normalized query stream itself.
struct AttentionBlock {
  LayerNorm norm_q;
  LayerNorm norm_ctx;
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;

  AttentionBlock() = default;
  AttentionBlock(ParamStore& store, const std::string& prefix, std::size_t dim,
                 std::size_t ctx_dim, std::size_t heads, Rng& rng);
  Tensor self_attend(const Tensor& x) const;
  Tensor cross_attend(const Tensor& x, const Tensor& ctx) const;
};

/// Pre-norm residual feed-forward block.
struct FeedForward {
  LayerNorm norm;
  Mlp mlp;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
              Rng& rng);
  Tensor operator()(const Tensor& x) const { return ops::add(x, mlp(norm(x))); }
};

}  // namespace difftalk::nn
