#include "difftalk/layers.hpp"

#include <cmath>

namespace difftalk::nn {

namespace {

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng, Init init) {
  if (init == Init::kZero) return Tensor::zeros(std::move(shape));
  return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace

Linear::Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
               Rng& rng, bool with_bias, Init init) {
  weight = store.add(prefix + ".weight", init_weight({in, out}, in, rng, init));
  if (with_bias) bias = store.add(prefix + ".bias", Tensor::zeros({out}));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, std::size_t dim) {
  gamma = store.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
  beta = store.add(prefix + ".beta", Tensor::zeros({dim}));
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& prefix, std::size_t channels,
                     std::size_t g)
    : groups(g) {
  gamma = store.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
  beta = store.add(prefix + ".beta", Tensor::zeros({channels}));
}

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
               std::size_t kernel, std::size_t stride, Rng& rng, Init init) {
  weight = store.add(prefix + ".weight",
                     init_weight({out, in, kernel, kernel}, in * kernel * kernel, rng, init));
  bias = store.add(prefix + ".bias", Tensor::zeros({out}));
  geom = ops::Conv2dGeometry{stride, stride, kernel / 2, kernel / 2};
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
         std::size_t out, Rng& rng, Init last)
    : fc1(store, prefix + ".fc1", in, hidden, rng), fc2(store, prefix + ".fc2", hidden, out, rng,
                                                        true, last) {}

AttentionBlock::AttentionBlock(ParamStore& store, const std::string& prefix, std::size_t dim,
                               std::size_t ctx_dim, std::size_t h, Rng& rng)
    : norm_q(store, prefix + ".norm_q", dim),
      norm_ctx(store, prefix + ".norm_ctx", ctx_dim),
      wq(store, prefix + ".wq", dim, dim, rng, false),
      wk(store, prefix + ".wk", ctx_dim, dim, rng, false),
      wv(store, prefix + ".wv", ctx_dim, dim, rng, false),
      wo(store, prefix + ".wo", dim, dim, rng),
      heads(h) {}

Tensor AttentionBlock::self_attend(const Tensor& x) const {
  Tensor n = norm_q(x);
  return ops::add(x, wo(ops::attention(wq(n), wk(n), wv(n), heads)));
}

Tensor AttentionBlock::cross_attend(const Tensor& x, const Tensor& ctx) const {
  Tensor n = norm_q(x);
  Tensor c = norm_ctx(ctx);
  return ops::add(x, wo(ops::attention(wq(n), wk(c), wv(c), heads)));
}

FeedForward::FeedForward(ParamStore& store, const std::string& prefix, std::size_t dim,
                         std::size_t hidden, Rng& rng)
    : norm(store, prefix + ".norm", dim), mlp(store, prefix + ".mlp", dim, hidden, dim, rng) {}

}  // namespace difftalk::nn
