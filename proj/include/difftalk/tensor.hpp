#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace difftalk {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names every shape involved.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
};

}  // namespace detail

/// Recording switch for the gradient tape. While a guard is alive, new results carry no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

/// Dense row-major double tensor. Copies share storage and history (handle semantics);
/// use clone() or detach() for an independent value.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view of the values. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();

  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  /// Toggle tape participation of a leaf. Allocates a zeroed gradient when enabled,
  /// drops it when disabled.
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result. History is recorded only when grad mode is on and some parent
/// requires grad; otherwise the backward closure is dropped.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   BackwardFn backward);

inline bool wants_grad(const Tensor& t) { return t.defined() && t.node()->requires_grad; }

/// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

}  // namespace detail

namespace ops {

// Elementwise, with suffix broadcasting: b's shape may equal a trailing
// sub-shape of a's (biases, positional tables, per-row constants).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the last two axes (batched matrix transpose).
Tensor swap_last2(const Tensor& a);
/// Prepends a batch axis of size n by repetition.
Tensor repeat_leading(const Tensor& a, std::size_t n);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor softmax(const Tensor& x, std::size_t axis);
/// softmax(q k^T / sqrt(d)) v over [L, d] or batched [B, L, d] operands. With heads > 1
/// the feature axes are split evenly and results concatenated.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads = 1);

/// Normalizes over the last axis; gamma/beta may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// x[B, C, ...] normalized within channel groups, then per-channel affine.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

/// x[B, Cin, H, W] with w[Cout, Cin, kh, kw]; bias[Cout] may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dGeometry geom);
/// x[B, Cin, L] with w[Cout, Cin, k].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);
/// Nearest-neighbour 2x upsampling of x[B, C, H, W].
Tensor upsample2x(const Tensor& x);
/// x[B, C, ...] + e[B, C] broadcast over the trailing axes.
Tensor add_channelwise(const Tensor& x, const Tensor& e);

/// [B, C, H, W] -> [B, H*W, C]
Tensor to_tokens(const Tensor& x);
/// [B, H*W, C] -> [B, C, H, W]
Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w);

}  // namespace ops

}  // namespace difftalk
