#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ecvit/tensor.hpp"

namespace ecvit {

/// (height, width) pair used for kernels, strides and padding.
struct Hw {
  std::int64_t h = 0;
  std::int64_t w = 0;
  friend bool operator==(const Hw&, const Hw&) = default;
};

struct Conv2dOptions {
  Hw stride{1, 1};
  Hw pad{0, 0};
  std::int64_t groups = 1;
};

struct Pool2dOptions {
  Hw kernel{2, 2};
  Hw stride{2, 2};
  Hw pad{0, 0};
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kLayerNormEps = 1e-6;

// Elementwise arithmetic with NumPy-style (right-aligned) broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

// Layout. reshape accepts a single -1 and aliases the input's values.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& dims);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::int64_t a, std::int64_t b);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::int64_t axis,
                             const std::vector<std::int64_t>& sizes);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);

// Reductions. Reducing a rank-1 tensor yields shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::int64_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::int64_t axis);

/// Batched contraction [..., m, k] x [..., k, n] with broadcast batch dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., in] * weight[in, out] + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Grouped cross-correlation. x[B,C,H,W], weight[Co, C/groups, kh, kw],
/// optional bias[Co]. Output sizes use floor division.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opts);

/// Windowed maximum with -inf padding; ties go to the first element in
/// row-major window order.
template <typename T> Tensor<T> maxpool2d(const Tensor<T>& x, const Pool2dOptions& opts);

/// Non-overlapping maximum over groups of `kernel` consecutive tokens of
/// x[B, N, D]. Requires kernel == stride and N divisible by it.
template <typename T>
Tensor<T> maxpool1d_seq(const Tensor<T>& x, std::int64_t kernel, std::int64_t stride);

/// Exact GELU, x * Phi(x) with Phi from erf.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis);

/// Batch normalization over every axis except 1. In train mode the batch
/// statistics normalize (biased variance) and the running buffers are updated
/// in place with the unbiased variance. Eval mode reads the running buffers.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                    double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

/// Normalizes over the last axis.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = kLayerNormEps);

/// Mean softmax cross-entropy of logits[B, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels);

/// Index of the first maximum along `axis`, flattened over the other axes.
template <typename T> std::vector<std::int64_t> argmax(const Tensor<T>& x, std::int64_t axis);

}  // namespace ecvit
