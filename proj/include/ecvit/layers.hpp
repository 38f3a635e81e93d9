#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ecvit/config.hpp"
#include "ecvit/ops.hpp"
#include "ecvit/rng.hpp"

namespace ecvit {

inline constexpr double kInitStd = 0.02;

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
using Named = std::vector<std::pair<std::string, Tensor<T>>>;

/// Trainable leaf filled with N(0, std) draws from `rng`.
template <typename T>
Tensor<T> normal_param(Shape shape, Rng& rng, double std = kInitStd) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<T>(std * rng.normal());
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
LinearParams<T> make_linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng) {
  LinearParams<T> p;
  p.weight = normal_param<T>({in, out}, rng);
  if (bias) p.bias = const_param<T>({out}, T(0));
  return p;
}

template <typename T>
LayerNormParams<T> make_layernorm(std::int64_t dim) {
  return {const_param<T>({dim}, T(1)), const_param<T>({dim}, T(0))};
}

template <typename T>
BatchNormParams<T> make_batchnorm(std::int64_t channels) {
  return {const_param<T>({channels}, T(1)), const_param<T>({channels}, T(0)),
          Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
}

template <typename T>
Tensor<T> apply(const LinearParams<T>& p, const Tensor<T>& x) {
  return linear(x, p.weight, p.bias);
}

template <typename T>
Tensor<T> apply(const LayerNormParams<T>& p, const Tensor<T>& x) {
  return layernorm(x, p.gamma, p.beta);
}

template <typename T>
Tensor<T> apply(BatchNormParams<T>& p, const Tensor<T>& x, Mode mode) {
  return batchnorm(x, p.gamma, p.beta, p.running_mean, p.running_var, mode);
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
  switch (a) {
    case Activation::kGelu: return gelu(x);
    case Activation::kRelu: return relu(x);
    default: return x;
  }
}

template <typename T>
void add_named(Named<T>& out, const std::string& prefix, const LinearParams<T>& p) {
  out.emplace_back(prefix + ".weight", p.weight);
  if (p.bias.defined()) out.emplace_back(prefix + ".bias", p.bias);
}

template <typename T>
void add_named(Named<T>& out, const std::string& prefix, const LayerNormParams<T>& p) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

template <typename T>
void add_named(Named<T>& out, const std::string& prefix, const BatchNormParams<T>& p) {
  if (!p.gamma.defined()) return;
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

template <typename T>
void add_buffers(Named<T>& out, const std::string& prefix, const BatchNormParams<T>& p) {
  if (!p.gamma.defined()) return;
  out.emplace_back(prefix + ".running_mean", p.running_mean);
  out.emplace_back(prefix + ".running_var", p.running_var);
}

/// Batch of token sequences: slot 0 is the class token, then rows * cols
/// patch tokens in row-major grid order.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [B, N + 1, D]
  Grid grid;
  std::int64_t patches() const { return grid.count(); }
  std::int64_t dim() const { return tokens.dim(2); }
};

}  // namespace ecvit
