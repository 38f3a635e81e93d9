#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ecvit/rng.hpp"
#include "ecvit/tensor.hpp"

namespace ecvit::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  double error = 0;      // measured discrepancy
  double tolerance = 0;  // pass threshold (0 means exact)
};

using Suite = std::vector<CheckResult>;

inline constexpr double kGradTolerance = 1e-5;

/// Float64 central differences against backward() for every primitive.
Suite gradcheck_primitives(std::uint64_t seed);

/// Tokenizer, a two-layer encoder stack, and the micro model end to end
/// (per parameter group and overall), plus ablation variants of the model.
Suite gradcheck_networks(std::uint64_t seed);

/// Conv, pooling, I-FFN and resize against the naive oracles.
Suite operator_oracle_checks(std::uint64_t seed);

/// P-MSA against the per-block attention oracle (float32, 1e-6) and against
/// global attention when one block covers every token (bitwise).
Suite attention_oracle_checks(std::uint64_t seed);

/// Class-token pass-through, locality, class broadcast and block
/// permutation properties of the encoder.
Suite encoder_invariant_checks(std::uint64_t seed);

Suite gradcheck_suite(std::uint64_t seed);
Suite selftest_suite(std::uint64_t seed);

bool all_pass(const Suite& s);
std::string format_suite(const Suite& s);

/// Uniform values in [lo, hi).
template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = false) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<T>(rng.uniform(lo, hi));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

template <typename T>
std::vector<double> as_doubles(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

/// Relative error between analytic and central-difference gradients of
/// sum(w * f(inputs)) with random w, maximized over the inputs. `pooled`
/// measures all inputs as one vector instead, for graphs where some tensor
/// has an identically zero gradient (a bias feeding train-mode batchnorm).
double grad_error(const std::vector<Tensor<double>>& inputs,
                  const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f, Rng& rng,
                  bool pooled = false);

}  // namespace ecvit::verify
