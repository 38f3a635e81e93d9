#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecvit/layers.hpp"

namespace ecvit {

struct AdamWOptions {
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Norm gains and offsets and the class token are not decayed.
bool decays(const std::string& param_name);

/// AdamW with decoupled weight decay: p -= lr * wd * p, then the
/// bias-corrected Adam update. Moments are kept in the parameter dtype.
template <typename T>
class AdamW {
 public:
  AdamW(Named<T> params, AdamWOptions opts);

  /// Applies one update from the parameters' current gradients. Throws
  /// ContractError naming the first parameter without a gradient.
  void step(double lr);

  void zero_grad();

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  const Named<T>& params() const { return params_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const AdamWOptions& options() const { return opts_; }

 private:
  Named<T> params_;
  std::vector<bool> decay_;
  std::vector<Tensor<T>> m_, v_;
  AdamWOptions opts_;
  std::int64_t steps_ = 0;
};

/// Linear warmup then half-cosine decay to 0 at total_steps. During warmup
/// the rate is base * (step + 1) / (warmup + 1), reaching base at step ==
/// warmup without a zero-rate first step.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps);

/// 5% of the total, rounded down.
std::int64_t default_warmup(std::int64_t total_steps);

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const Named<T>& params, double max_norm);

}  // namespace ecvit
