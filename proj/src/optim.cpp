#include "ecvit/optim.hpp"

#include <cmath>
#include <numbers>

namespace ecvit {

bool decays(const std::string& name) {
  auto ends_with = [&](const std::string& s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return !(ends_with(".gamma") || ends_with(".beta") || name == "tokenizer.cls");
}

template <typename T>
AdamW<T>::AdamW(Named<T> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& [name, p] : params_) {
    decay_.push_back(decays(name));
    m_.push_back(Tensor<T>::zeros(p.shape()));
    v_.push_back(Tensor<T>::zeros(p.shape()));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (auto& [name, p] : params_) {
    if (!p.has_grad()) throw ContractError("AdamW: parameter '" + name + "' has no gradient");
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(opts_.beta1, t);
  const double c2 = 1.0 - std::pow(opts_.beta2, t);
  const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    const auto g = p.grad();
    T* w = p.mutable_data();
    T* m = m_[i].mutable_data();
    T* v = v_[i].mutable_data();
    const T shrink = static_cast<T>(decay_[i] ? 1.0 - lr * opts_.weight_decay : 1.0);
    for (std::size_t j = 0; j < g.size(); ++j) {
      w[j] *= shrink;
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + opts_.eps));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& [name, p] : params_) p.clear_grad();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps + 1);
  }
  const auto span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::int64_t default_warmup(std::int64_t total_steps) { return total_steps * 5 / 100; }

template <typename T>
double clip_grad_norm(const Named<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    for (T g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto [name, p] : params) {
      for (T& g : p.mutable_grad()) g *= f;
    }
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(const Named<float>&, double);
template double clip_grad_norm(const Named<double>&, double);

}  // namespace ecvit
