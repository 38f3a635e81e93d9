#include "ecvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ecvit {

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h) {
  Tensor<double> probe = x.clone();
  const auto g = finite_diff_inplace([&] { return f(probe); }, probe, h);
  return Tensor<double>(x.shape(), g);
}

std::vector<double> finite_diff_inplace(const std::function<double()>& f, Tensor<double>& param,
                                        double h) {
  NoGradGuard no_grad;
  std::vector<double> g(static_cast<std::size_t>(param.numel()));
  double* p = param.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    const double up = f();
    p[i] = saved - h;
    const double down = f();
    p[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: lengths differ");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

}  // namespace ecvit
