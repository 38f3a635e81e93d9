#include "ecvit/verify/suites.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "ecvit/data.hpp"
#include "ecvit/encoder.hpp"
#include "ecvit/gradcheck.hpp"
#include "ecvit/model.hpp"
#include "ecvit/ops.hpp"
#include "ecvit/verify/oracles.hpp"

namespace ecvit::verify {

using TD = Tensor<double>;
using TF = Tensor<float>;
using Inputs = std::vector<TD>;

double grad_error(const std::vector<TD>& inputs, const std::function<TD(const Inputs&)>& f, Rng& rng, bool pooled) {
  Inputs in = inputs;
  for (auto& t : in) t.clear_grad();
  const TD out = f(in);
  const TD w = random_tensor<double>(out.shape(), rng, -1.0, 1.0);
  backward(sum(mul(out, w)));
  auto loss = [&] { return sum(mul(f(in), w)).item(); };
  double worst = 0;
  std::vector<double> all_a, all_n;
  for (auto& t : in) {
    const auto numeric = finite_diff_inplace(loss, t);
    std::vector<double> analytic(numeric.size(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    if (pooled) {
      all_a.insert(all_a.end(), analytic.begin(), analytic.end());
      all_n.insert(all_n.end(), numeric.begin(), numeric.end());
    } else {
      worst = std::max(worst, relative_error(analytic, numeric));
    }
  }
  return pooled ? relative_error(all_a, all_n) : worst;
}

bool all_pass(const Suite& s) {
  return std::all_of(s.begin(), s.end(), [](const CheckResult& c) { return c.pass; });
}

std::string format_suite(const Suite& s) {
  std::string out;
  char line[256];
  for (const auto& c : s) {
    std::snprintf(line, sizeof line, "%-4s %-66s err %.3e  tol %.1e\n", c.pass ? "ok" : "FAIL", c.name.c_str(),
                  c.error, c.tolerance);
    out += line;
  }
  return out;
}

namespace {

CheckResult within(std::string name, double err, double tol) { return {std::move(name), err < tol, err, tol}; }
CheckResult exact(std::string name, double err) { return {std::move(name), err == 0.0, err, 0.0}; }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff(as_doubles(a), as_doubles(b));
}

// Distinct values spread over [-2, 2] in random order, so max-pool windows
// never hold near-ties that finite differences would step across.
TD separated(Shape shape, Rng& rng) {
  TD t(std::move(shape));
  const auto n = t.numel();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    t.mutable_data()[i] = -2.0 + 4.0 * static_cast<double>(order[static_cast<std::size_t>(i)]) / static_cast<double>(n);
  }
  t.set_requires_grad(true);
  return t;
}

// Values bounded away from zero for the relu kink.
TD off_zero(Shape shape, Rng& rng) {
  TD t = random_tensor<double>(std::move(shape), rng, 0.1, 2.0);
  for (auto& v : t.mutable_values()) {
    if (rng.uniform() < 0.5) v = -v;
  }
  t.set_requires_grad(true);
  return t;
}

template <typename T>
void randomize(Named<T>& params, Rng& rng) {
  for (auto& [name, t] : params) {
    const bool gain = name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    for (auto& v : t.mutable_values()) v = static_cast<T>(gain ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5));
  }
}

std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace

Suite gradcheck_primitives(std::uint64_t seed) {
  Suite s;
  Rng rng = Rng::derive(seed, {101});
  auto R = [&](Shape shape) { return random_tensor<double>(std::move(shape), rng, -2.0, 2.0, true); };
  auto check = [&](const std::string& name, Inputs in, const std::function<TD(const Inputs&)>& f) {
    s.push_back(within("grad " + name, grad_error(in, f, rng), kGradTolerance));
  };
  const TD none;

  check("add (broadcast)", {R({2, 3, 4}), R({3, 1})}, [](const Inputs& x) { return add(x[0], x[1]); });
  check("sub (broadcast)", {R({2, 3}), R({2, 1})}, [](const Inputs& x) { return sub(x[0], x[1]); });
  check("mul (broadcast)", {R({2, 3, 4}), R({4})}, [](const Inputs& x) { return mul(x[0], x[1]); });
  check("mul (same tensor twice)", {R({5})}, [](const Inputs& x) { return mul(x[0], x[0]); });
  check("two consumers", {R({3, 4}), R({3, 4})},
        [](const Inputs& x) { return add(mul(x[0], x[1]), gelu(x[0])); });
  check("scale", {R({3, 2})}, [](const Inputs& x) { return scale(x[0], 1.7); });
  check("reshape + permute", {R({24})},
        [](const Inputs& x) { return permute(reshape(x[0], {2, 3, 4}), {2, 0, 1}); });
  check("transpose", {R({2, 3, 4})}, [](const Inputs& x) { return transpose(x[0], 0, 2); });
  check("concat", {R({2, 2, 3}), R({2, 1, 3})}, [](const Inputs& x) { return concat<double>({x[0], x[1]}, 1); });
  check("slice", {R({3, 5, 2})}, [](const Inputs& x) { return slice(x[0], 1, 1, 3); });
  check("split", {R({2, 6})}, [](const Inputs& x) {
    auto parts = split(x[0], 1, {2, 3, 1});
    return concat<double>({parts[2], mul(parts[0], parts[0]), parts[1]}, 1);
  });
  check("broadcast_to", {R({1, 3})}, [](const Inputs& x) { return broadcast_to(x[0], {4, 3}); });
  check("sum (all)", {R({3, 4})}, [](const Inputs& x) { return sum(x[0]); });
  check("sum (axis)", {R({2, 3, 4})}, [](const Inputs& x) { return sum(x[0], 1); });
  check("mean (all)", {R({3, 4})}, [](const Inputs& x) { return mean(x[0]); });
  check("mean (axis)", {R({2, 3, 4})}, [](const Inputs& x) { return mean(x[0], -1); });
  check("matmul", {R({3, 4}), R({4, 2})}, [](const Inputs& x) { return matmul(x[0], x[1]); });
  check("matmul (batched broadcast)", {R({2, 1, 3, 4}), R({3, 4, 2})},
        [](const Inputs& x) { return matmul(x[0], x[1]); });
  check("linear", {R({2, 3, 4}), R({4, 5}), R({5})}, [](const Inputs& x) { return linear(x[0], x[1], x[2]); });
  check("linear (no bias)", {R({3, 4}), R({4, 2})}, [none](const Inputs& x) { return linear(x[0], x[1], none); });
  check("conv2d dense", {R({2, 2, 5, 5}), R({3, 2, 3, 3}), R({3})}, [](const Inputs& x) {
    return conv2d(x[0], x[1], x[2], {.stride = {2, 2}, .pad = {1, 1}});
  });
  check("conv2d grouped", {R({1, 4, 5, 4}), R({4, 2, 3, 2})}, [none](const Inputs& x) {
    return conv2d(x[0], x[1], none, {.stride = {1, 2}, .pad = {1, 0}, .groups = 2});
  });
  check("conv2d depthwise (7,1)", {R({2, 3, 6, 5}), R({3, 1, 7, 1}), R({3})}, [](const Inputs& x) {
    return conv2d(x[0], x[1], x[2], {.stride = {2, 1}, .pad = {3, 0}, .groups = 3});
  });
  check("conv2d depthwise multiplier 2", {R({1, 2, 4, 4}), R({4, 1, 3, 3})}, [none](const Inputs& x) {
    return conv2d(x[0], x[1], none, {.pad = {1, 1}, .groups = 2});
  });
  check("conv2d pointwise", {R({2, 3, 3, 3}), R({4, 3, 1, 1})},
        [none](const Inputs& x) { return conv2d(x[0], x[1], none, {}); });
  check("maxpool2d", {separated({1, 2, 6, 6}, rng)}, [](const Inputs& x) {
    return maxpool2d(x[0], {.kernel = {3, 3}, .stride = {2, 2}, .pad = {1, 1}});
  });
  check("maxpool1d_seq", {separated({2, 8, 3}, rng)}, [](const Inputs& x) { return maxpool1d_seq(x[0], 4, 4); });
  check("gelu", {R({3, 5})}, [](const Inputs& x) { return gelu(x[0]); });
  check("relu", {off_zero({4, 4}, rng)}, [](const Inputs& x) { return relu(x[0]); });
  check("softmax (last axis)", {R({3, 5})}, [](const Inputs& x) { return softmax(x[0], -1); });
  check("softmax (middle axis)", {R({2, 4, 3})}, [](const Inputs& x) { return softmax(x[0], 1); });
  {
    TD rm = TD::zeros({3}), rv = TD::ones({3});
    check("batchnorm (train)", {R({4, 3, 2, 3}), R({3}), R({3})},
          [&](const Inputs& x) { return batchnorm(x[0], x[1], x[2], rm, rv, Mode::kTrain); });
    TD em = random_tensor<double>({3}, rng, -0.5, 0.5), ev = random_tensor<double>({3}, rng, 0.5, 2.0);
    check("batchnorm (eval)", {R({2, 3, 2, 2}), R({3}), R({3})},
          [&](const Inputs& x) { return batchnorm(x[0], x[1], x[2], em, ev, Mode::kEval); });
  }
  check("layernorm", {R({2, 3, 6}), R({6}), R({6})}, [](const Inputs& x) { return layernorm(x[0], x[1], x[2]); });
  {
    const std::vector<std::int64_t> labels{2, 0, 3};
    check("cross_entropy", {R({3, 4})}, [labels](const Inputs& x) { return cross_entropy<double>(x[0], labels); });
  }
  {
    // Self-test of the difference quotient itself: d/dx sum(x^2) = 2x.
    const TD x = random_tensor<double>({6}, rng);
    const TD g = finite_diff_grad([](const TD& v) { return sum(mul(v, v)).item(); }, x);
    double err = 0;
    for (std::int64_t i = 0; i < 6; ++i) err = std::max(err, std::abs(g.data()[i] - 2.0 * x.data()[i]));
    s.push_back(within("finite_diff_grad on sum(x^2)", err, 1e-7));
  }
  return s;
}

Suite gradcheck_networks(std::uint64_t seed) {
  Suite s;
  Rng rng = Rng::derive(seed, {202});
  const ModelConfig micro = preset_config("micro");

  {
    ModelParams<double> m = build_model<double>(micro, seed);
    Named<double> p, b;
    tokenizer_named(m.tokenizer, p, b);
    randomize(p, rng);
    Inputs in{random_tensor<double>({2, 3, 8, 8}, rng, -2.0, 2.0, true)};
    for (auto& [name, t] : p) in.push_back(t);
    auto& tok = m.tokenizer;
    s.push_back(within("grad tokenizer (all parameters and input)",
                       grad_error(in, [&](const Inputs& x) { return tokenize(micro, tok, x[0], Mode::kTrain).tokens; }, rng),
                       kGradTolerance));
  }
  {
    const FfnSpec ffn{true, true};
    std::vector<EncoderParams<double>> encs;
    for (int i = 0; i < 2; ++i) encs.push_back(make_encoder<double>(8, 2, 3, ffn, rng));
    Named<double> p, b;
    for (int i = 0; i < 2; ++i) encoder_named(encs[static_cast<std::size_t>(i)], "enc" + std::to_string(i), p, b);
    randomize(p, rng);
    Inputs in{random_tensor<double>({2, 5, 8}, rng, -2.0, 2.0, true)};
    for (auto& [name, t] : p) in.push_back(t);
    const AttentionSpec spec{2, 2, true};
    const Grid grid{2, 2};
    s.push_back(within("grad two-layer encoder stack",
                       grad_error(in,
                                  [&](const Inputs& x) {
                                    TokenSequence<double> t{x[0], grid};
                                    for (auto& e : encs) t = encode(t, e, spec, Mode::kTrain);
                                    return t.tokens;
                                  },
                                  rng, true),
                       kGradTolerance));
  }

  auto model_check = [&](const std::string& label, const ModelConfig& cfg, bool per_group) {
    ModelParams<double> m = build_model<double>(cfg, seed);
    Named<double> params = named_parameters(m);
    randomize(params, rng);
    const TD images = random_tensor<double>({4, 3, cfg.input_hw.h, cfg.input_hw.w}, rng);
    std::vector<std::int64_t> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.num_classes))));
    auto loss = [&] { return cross_entropy(forward(m, images, Mode::kTrain), labels); };
    for (auto& [name, t] : params) t.clear_grad();
    backward(loss());
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    std::vector<double> all_a, all_n;
    for (auto& [name, t] : params) {
      const auto numeric = finite_diff_inplace([&] { return loss().item(); }, t);
      std::vector<double> analytic(numeric.size(), 0.0);
      if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
      auto& g = groups[group_of(name)];
      g.first.insert(g.first.end(), analytic.begin(), analytic.end());
      g.second.insert(g.second.end(), numeric.begin(), numeric.end());
      all_a.insert(all_a.end(), analytic.begin(), analytic.end());
      all_n.insert(all_n.end(), numeric.begin(), numeric.end());
    }
    if (per_group) {
      for (const char* g : {"tokenizer", "stage2", "merge", "stage3", "head"}) {
        if (!groups.count(g)) continue;
        s.push_back(within("grad " + label + " group " + g, relative_error(groups[g].first, groups[g].second),
                           kGradTolerance));
      }
    }
    s.push_back(within("grad " + label + " all parameters", relative_error(all_a, all_n), kGradTolerance));
  };

  model_check("micro model", micro, true);
  ModelConfig v = micro;
  v.append_cls = false;
  model_check("micro append_cls=false", v, false);
  v = micro;
  v.use_merging = false;
  model_check("micro use_merging=false", v, false);
  v = micro;
  v.tokenizer_variant = TokenizerVariant::kFull5;
  v.activation = Activation::kRelu;
  model_check("micro full5 tokenizer, relu", v, false);
  v = micro;
  v.ffn_factorized = false;
  v.use_bn_ffn = false;
  v.use_partition = false;
  model_check("micro global attention, kxk ffn, no ffn bn", v, false);
  return s;
}

Suite operator_oracle_checks(std::uint64_t seed) {
  Suite s;
  Rng rng = Rng::derive(seed, {303});
  const TF nonef;

  // Dense convolution on random shapes up to 2x4x9x9.
  double worst = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const auto B = 1 + static_cast<std::int64_t>(rng.below(2));
    const auto C = 1 + static_cast<std::int64_t>(rng.below(4));
    const auto H = 3 + static_cast<std::int64_t>(rng.below(7));
    const auto W = 3 + static_cast<std::int64_t>(rng.below(7));
    const auto Co = 1 + static_cast<std::int64_t>(rng.below(4));
    const auto k = 1 + 2 * static_cast<std::int64_t>(rng.below(2));
    const auto stride = 1 + static_cast<std::int64_t>(rng.below(2));
    const auto pad = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(k)));
    const TF x = random_tensor<float>({B, C, H, W}, rng, -1.0, 1.0);
    const TF w = random_tensor<float>({Co, C, k, k}, rng, -1.0, 1.0);
    const TF bias = random_tensor<float>({Co}, rng, -1.0, 1.0);
    const TF y = conv2d(x, w, bias, {.stride = {stride, stride}, .pad = {pad, pad}});
    const auto ref = oracle::conv2d(as_doubles(x), {B, C, H, W}, as_doubles(w), {Co, C, k, k}, as_doubles(bias),
                                    stride, stride, pad, pad, 1, nullptr);
    worst = std::max(worst, max_abs_diff(as_doubles(y), ref));
  }
  s.push_back(within("conv2d groups=1 vs 6-loop oracle (float32)", worst, 1e-6));
  {
    const TF x = random_tensor<float>({1, 2, 5, 5}, rng, -1.0, 1.0);
    const TF w = random_tensor<float>({4, 1, 3, 3}, rng, -1.0, 1.0);
    const TF y = conv2d(x, w, nonef, {.groups = 2});
    const auto ref = oracle::conv2d(as_doubles(x), {1, 2, 5, 5}, as_doubles(w), {4, 1, 3, 3}, {}, 1, 1, 0, 0, 2, nullptr);
    s.push_back(within("conv2d groups=2 vs oracle (float32)", max_abs_diff(as_doubles(y), ref), 1e-6));
  }
  {
    const TF x = random_tensor<float>({2, 3, 9, 8}, rng, -1.0, 1.0);
    const TF w = random_tensor<float>({3, 1, 1, 7}, rng, -1.0, 1.0);
    const TF y = conv2d(x, w, nonef, {.stride = {1, 2}, .pad = {0, 3}, .groups = 3});
    const auto ref = oracle::conv2d(as_doubles(x), {2, 3, 9, 8}, as_doubles(w), {3, 1, 1, 7}, {}, 1, 2, 0, 3, 3, nullptr);
    s.push_back(within("conv2d depthwise (1,7) stride (1,2) vs oracle", max_abs_diff(as_doubles(y), ref), 1e-6));
  }
  {
    const TF x = random_tensor<float>({1, 1, 6, 6}, rng);
    const TF y = maxpool2d(x, {.kernel = {3, 3}, .stride = {2, 2}, .pad = {1, 1}});
    const auto ref = oracle::maxpool2d(as_doubles(x), {1, 1, 6, 6}, 3, 2, 1, nullptr);
    s.push_back(exact("maxpool2d 3x3/2/1 vs brute-force windows", max_abs_diff(as_doubles(y), ref)));
  }
  {
    const TF x = random_tensor<float>({1, 8, 4}, rng);
    const TF y = maxpool1d_seq(x, 4, 4);
    s.push_back(exact("maxpool1d_seq k=4 vs group max", max_abs_diff(as_doubles(y), oracle::group_max(as_doubles(x), 1, 8, 4, 4))));
  }
  {
    const double g1 = gelu(TD({1}, 1.0)).item();
    s.push_back(within("gelu(1) vs series erf", std::abs(g1 - oracle::gelu(1.0)), 1e-12));
    s.push_back(within("gelu(1) = 0.841345", std::abs(oracle::gelu(1.0) - 0.841345), 5e-7));
  }
  {
    const TF x = random_tensor<float>({4, 7}, rng, -5.0, 5.0);
    const TF y = softmax(x, -1);
    double err = 0, neg = 0;
    for (std::int64_t r = 0; r < 4; ++r) {
      double total = 0, ztot = 0;
      for (std::int64_t c = 0; c < 7; ++c) ztot += std::exp(static_cast<double>(x.at({r, c})));
      for (std::int64_t c = 0; c < 7; ++c) {
        total += y.at({r, c});
        neg = std::min(neg, static_cast<double>(y.at({r, c})));
        err = std::max(err, std::abs(y.at({r, c}) - std::exp(static_cast<double>(x.at({r, c}))) / ztot));
      }
      err = std::max(err, std::abs(total - 1.0));
    }
    s.push_back(within("softmax rows sum to 1 and match float64", err - neg, 1e-6));
  }
  for (const bool train : {false, true}) {
    const std::int64_t B = 2, rows = 3, cols = 4, D = 4, k = 3;
    EncoderParams<float> p = make_encoder<float>(D, 1, k, {true, true}, rng);
    for (auto* t : {&p.dw_row, &p.dw_row_bias, &p.dw_col, &p.dw_col_bias, &p.bn_ffn.beta}) {
      for (auto& v : t->mutable_values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    for (auto& v : p.bn_ffn.gamma.mutable_values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (auto& v : p.bn_ffn.running_mean.mutable_values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (auto& v : p.bn_ffn.running_var.mutable_values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
    const auto mean0 = as_doubles(p.bn_ffn.running_mean), var0 = as_doubles(p.bn_ffn.running_var);
    const TF x = random_tensor<float>({B, rows * cols + 1, D}, rng, -1.0, 1.0);
    const TF y = iffn_patches(x, {rows, cols}, p, train ? Mode::kTrain : Mode::kEval);
    const auto ref = oracle::iffn(as_doubles(x), B, rows, cols, D, as_doubles(p.dw_row), as_doubles(p.dw_row_bias),
                                  as_doubles(p.dw_col), as_doubles(p.dw_col_bias), k, as_doubles(p.bn_ffn.gamma),
                                  as_doubles(p.bn_ffn.beta), mean0, var0, train);
    s.push_back(within(std::string("iffn vs conv/BN/GELU oracle (") + (train ? "train" : "eval") + ")",
                       max_abs_diff(as_doubles(y), ref), 1e-5));
  }
  {
    TF ramp({1, 3, 32, 32});
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 32; ++i)
        for (std::int64_t j = 0; j < 32; ++j) ramp.set({0, c, i, j}, static_cast<float>(j) / 31.0f);
    const TF y = resize_bilinear(ramp, {56, 56});
    double err = 0;
    for (std::int64_t c = 0; c < 3; ++c) {
      const auto all = as_doubles(ramp);
      const std::vector<double> plane(all.begin() + c * 1024, all.begin() + (c + 1) * 1024);
      const auto ref = oracle::bilinear(plane, 32, 32, 56, 56);
      for (std::int64_t i = 0; i < 56 * 56; ++i) err = std::max(err, std::abs(y.data()[c * 56 * 56 + i] - ref[static_cast<std::size_t>(i)]));
    }
    s.push_back(within("bilinear 32->56 ramp vs two-tap oracle", err, 1e-6));
  }
  return s;
}

namespace {

struct AttnCase {
  EncoderParams<float> p;
  TF x;
};

AttnCase attention_case(std::int64_t B, std::int64_t N, std::int64_t D, std::int64_t heads, Rng& rng) {
  AttnCase c{make_encoder<float>(D, heads, 3, {true, true}, rng), random_tensor<float>({B, N + 1, D}, rng, -1.0, 1.0)};
  for (auto* t : {&c.p.qkv, &c.p.attn_out.weight, &c.p.attn_out.bias}) {
    for (auto& v : t->mutable_values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  }
  return c;
}

}  // namespace

Suite attention_oracle_checks(std::uint64_t seed) {
  Suite s;
  Rng rng = Rng::derive(seed, {404});
  struct Shape5 {
    std::int64_t B, N, D, heads, M;
  };
  for (const auto& g : {Shape5{1, 4, 4, 1, 2}, Shape5{2, 6, 8, 2, 3}, Shape5{2, 8, 8, 2, 2}, Shape5{1, 12, 16, 4, 4}}) {
    AttnCase c = attention_case(g.B, g.N, g.D, g.heads, rng);
    const TF y = pmsa(c.x, c.p, {g.heads, g.M, true});
    const auto ref = oracle::pmsa(as_doubles(c.x), g.B, g.N, g.D, g.M, as_doubles(c.p.qkv),
                                  as_doubles(c.p.attn_out.weight), as_doubles(c.p.attn_out.bias), g.heads);
    char name[128];
    std::snprintf(name, sizeof name, "pmsa vs per-block oracle N=%lld M=%lld D=%lld h=%lld", static_cast<long long>(g.N),
                  static_cast<long long>(g.M), static_cast<long long>(g.D), static_cast<long long>(g.heads));
    s.push_back(within(name, max_abs_diff(as_doubles(y), ref), 1e-6));
  }
  for (const auto& g : {Shape5{2, 4, 8, 2, 4}, Shape5{1, 9, 8, 1, 9}}) {
    AttnCase c = attention_case(g.B, g.N, g.D, g.heads, rng);
    s.push_back(exact("pmsa with M=N equals global attention bitwise (N=" + std::to_string(g.N) + ")",
                      max_abs_diff(pmsa(c.x, c.p, {g.heads, g.N, true}), global_msa(c.x, c.p))));
  }
  return s;
}

Suite encoder_invariant_checks(std::uint64_t seed) {
  Suite s;
  Rng rng = Rng::derive(seed, {505});
  const std::int64_t B = 2, N = 8, D = 8, heads = 2, M = 2;
  const AttentionSpec spec{heads, M, true};
  {
    AttnCase c = attention_case(B, N, D, heads, rng);
    const TF y = iffn(c.x, {2, 4}, c.p, Mode::kTrain);
    s.push_back(exact("iffn passes the class token through bit-exactly",
                      max_abs_diff(slice(y, 1, 0, 1), slice(c.x, 1, 0, 1))));
    s.push_back(exact("iffn preserves the sequence shape", y.shape() == c.x.shape() ? 0.0 : 1.0));
  }
  {
    AttnCase c = attention_case(B, N, D, heads, rng);
    const TF base = pmsa(c.x, c.p, spec);
    double leak = 0, own = INFINITY;
    for (std::int64_t t = 0; t < N; ++t) {
      TF x2 = c.x.clone();
      for (std::int64_t e = 0; e < D; ++e) x2.set({0, 1 + t, e}, x2.at({0, 1 + t, e}) + 0.5f);
      const TF y = pmsa(x2, c.p, spec);
      const std::int64_t blk = t / M;
      double own_change = 0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t u = 0; u <= N; ++u) {
          double diff = 0;
          for (std::int64_t e = 0; e < D; ++e) diff = std::max(diff, static_cast<double>(std::abs(y.at({b, u, e}) - base.at({b, u, e}))));
          const bool allowed = b == 0 && (u == 0 || (u - 1) / M == blk);
          if (allowed && u != 0) own_change = std::max(own_change, diff);
          if (!allowed) leak = std::max(leak, diff);
        }
      own = std::min(own, own_change);
    }
    s.push_back(exact("pmsa locality: other blocks untouched", leak));
    s.push_back({"pmsa locality: own block responds", own > 0, own, 0});
  }
  {
    // A zero class token (no qkv bias) contributes a logit-0, value-0 slot
    // to every block's softmax and nothing else.
    AttnCase c = attention_case(1, N, D, heads, rng);
    for (std::int64_t e = 0; e < D; ++e) c.x.set({0, 0, e}, 0.0f);
    const TF appended = pmsa(c.x, c.p, spec);
    const TF patches_only = pmsa(c.x, c.p, {heads, M, false});
    const auto x = as_doubles(c.x);
    const auto wqkv = as_doubles(c.p.qkv), wout = as_doubles(c.p.attn_out.weight), bout = as_doubles(c.p.attn_out.bias);
    double err_null = 0, err_plain = 0;
    for (std::int64_t blk = 0; blk < N / M; ++blk) {
      std::vector<double> tokens(x.begin() + (1 + blk * M) * D, x.begin() + (1 + (blk + 1) * M) * D);
      const auto with_null = oracle::attention(tokens, M, D, wqkv, heads, true);
      const auto plain = oracle::attention(tokens, M, D, wqkv, heads, false);
      for (std::int64_t t = 0; t < M; ++t)
        for (std::int64_t j = 0; j < D; ++j) {
          double a = bout[static_cast<std::size_t>(j)], b = bout[static_cast<std::size_t>(j)];
          for (std::int64_t i = 0; i < D; ++i) {
            a += with_null[static_cast<std::size_t>(t * D + i)] * wout[static_cast<std::size_t>(i * D + j)];
            b += plain[static_cast<std::size_t>(t * D + i)] * wout[static_cast<std::size_t>(i * D + j)];
          }
          const std::int64_t u = 1 + blk * M + t;
          err_null = std::max(err_null, std::abs(appended.at({0, u, j}) - a));
          err_plain = std::max(err_plain, std::abs(patches_only.at({0, u, j}) - b));
        }
    }
    s.push_back(within("zero cls: block attention equals patch attention plus a null slot", err_null, 1e-6));
    s.push_back(within("append_cls=false: block attention equals patch-only attention", err_plain, 1e-6));
  }
  {
    AttnCase c = attention_case(B, N, D, heads, rng);
    const std::vector<std::int64_t> perm{2, 0, 3, 1};
    std::vector<TF> parts{slice(c.x, 1, 0, 1)};
    for (auto b : perm) parts.push_back(slice(c.x, 1, 1 + b * M, M));
    const TF xp = concat(parts, 1);
    const TF y = pmsa(c.x, c.p, spec), yp = pmsa(xp, c.p, spec);
    double patch_err = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      patch_err = std::max(patch_err, max_abs_diff(slice(yp, 1, 1 + static_cast<std::int64_t>(i) * M, M),
                                                   slice(y, 1, 1 + perm[i] * M, M)));
    }
    s.push_back(within("pmsa block permutation equivariance (patches)", patch_err, 1e-6));
    s.push_back(within("pmsa block permutation invariance (cls)", max_abs_diff(slice(yp, 1, 0, 1), slice(y, 1, 0, 1)), 1e-6));
  }
  return s;
}

Suite gradcheck_suite(std::uint64_t seed) {
  Suite s = gradcheck_primitives(seed);
  const Suite n = gradcheck_networks(seed);
  s.insert(s.end(), n.begin(), n.end());
  return s;
}

Suite selftest_suite(std::uint64_t seed) {
  Suite s = operator_oracle_checks(seed);
  for (const Suite& part : {attention_oracle_checks(seed), encoder_invariant_checks(seed)}) {
    s.insert(s.end(), part.begin(), part.end());
  }
  return s;
}

}  // namespace ecvit::verify
