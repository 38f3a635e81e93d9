#include "ecvit/tokenizer.hpp"

namespace ecvit {

template <typename T>
TokenizerParams<T> make_tokenizer(const ModelConfig& cfg, const ModelPlan& plan, Rng& rng) {
  TokenizerParams<T> p;
  const auto C = cfg.in_channels;
  const auto half = cfg.d0 / 2;
  if (cfg.tokenizer_variant == TokenizerVariant::kFactorized7) {
    p.dw_h = normal_param<T>({C, 1, 7, 1}, rng);
    p.pw_h = normal_param<T>({half, C, 1, 1}, rng);
    if (cfg.use_bn_tok) p.bn_h = make_batchnorm<T>(half);
    p.dw_v = normal_param<T>({half, 1, 1, 7}, rng);
    p.pw_v = normal_param<T>({cfg.d0, half, 1, 1}, rng);
    if (cfg.use_bn_tok) p.bn_v = make_batchnorm<T>(cfg.d0);
  } else {
    const std::int64_t k = cfg.tokenizer_variant == TokenizerVariant::kFull7 ? 7 : 5;
    p.conv = normal_param<T>({cfg.d0, C, k, k}, rng);
    if (cfg.use_bn_tok) p.bn_h = make_batchnorm<T>(cfg.d0);
  }
  const auto D = cfg.stage_dims[0];
  p.proj = make_linear<T>(cfg.d0, D, true, rng);
  p.pos = normal_param<T>({plan.tokens.count(), D}, rng);
  p.cls = const_param<T>({D}, T(0));
  return p;
}

template <typename T>
Tensor<T> tokenizer_features(const ModelConfig& cfg, TokenizerParams<T>& p, const Tensor<T>& images,
                             Mode mode) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels || images.dim(2) != cfg.input_hw.h ||
      images.dim(3) != cfg.input_hw.w) {
    throw ConfigError("tokenizer: images " + shape_str(images.shape()) + " do not match input [B, " +
                      std::to_string(cfg.in_channels) + ", " + std::to_string(cfg.input_hw.h) + ", " +
                      std::to_string(cfg.input_hw.w) + "]");
  }
  const Tensor<T> none;
  auto norm_act = [&](const Tensor<T>& x, BatchNormParams<T>& bn) {
    return activate(bn.gamma.defined() ? apply(bn, x, mode) : x, cfg.activation);
  };
  Tensor<T> x;
  if (cfg.tokenizer_variant == TokenizerVariant::kFactorized7) {
    const auto C = cfg.in_channels;
    x = conv2d(images, p.dw_h, none, {.stride = {2, 1}, .pad = {3, 0}, .groups = C});
    x = norm_act(conv2d(x, p.pw_h, none, {}), p.bn_h);
    x = conv2d(x, p.dw_v, none, {.stride = {1, 2}, .pad = {0, 3}, .groups = cfg.d0 / 2});
    x = norm_act(conv2d(x, p.pw_v, none, {}), p.bn_v);
  } else {
    const auto pad = (p.conv.dim(2) - 1) / 2;
    x = norm_act(conv2d(images, p.conv, none, {.stride = {2, 2}, .pad = {pad, pad}}), p.bn_h);
  }
  if (cfg.use_maxpool_tok) x = maxpool2d(x, {.kernel = {3, 3}, .stride = {2, 2}, .pad = {1, 1}});
  return x;
}

template <typename T>
TokenSequence<T> tokenize(const ModelConfig& cfg, TokenizerParams<T>& p, const Tensor<T>& images,
                          Mode mode) {
  Tensor<T> f = tokenizer_features(cfg, p, images, mode);
  const auto B = f.dim(0), C = f.dim(1);
  const Grid grid{f.dim(2), f.dim(3)};
  if (grid.count() != p.pos.dim(0)) {
    throw ConfigError("tokenizer: " + std::to_string(grid.count()) + " patches but pos has " +
                      std::to_string(p.pos.dim(0)) + " rows");
  }
  Tensor<T> tokens = permute(reshape(f, {B, C, grid.count()}), {0, 2, 1});
  tokens = add(apply(p.proj, tokens), p.pos);
  const auto D = tokens.dim(2);
  Tensor<T> cls = broadcast_to(reshape(p.cls, {1, 1, D}), {B, 1, D});
  return {concat<T>({cls, tokens}, 1), grid};
}

template <typename T>
void tokenizer_named(const TokenizerParams<T>& p, Named<T>& params, Named<T>& buffers) {
  const std::string pre = "tokenizer.";
  for (auto [name, t] : {std::pair{"dw_h", &p.dw_h}, std::pair{"pw_h", &p.pw_h}}) {
    if (t->defined()) params.emplace_back(pre + name, *t);
  }
  if (p.conv.defined()) params.emplace_back(pre + "conv", p.conv);
  add_named(params, pre + "bn_h", p.bn_h);
  add_buffers(buffers, pre + "bn_h", p.bn_h);
  for (auto [name, t] : {std::pair{"dw_v", &p.dw_v}, std::pair{"pw_v", &p.pw_v}}) {
    if (t->defined()) params.emplace_back(pre + name, *t);
  }
  add_named(params, pre + "bn_v", p.bn_v);
  add_buffers(buffers, pre + "bn_v", p.bn_v);
  add_named(params, pre + "proj", p.proj);
  params.emplace_back(pre + "pos", p.pos);
  params.emplace_back(pre + "cls", p.cls);
}

#define ECVIT_INSTANTIATE_TOKENIZER(T)                                                                 \
  template TokenizerParams<T> make_tokenizer<T>(const ModelConfig&, const ModelPlan&, Rng&);           \
  template Tensor<T> tokenizer_features(const ModelConfig&, TokenizerParams<T>&, const Tensor<T>&,    \
                                        Mode);                                                         \
  template TokenSequence<T> tokenize(const ModelConfig&, TokenizerParams<T>&, const Tensor<T>&, Mode); \
  template void tokenizer_named(const TokenizerParams<T>&, Named<T>&, Named<T>&);

ECVIT_INSTANTIATE_TOKENIZER(float)
ECVIT_INSTANTIATE_TOKENIZER(double)

}  // namespace ecvit
