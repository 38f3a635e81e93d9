#include "ecvit/model.hpp"

namespace ecvit {

template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> m;
  m.config = cfg;
  m.plan = plan_model(cfg);
  Rng rng = Rng::derive(seed, {0});
  m.tokenizer = make_tokenizer<T>(cfg, m.plan, rng);
  const FfnSpec ffn{cfg.ffn_factorized, cfg.use_bn_ffn};
  const auto& s2 = m.plan.stages[0];
  const auto& s3 = m.plan.stages[1];
  for (std::int64_t i = 0; i < s2.depth; ++i) {
    m.stage2.push_back(make_encoder<T>(s2.dim, s2.heads, cfg.ffn_kernel, ffn, rng));
  }
  m.merge = make_linear<T>(s2.dim, s3.dim, true, rng);
  for (std::int64_t i = 0; i < s3.depth; ++i) {
    m.stage3.push_back(make_encoder<T>(s3.dim, s3.heads, cfg.ffn_kernel, ffn, rng));
  }
  m.head_ln = make_layernorm<T>(s3.dim);
  m.head = make_linear<T>(s3.dim, cfg.num_classes, true, rng);
  return m;
}

namespace {

template <typename T>
void collect(const ModelParams<T>& m, Named<T>& params, Named<T>& buffers) {
  tokenizer_named(m.tokenizer, params, buffers);
  for (std::size_t i = 0; i < m.stage2.size(); ++i) {
    encoder_named(m.stage2[i], "stage2." + std::to_string(i), params, buffers);
  }
  add_named(params, "merge", m.merge);
  for (std::size_t i = 0; i < m.stage3.size(); ++i) {
    encoder_named(m.stage3[i], "stage3." + std::to_string(i), params, buffers);
  }
  add_named(params, "head.ln", m.head_ln);
  add_named(params, "head.fc", m.head);
}

}  // namespace

template <typename T>
Named<T> named_parameters(const ModelParams<T>& m) {
  Named<T> p, b;
  collect(m, p, b);
  return p;
}

template <typename T>
Named<T> named_buffers(const ModelParams<T>& m) {
  Named<T> p, b;
  collect(m, p, b);
  return b;
}

template <typename T>
std::int64_t count_parameters(const ModelParams<T>& m) {
  std::int64_t n = 0;
  for (const auto& [name, t] : named_parameters(m)) n += t.numel();
  return n;
}

AttentionSpec attention_spec(const ModelConfig& cfg, const StagePlan& stage) {
  return {stage.heads, stage.block, cfg.append_cls};
}

template <typename T>
TokenSequence<T> merge_tokens(const TokenSequence<T>& x, std::int64_t merge_k, const LinearParams<T>& proj) {
  const auto N = x.patches();
  std::int64_t side = 1;
  while (side * side < merge_k) ++side;
  if (side * side != merge_k || x.grid.rows % side != 0 || x.grid.cols % side != 0) {
    throw ConfigError("merge: merge_k " + std::to_string(merge_k) + " does not tile grid " +
                      std::to_string(x.grid.rows) + "x" + std::to_string(x.grid.cols));
  }
  Tensor<T> pooled = maxpool1d_seq(slice(x.tokens, 1, 1, N), merge_k, merge_k);
  Tensor<T> seq = concat<T>({slice(x.tokens, 1, 0, 1), pooled}, 1);
  return {apply(proj, seq), Grid{x.grid.rows / side, x.grid.cols / side}};
}

template <typename T>
Tensor<T> forward(ModelParams<T>& m, const Tensor<T>& images, Mode mode, ForwardTrace* trace) {
  const auto& cfg = m.config;
  auto note = [&](const char* what, const TokenSequence<T>& s) {
    if (!trace) return;
    trace->shapes.emplace_back(what, s.tokens.shape());
    trace->grids.push_back(s.grid);
  };
  TokenSequence<T> x = tokenize(cfg, m.tokenizer, images, mode);
  note("tokens", x);
  const auto spec2 = attention_spec(cfg, m.plan.stages[0]);
  for (auto& enc : m.stage2) x = encode(x, enc, spec2, mode);
  note("stage2", x);
  if (cfg.use_merging) {
    x = merge_tokens(x, cfg.merge_k, m.merge);
  } else {
    x = {apply(m.merge, x.tokens), x.grid};
  }
  note("merge", x);
  const auto spec3 = attention_spec(cfg, m.plan.stages[1]);
  for (auto& enc : m.stage3) x = encode(x, enc, spec3, mode);
  note("stage3", x);
  const auto B = x.tokens.dim(0), D = x.dim();
  Tensor<T> cls = reshape(slice(x.tokens, 1, 0, 1), {B, D});
  Tensor<T> logits = apply(m.head, apply(m.head_ln, cls));
  if (trace) trace->shapes.emplace_back("logits", logits.shape());
  return logits;
}

#define ECVIT_INSTANTIATE_MODEL(T)                                                                   \
  template ModelParams<T> build_model<T>(const ModelConfig&, std::uint64_t);                         \
  template Named<T> named_parameters(const ModelParams<T>&);                                         \
  template Named<T> named_buffers(const ModelParams<T>&);                                            \
  template std::int64_t count_parameters(const ModelParams<T>&);                                     \
  template TokenSequence<T> merge_tokens(const TokenSequence<T>&, std::int64_t, const LinearParams<T>&); \
  template Tensor<T> forward(ModelParams<T>&, const Tensor<T>&, Mode, ForwardTrace*);

ECVIT_INSTANTIATE_MODEL(float)
ECVIT_INSTANTIATE_MODEL(double)

}  // namespace ecvit
