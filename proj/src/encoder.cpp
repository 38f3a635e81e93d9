#include "ecvit/encoder.hpp"

#include <cmath>

namespace ecvit {

template <typename T>
EncoderParams<T> make_encoder(std::int64_t dim, std::int64_t heads, std::int64_t kernel,
                              const FfnSpec& ffn, Rng& rng) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("encoder: dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  EncoderParams<T> p;
  p.heads = heads;
  p.ln1 = make_layernorm<T>(dim);
  p.qkv = normal_param<T>({dim, 3 * dim}, rng);
  p.attn_out = make_linear<T>(dim, dim, true, rng);
  p.ln2 = make_layernorm<T>(dim);
  if (ffn.factorized) {
    p.dw_row = normal_param<T>({dim, 1, kernel, 1}, rng);
    p.dw_row_bias = const_param<T>({dim}, T(0));
    p.dw_col = normal_param<T>({dim, 1, 1, kernel}, rng);
    p.dw_col_bias = const_param<T>({dim}, T(0));
  } else {
    p.dw_row = normal_param<T>({dim, 1, kernel, kernel}, rng);
    p.dw_row_bias = const_param<T>({dim}, T(0));
  }
  if (ffn.use_bn) p.bn_ffn = make_batchnorm<T>(dim);
  return p;
}

template <typename T>
std::vector<Tensor<T>> partition(const Tensor<T>& x, std::int64_t block) {
  const auto N = x.dim(1) - 1;
  if (block < 1 || N % block != 0) {
    throw DivisibilityError("partition: patch count " + std::to_string(N) + " not divisible by " +
                            std::to_string(block));
  }
  const Tensor<T> cls = slice(x, 1, 0, 1);
  std::vector<Tensor<T>> out;
  for (std::int64_t s = 1; s <= N; s += block) out.push_back(concat<T>({cls, slice(x, 1, s, block)}, 1));
  return out;
}

namespace {

// Scaled dot-product attention on q, k, v of shape [..., L, hd].
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(q.dim(-1)));
  Tensor<T> scores = scale(matmul(q, transpose(k, -1, -2)), scale_factor);
  return matmul(softmax(scores, -1), v);
}

// qkv[..., L, 3D] -> q, k, v each [..., heads, L, hd].
template <typename T>
std::vector<Tensor<T>> split_heads(const Tensor<T>& qkv, std::int64_t heads) {
  Shape lead(qkv.shape().begin(), qkv.shape().end() - 1);
  const auto L = lead.back();
  const auto D = qkv.dim(-1) / 3;
  Shape s = lead;
  s.insert(s.end(), {3, heads, D / heads});
  const auto r = static_cast<std::int64_t>(lead.size());  // rank of leading dims incl. L
  // [..., L, 3, h, hd] -> [3, ..., h, L, hd]
  std::vector<std::int64_t> perm{r};
  for (std::int64_t i = 0; i < r - 1; ++i) perm.push_back(i);
  perm.push_back(r + 1);
  perm.push_back(r - 1);
  perm.push_back(r + 2);
  Tensor<T> t = permute(reshape(qkv, s), perm);
  Shape each(lead.begin(), lead.end() - 1);
  each.insert(each.end(), {heads, L, D / heads});
  std::vector<Tensor<T>> out;
  for (auto& part : split(t, 0, {1, 1, 1})) out.push_back(reshape(part, each));
  return out;
}

// [..., h, L, hd] -> [..., L, D]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& o) {
  const auto r = o.rank();
  std::vector<std::int64_t> perm;
  for (std::int64_t i = 0; i < r - 3; ++i) perm.push_back(i);
  perm.insert(perm.end(), {r - 2, r - 3, r - 1});
  Shape s(o.shape().begin(), o.shape().end() - 3);
  s.insert(s.end(), {o.dim(-2), o.dim(-3) * o.dim(-1)});
  return reshape(permute(o, perm), s);
}

}  // namespace

template <typename T>
Tensor<T> global_msa(const Tensor<T>& x, const EncoderParams<T>& p) {
  const Tensor<T> none;
  auto qkv = split_heads(linear(x, p.qkv, none), p.heads);
  return apply(p.attn_out, merge_heads(attend(qkv[0], qkv[1], qkv[2])));
}

template <typename T>
Tensor<T> pmsa(const Tensor<T>& x, const EncoderParams<T>& p, const AttentionSpec& spec) {
  const auto B = x.dim(0), N = x.dim(1) - 1, D = x.dim(2);
  const auto M = spec.block;
  if (M < 1 || N % M != 0) {
    throw DivisibilityError("pmsa: patch count " + std::to_string(N) + " not divisible by " +
                            std::to_string(M));
  }
  const auto nb = N / M;
  const Tensor<T> none;
  const Tensor<T> qkv = linear(x, p.qkv, none);  // [B, N+1, 3D]
  const Tensor<T> cls_qkv = slice(qkv, 1, 0, 1);
  const Tensor<T> patch_qkv = reshape(slice(qkv, 1, 1, N), {B, nb, M, 3 * D});
  Tensor<T> merged;
  if (spec.append_cls) {
    Tensor<T> cls_b = broadcast_to(reshape(cls_qkv, {B, 1, 1, 3 * D}), {B, nb, 1, 3 * D});
    auto h = split_heads(concat<T>({cls_b, patch_qkv}, 2), p.heads);
    Tensor<T> o = merge_heads(attend(h[0], h[1], h[2]));  // [B, nb, M+1, D]
    Tensor<T> cls_out = mean(slice(o, 2, 0, 1), 1);       // [B, 1, D]
    Tensor<T> patch_out = reshape(slice(o, 2, 1, M), {B, N, D});
    merged = concat<T>({cls_out, patch_out}, 1);
  } else {
    // Blocks hold patches only; the class token attends once over everything.
    auto h = split_heads(patch_qkv, p.heads);
    Tensor<T> patch_out = reshape(merge_heads(attend(h[0], h[1], h[2])), {B, N, D});
    auto all = split_heads(qkv, p.heads);     // [B, h, N+1, hd]
    auto qc = split_heads(cls_qkv, p.heads);  // [B, h, 1, hd]
    Tensor<T> cls_out = merge_heads(attend(qc[0], all[1], all[2]));
    merged = concat<T>({cls_out, patch_out}, 1);
  }
  return apply(p.attn_out, merged);
}

template <typename T>
Tensor<T> iffn_patches(const Tensor<T>& x, const Grid& grid, EncoderParams<T>& p, Mode mode) {
  const auto B = x.dim(0), N = x.dim(1) - 1, D = x.dim(2);
  if (grid.count() != N) {
    throw ContractError("iffn: grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                        " does not hold " + std::to_string(N) + " patch tokens");
  }
  Tensor<T> f = reshape(permute(slice(x, 1, 1, N), {0, 2, 1}), {B, D, grid.rows, grid.cols});
  const auto kh = p.dw_row.dim(2), kw = p.dw_row.dim(3);
  f = conv2d(f, p.dw_row, p.dw_row_bias, {.pad = {(kh - 1) / 2, (kw - 1) / 2}, .groups = D});
  if (p.dw_col.defined()) {
    const auto k = p.dw_col.dim(3);
    f = conv2d(f, p.dw_col, p.dw_col_bias, {.pad = {0, (k - 1) / 2}, .groups = D});
  }
  if (p.bn_ffn.gamma.defined()) f = apply(p.bn_ffn, f, mode);
  f = gelu(f);
  return permute(reshape(f, {B, D, N}), {0, 2, 1});
}

template <typename T>
Tensor<T> iffn(const Tensor<T>& x, const Grid& grid, EncoderParams<T>& p, Mode mode) {
  return concat<T>({slice(x, 1, 0, 1), iffn_patches(x, grid, p, mode)}, 1);
}

template <typename T>
TokenSequence<T> encode(const TokenSequence<T>& x, EncoderParams<T>& p, const AttentionSpec& spec,
                        Mode mode) {
  const auto N = x.patches();
  Tensor<T> y = add(x.tokens, pmsa(apply(p.ln1, x.tokens), p, spec));
  Tensor<T> f = iffn_patches(apply(p.ln2, y), x.grid, p, mode);
  Tensor<T> z = concat<T>({slice(y, 1, 0, 1), add(slice(y, 1, 1, N), f)}, 1);
  return {z, x.grid};
}

template <typename T>
void encoder_named(const EncoderParams<T>& p, const std::string& prefix, Named<T>& params,
                   Named<T>& buffers) {
  add_named(params, prefix + ".ln1", p.ln1);
  params.emplace_back(prefix + ".qkv.weight", p.qkv);
  add_named(params, prefix + ".attn_out", p.attn_out);
  add_named(params, prefix + ".ln2", p.ln2);
  params.emplace_back(prefix + ".dw_row.weight", p.dw_row);
  params.emplace_back(prefix + ".dw_row.bias", p.dw_row_bias);
  if (p.dw_col.defined()) {
    params.emplace_back(prefix + ".dw_col.weight", p.dw_col);
    params.emplace_back(prefix + ".dw_col.bias", p.dw_col_bias);
  }
  add_named(params, prefix + ".bn_ffn", p.bn_ffn);
  add_buffers(buffers, prefix + ".bn_ffn", p.bn_ffn);
}

#define ECVIT_INSTANTIATE_ENCODER(T)                                                                 \
  template EncoderParams<T> make_encoder<T>(std::int64_t, std::int64_t, std::int64_t, const FfnSpec&, \
                                            Rng&);                                                   \
  template std::vector<Tensor<T>> partition(const Tensor<T>&, std::int64_t);                         \
  template Tensor<T> pmsa(const Tensor<T>&, const EncoderParams<T>&, const AttentionSpec&);          \
  template Tensor<T> global_msa(const Tensor<T>&, const EncoderParams<T>&);                          \
  template Tensor<T> iffn_patches(const Tensor<T>&, const Grid&, EncoderParams<T>&, Mode);           \
  template Tensor<T> iffn(const Tensor<T>&, const Grid&, EncoderParams<T>&, Mode);                   \
  template TokenSequence<T> encode(const TokenSequence<T>&, EncoderParams<T>&, const AttentionSpec&, \
                                   Mode);                                                            \
  template void encoder_named(const EncoderParams<T>&, const std::string&, Named<T>&, Named<T>&);

ECVIT_INSTANTIATE_ENCODER(float)
ECVIT_INSTANTIATE_ENCODER(double)

}  // namespace ecvit
