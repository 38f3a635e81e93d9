#pragma once

#include "ecvit/layers.hpp"

namespace ecvit {

template <typename T>
struct EncoderParams {
  LayerNormParams<T> ln1;
  Tensor<T> qkv;  // [D, 3D], no bias
  LinearParams<T> attn_out;
  LayerNormParams<T> ln2;
  // Factorized I-FFN: dw_row [D,1,k,1] then dw_col [D,1,1,k]. Otherwise a
  // single dw_row of shape [D,1,k,k] and dw_col undefined.
  Tensor<T> dw_row, dw_row_bias;
  Tensor<T> dw_col, dw_col_bias;
  BatchNormParams<T> bn_ffn;  // undefined when use_bn_ffn is off
  std::int64_t heads = 1;
};

/// Attention layout of one stage.
struct AttentionSpec {
  std::int64_t heads = 1;
  std::int64_t block = 0;   // patch tokens per block; == N means one block
  bool append_cls = true;   // copy cls into every block
};

struct FfnSpec {
  bool factorized = true;
  bool use_bn = true;
};

template <typename T>
EncoderParams<T> make_encoder(std::int64_t dim, std::int64_t heads, std::int64_t kernel,
                              const FfnSpec& ffn, Rng& rng);

/// Splits the patch tokens of x[B, N+1, D] into N/M runs of M consecutive
/// tokens, each with the class token copied in front: N/M tensors [B, M+1, D].
template <typename T>
std::vector<Tensor<T>> partition(const Tensor<T>& x, std::int64_t block);

/// Partitioned multi-head attention with the per-block class outputs averaged
/// and the output projection applied. x is [B, N+1, D].
template <typename T>
Tensor<T> pmsa(const Tensor<T>& x, const EncoderParams<T>& p, const AttentionSpec& spec);

/// Plain multi-head attention over all N+1 tokens.
template <typename T>
Tensor<T> global_msa(const Tensor<T>& x, const EncoderParams<T>& p);

/// I-FFN on the patch tokens of x[B, N+1, D]: returns [B, N, D].
template <typename T>
Tensor<T> iffn_patches(const Tensor<T>& x, const Grid& grid, EncoderParams<T>& p, Mode mode);

/// I-FFN with the class token passed through unchanged in slot 0.
template <typename T>
Tensor<T> iffn(const Tensor<T>& x, const Grid& grid, EncoderParams<T>& p, Mode mode);

/// One encoder layer: y = x + pmsa(ln1(x)); patches of y += iffn(ln2(y)).
template <typename T>
TokenSequence<T> encode(const TokenSequence<T>& x, EncoderParams<T>& p, const AttentionSpec& spec,
                        Mode mode);

template <typename T>
void encoder_named(const EncoderParams<T>& p, const std::string& prefix, Named<T>& params,
                   Named<T>& buffers);

}  // namespace ecvit
