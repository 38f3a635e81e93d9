#pragma once

#include "ecvit/layers.hpp"

namespace ecvit {

/// Convolutional stem. The factorized variant uses the dw/pw pairs and both
/// batchnorms; the full variants use `conv` and `bn_h` only. Unused members
/// stay undefined, and batchnorms stay undefined when use_bn_tok is off.
template <typename T>
struct TokenizerParams {
  Tensor<T> dw_h;  // [C, 1, 7, 1]
  Tensor<T> pw_h;  // [d0/2, C, 1, 1]
  BatchNormParams<T> bn_h;
  Tensor<T> dw_v;  // [d0/2, 1, 1, 7]
  Tensor<T> pw_v;  // [d0, d0/2, 1, 1]
  BatchNormParams<T> bn_v;
  Tensor<T> conv;  // [d0, C, k, k]
  LinearParams<T> proj;
  Tensor<T> pos;  // [N, D]
  Tensor<T> cls;  // [D]
};

template <typename T>
TokenizerParams<T> make_tokenizer(const ModelConfig& cfg, const ModelPlan& plan, Rng& rng);

/// Feature map after the conv stages and pooling, [B, d0, rows, cols].
template <typename T>
Tensor<T> tokenizer_features(const ModelConfig& cfg, TokenizerParams<T>& p, const Tensor<T>& images,
                             Mode mode);

/// Features flattened row-major, projected, offset by pos, with cls prepended.
template <typename T>
TokenSequence<T> tokenize(const ModelConfig& cfg, TokenizerParams<T>& p, const Tensor<T>& images,
                          Mode mode);

template <typename T>
void tokenizer_named(const TokenizerParams<T>& p, Named<T>& params, Named<T>& buffers);

}  // namespace ecvit
