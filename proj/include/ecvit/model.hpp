#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecvit/encoder.hpp"
#include "ecvit/tokenizer.hpp"

namespace ecvit {

template <typename T>
struct ModelParams {
  ModelConfig config;
  ModelPlan plan;
  TokenizerParams<T> tokenizer;
  std::vector<EncoderParams<T>> stage2;
  LinearParams<T> merge;  // D2 -> D3, applied to every token including cls
  std::vector<EncoderParams<T>> stage3;
  LayerNormParams<T> head_ln;
  LinearParams<T> head;
};

/// Allocates and initializes every parameter. Same (config, seed) gives
/// bit-identical values for float and double up to rounding of the draw.
template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Trainable tensors in a fixed order, with dotted names.
template <typename T>
Named<T> named_parameters(const ModelParams<T>& m);

/// BatchNorm running statistics.
template <typename T>
Named<T> named_buffers(const ModelParams<T>& m);

template <typename T>
std::int64_t count_parameters(const ModelParams<T>& m);

AttentionSpec attention_spec(const ModelConfig& cfg, const StagePlan& stage);

/// Token merging: non-overlapping max over groups of merge_k consecutive
/// patch tokens, cls re-attached, then `proj` on every token.
template <typename T>
TokenSequence<T> merge_tokens(const TokenSequence<T>& x, std::int64_t merge_k, const LinearParams<T>& proj);

/// Shapes seen at stage boundaries during forward.
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> shapes;
  std::vector<Grid> grids;
};

template <typename T>
Tensor<T> forward(ModelParams<T>& m, const Tensor<T>& images, Mode mode, ForwardTrace* trace = nullptr);

}  // namespace ecvit
