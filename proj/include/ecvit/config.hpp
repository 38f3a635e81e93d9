#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ecvit/ops.hpp"

namespace ecvit {

enum class Activation { kGelu, kRelu, kNone };
enum class TokenizerVariant { kFactorized7, kFull7, kFull5 };

std::string_view to_string(Activation a);
std::string_view to_string(TokenizerVariant v);

struct ModelConfig {
  Hw input_hw{56, 56};
  std::int64_t in_channels = 3;
  std::int64_t d0 = 32;
  std::array<std::int64_t, 2> stage_dims{224, 256};
  std::array<std::int64_t, 2> depths{8, 8};
  std::int64_t partition_size = 7;  // 0 selects global attention
  std::int64_t ffn_kernel = 3;
  std::int64_t merge_k = 4;
  std::int64_t num_classes = 10;
  std::int64_t head_dim = 32;
  bool use_partition = true;
  bool append_cls = true;
  bool use_merging = true;
  bool use_maxpool_tok = true;
  bool use_bn_tok = true;
  Activation activation = Activation::kGelu;
  TokenizerVariant tokenizer_variant = TokenizerVariant::kFactorized7;
  bool use_bn_ffn = true;
  bool ffn_factorized = true;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Spatial layout of the patch tokens; rows * cols == N.
struct Grid {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t count() const { return rows * cols; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

struct StagePlan {
  Grid grid;
  std::int64_t dim = 0;
  std::int64_t heads = 0;
  std::int64_t depth = 0;
  /// Tokens per attention block actually used. Equals N for global attention
  /// and whenever the stage has fewer than partition_size tokens.
  std::int64_t block = 0;
  std::int64_t blocks() const { return grid.count() / block; }
};

struct ModelPlan {
  Hw after_stage1;  // after the first tokenizer conv stage
  Hw after_stage2;  // after the second conv stage, before pooling
  Grid tokens;      // tokenizer output grid
  std::array<StagePlan, 2> stages;
};

/// Every violated constraint, or an empty list.
std::vector<std::string> validate_config(const ModelConfig& cfg);

/// Throws ConfigError listing every violation.
void require_valid(const ModelConfig& cfg);

/// Shapes and block sizes for a valid config.
ModelPlan plan_model(const ModelConfig& cfg);

/// Canonical `key = value` text, one line per field in declaration order.
std::string serialize_config(const ModelConfig& cfg);

/// Parses `key = value` lines; `#` starts a comment. Keys not given keep their
/// defaults. Unknown keys and malformed values are collected into one
/// ConfigError. Does not validate.
ModelConfig parse_config(std::string_view text);

ModelConfig load_config_file(const std::filesystem::path& path);

/// "default", "micro" or "tiny".
ModelConfig preset_config(std::string_view name);

}  // namespace ecvit
