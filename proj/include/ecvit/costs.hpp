#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ecvit/config.hpp"

namespace ecvit {

struct CostEntry {
  std::string module;  // tokenizer, stage2, merge, stage3, head
  std::string layer;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

/// Closed-form parameter and multiply-accumulate counts for one image.
/// Normalization, activations and pooling count zero MACs.
struct CostReport {
  std::int64_t params_total = 0;
  std::int64_t macs_total = 0;
  std::int64_t flops_total = 0;  // 2 * macs_total
  std::map<std::string, std::int64_t> params_by_module;
  std::map<std::string, std::int64_t> macs_by_module;
  std::vector<CostEntry> breakdown;
};

CostReport count_costs(const ModelConfig& cfg);

/// Aligned per-layer table followed by module and grand totals.
std::string format_cost_table(const CostReport& r);

/// Machine-readable summary (JSON object).
std::string cost_json(const ModelConfig& cfg, const CostReport& r);

}  // namespace ecvit
