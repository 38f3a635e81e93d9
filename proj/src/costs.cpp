#include "ecvit/costs.hpp"

#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace ecvit {

namespace {

class Ledger {
 public:
  explicit Ledger(CostReport& r) : r_(r) {}

  void add(const std::string& module, const std::string& layer, std::int64_t params, std::int64_t macs) {
    r_.breakdown.push_back({module, layer, params, macs});
    r_.params_by_module[module] += params;
    r_.macs_by_module[module] += macs;
    r_.params_total += params;
    r_.macs_total += macs;
  }

 private:
  CostReport& r_;
};

void encoder_costs(Ledger& l, const std::string& module, const std::string& name, const ModelConfig& cfg,
                   const StagePlan& st) {
  const auto D = st.dim, N = st.grid.count(), M = st.block, nb = N / M, k = cfg.ffn_kernel;
  const auto tokens = N + 1;
  l.add(module, name + ".ln1", 2 * D, 0);
  l.add(module, name + ".qkv", 3 * D * D, tokens * D * 3 * D);
  const auto attn = cfg.append_cls ? 2 * nb * (M + 1) * (M + 1) * D : 2 * nb * M * M * D + 2 * tokens * D;
  l.add(module, name + ".attention", 0, attn);
  l.add(module, name + ".attn_out", D * D + D, tokens * D * D);
  l.add(module, name + ".ln2", 2 * D, 0);
  if (cfg.ffn_factorized) {
    l.add(module, name + ".dw_row", D * k + D, D * k * N);
    l.add(module, name + ".dw_col", D * k + D, D * k * N);
  } else {
    l.add(module, name + ".dw", D * k * k + D, D * k * k * N);
  }
  if (cfg.use_bn_ffn) l.add(module, name + ".bn_ffn", 2 * D, 0);
}

}  // namespace

CostReport count_costs(const ModelConfig& cfg) {
  const ModelPlan plan = plan_model(cfg);
  CostReport r;
  Ledger l(r);
  const std::string tok = "tokenizer";
  const auto C = cfg.in_channels, d0 = cfg.d0, half = d0 / 2;
  const auto s1 = plan.after_stage1.h * plan.after_stage1.w;
  const auto s2 = plan.after_stage2.h * plan.after_stage2.w;
  if (cfg.tokenizer_variant == TokenizerVariant::kFactorized7) {
    l.add(tok, "dw_h", C * 7, C * 7 * s1);
    l.add(tok, "pw_h", half * C, half * C * s1);
    if (cfg.use_bn_tok) l.add(tok, "bn_h", 2 * half, 0);
    l.add(tok, "dw_v", half * 7, half * 7 * s2);
    l.add(tok, "pw_v", d0 * half, d0 * half * s2);
    if (cfg.use_bn_tok) l.add(tok, "bn_v", 2 * d0, 0);
  } else {
    const std::int64_t k = cfg.tokenizer_variant == TokenizerVariant::kFull7 ? 7 : 5;
    l.add(tok, "conv", d0 * C * k * k, d0 * C * k * k * s1);
    if (cfg.use_bn_tok) l.add(tok, "bn_h", 2 * d0, 0);
  }
  const auto D2 = cfg.stage_dims[0], D3 = cfg.stage_dims[1];
  const auto N = plan.tokens.count();
  l.add(tok, "proj", d0 * D2 + D2, N * d0 * D2);
  l.add(tok, "pos", N * D2, 0);
  l.add(tok, "cls", D2, 0);

  const auto& st2 = plan.stages[0];
  for (std::int64_t i = 0; i < st2.depth; ++i) encoder_costs(l, "stage2", std::to_string(i), cfg, st2);
  const auto merged_tokens = plan.stages[1].grid.count() + 1;
  l.add("merge", cfg.use_merging ? "proj" : "dim_proj", D2 * D3 + D3, merged_tokens * D2 * D3);
  const auto& st3 = plan.stages[1];
  for (std::int64_t i = 0; i < st3.depth; ++i) encoder_costs(l, "stage3", std::to_string(i), cfg, st3);
  l.add("head", "ln", 2 * D3, 0);
  l.add("head", "fc", D3 * cfg.num_classes + cfg.num_classes, D3 * cfg.num_classes);
  r.flops_total = 2 * r.macs_total;
  return r;
}

std::string format_cost_table(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "module" << std::setw(24) << "layer" << std::right << std::setw(14)
     << "params" << std::setw(16) << "MACs" << "\n";
  for (const auto& e : r.breakdown) {
    os << std::left << std::setw(12) << e.module << std::setw(24) << e.layer << std::right << std::setw(14)
       << e.params << std::setw(16) << e.macs << "\n";
  }
  os << "\n";
  for (const char* m : {"tokenizer", "stage2", "merge", "stage3", "head"}) {
    const auto p = r.params_by_module.count(m) ? r.params_by_module.at(m) : 0;
    const auto c = r.macs_by_module.count(m) ? r.macs_by_module.at(m) : 0;
    os << std::left << std::setw(36) << m << std::right << std::setw(14) << p << std::setw(16) << c << "\n";
  }
  os << std::left << std::setw(36) << "total" << std::right << std::setw(14) << r.params_total
     << std::setw(16) << r.macs_total << "\n";
  os << std::fixed << std::setprecision(3) << "params " << r.params_total / 1e6 << " M, MACs "
     << r.macs_total / 1e9 << " G, FLOPs (2*MACs) " << r.flops_total / 1e9 << " G\n";
  return os.str();
}

std::string cost_json(const ModelConfig& cfg, const CostReport& r) {
  nlohmann::ordered_json j;
  j["input_hw"] = {cfg.input_hw.h, cfg.input_hw.w};
  j["params_total"] = r.params_total;
  j["macs_total"] = r.macs_total;
  j["flops_total"] = r.flops_total;
  j["params_by_module"] = r.params_by_module;
  j["macs_by_module"] = r.macs_by_module;
  return j.dump(2);
}

}  // namespace ecvit
