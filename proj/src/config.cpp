#include "ecvit/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ecvit {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kGelu: return "gelu";
    case Activation::kRelu: return "relu";
    default: return "none";
  }
}

std::string_view to_string(TokenizerVariant v) {
  switch (v) {
    case TokenizerVariant::kFactorized7: return "factorized7";
    case TokenizerVariant::kFull7: return "full7";
    default: return "full5";
  }
}

namespace {

std::string str(std::int64_t v) { return std::to_string(v); }

// Output length of a strided window; the caller checks exactness.
std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct Downsample {
  const char* what;
  std::int64_t k, pad;
};

// Halves `in` and records a violation unless it is exact.
std::int64_t halve(std::int64_t in, const Downsample& d, const char* axis,
                   std::vector<std::string>& out) {
  if (in < 2 || in % 2 != 0) {
    out.push_back(std::string(d.what) + ": " + axis + " " + str(in) + " not divisible by 2");
    return std::max<std::int64_t>(in / 2, 1);
  }
  const auto o = window_out(in, d.k, 2, d.pad);
  if (o != in / 2) {
    out.push_back(std::string(d.what) + ": " + axis + " " + str(in) + " does not halve exactly");
  }
  return in / 2;
}

std::int64_t isqrt(std::int64_t v) {
  auto r = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(v))));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r;
}

struct Planned {
  ModelPlan plan;
  std::vector<std::string> violations;
};

Planned plan_and_check(const ModelConfig& c) {
  Planned p;
  auto& v = p.violations;
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
    return ok;
  };
  bool shape_ok = true;
  shape_ok &= require(c.input_hw.h > 0 && c.input_hw.w > 0,
                      "input_hw must be positive, got " + str(c.input_hw.h) + "x" + str(c.input_hw.w));
  require(c.in_channels >= 1, "in_channels must be at least 1");
  shape_ok &= require(c.d0 >= 2 && c.d0 % 2 == 0, "d0 must be even and at least 2, got " + str(c.d0));
  bool dims_ok = require(c.stage_dims[0] >= 1 && c.stage_dims[1] >= 1, "stage_dims must be positive");
  if (dims_ok) {
    require(c.stage_dims[0] <= c.stage_dims[1], "stage_dims must be nondecreasing, got " +
                                                    str(c.stage_dims[0]) + "," + str(c.stage_dims[1]));
  }
  require(c.depths[0] >= 0 && c.depths[1] >= 0, "depths must be non-negative");
  require(c.partition_size >= 0, "partition_size must be non-negative (0 means global)");
  require(c.ffn_kernel >= 1 && c.ffn_kernel % 2 == 1, "ffn_kernel must be odd, got " + str(c.ffn_kernel));
  require(c.merge_k >= 1, "merge_k must be at least 1");
  require(c.num_classes >= 2, "num_classes must be at least 2");
  const bool head_ok = require(c.head_dim >= 1, "head_dim must be at least 1");
  if (head_ok && dims_ok) {
    for (int s = 0; s < 2; ++s) {
      require(c.stage_dims[static_cast<std::size_t>(s)] % c.head_dim == 0,
              "stage " + str(s + 2) + " dim " + str(c.stage_dims[static_cast<std::size_t>(s)]) +
                  " not divisible by head_dim " + str(c.head_dim));
    }
  }
  if (!shape_ok) return p;

  auto& plan = p.plan;
  Hw hw = c.input_hw;
  if (c.tokenizer_variant == TokenizerVariant::kFactorized7) {
    const Downsample d{"tokenizer conv (7,1)", 7, 3};
    hw.h = halve(hw.h, d, "height", v);
    plan.after_stage1 = hw;
    const Downsample e{"tokenizer conv (1,7)", 7, 3};
    hw.w = halve(hw.w, e, "width", v);
  } else {
    const bool seven = c.tokenizer_variant == TokenizerVariant::kFull7;
    const Downsample d{seven ? "tokenizer conv 7x7" : "tokenizer conv 5x5", seven ? 7 : 5, seven ? 3 : 2};
    hw.h = halve(hw.h, d, "height", v);
    hw.w = halve(hw.w, d, "width", v);
    plan.after_stage1 = hw;
  }
  plan.after_stage2 = hw;
  if (c.use_maxpool_tok) {
    const Downsample d{"tokenizer maxpool 3x3", 3, 1};
    hw.h = halve(hw.h, d, "height", v);
    hw.w = halve(hw.w, d, "width", v);
  }
  plan.tokens = Grid{hw.h, hw.w};

  Grid grid = plan.tokens;
  for (int s = 0; s < 2; ++s) {
    auto& st = plan.stages[static_cast<std::size_t>(s)];
    const auto N = grid.count();
    st.grid = grid;
    st.dim = c.stage_dims[static_cast<std::size_t>(s)];
    st.heads = head_ok ? std::max<std::int64_t>(st.dim / c.head_dim, 1) : 1;
    st.depth = c.depths[static_cast<std::size_t>(s)];
    st.block = N;
    if (c.use_partition && c.partition_size > 0 && N >= c.partition_size) {
      st.block = c.partition_size;
      if (N % c.partition_size != 0) {
        v.push_back("stage " + str(s + 2) + ": patch count " + str(N) + " not divisible by " +
                    str(c.partition_size) + " (partition_size)");
        st.block = N;
      }
    }
    if (s == 0 && c.use_merging && c.merge_k >= 1) {
      if (N % c.merge_k != 0) {
        v.push_back("merge: patch count " + str(N) + " not divisible by merge_k " + str(c.merge_k));
        continue;
      }
      const auto side = isqrt(c.merge_k);
      if (side * side != c.merge_k) {
        v.push_back("merge: merge_k " + str(c.merge_k) + " is not a perfect square");
        continue;
      }
      if (grid.rows % side != 0 || grid.cols % side != 0) {
        v.push_back("merge: grid " + str(grid.rows) + "x" + str(grid.cols) + " not divisible by " +
                    str(side) + " in both axes");
        continue;
      }
      grid = Grid{grid.rows / side, grid.cols / side};
    }
  }
  return p;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_int(std::string_view s, std::int64_t& out) {
  s = trim(s);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty();
}

bool parse_pair(std::string_view s, std::int64_t& a, std::int64_t& b) {
  const auto comma = s.find(',');
  if (comma == std::string_view::npos) return false;
  return parse_int(s.substr(0, comma), a) && parse_int(s.substr(comma + 1), b);
}

bool parse_bool(std::string_view s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else return false;
  return true;
}

}  // namespace

std::vector<std::string> validate_config(const ModelConfig& cfg) { return plan_and_check(cfg).violations; }

void require_valid(const ModelConfig& cfg) {
  auto v = validate_config(cfg);
  if (!v.empty()) throw ConfigError(std::move(v));
}

ModelPlan plan_model(const ModelConfig& cfg) {
  auto p = plan_and_check(cfg);
  if (!p.violations.empty()) throw ConfigError(std::move(p.violations));
  return p.plan;
}

std::string serialize_config(const ModelConfig& c) {
  auto b = [](bool x) { return x ? "true" : "false"; };
  std::ostringstream os;
  os << "input_hw = " << c.input_hw.h << "," << c.input_hw.w << "\n"
     << "in_channels = " << c.in_channels << "\n"
     << "d0 = " << c.d0 << "\n"
     << "stage_dims = " << c.stage_dims[0] << "," << c.stage_dims[1] << "\n"
     << "depths = " << c.depths[0] << "," << c.depths[1] << "\n"
     << "partition_size = " << c.partition_size << "\n"
     << "ffn_kernel = " << c.ffn_kernel << "\n"
     << "merge_k = " << c.merge_k << "\n"
     << "num_classes = " << c.num_classes << "\n"
     << "head_dim = " << c.head_dim << "\n"
     << "use_partition = " << b(c.use_partition) << "\n"
     << "append_cls = " << b(c.append_cls) << "\n"
     << "use_merging = " << b(c.use_merging) << "\n"
     << "use_maxpool_tok = " << b(c.use_maxpool_tok) << "\n"
     << "use_bn_tok = " << b(c.use_bn_tok) << "\n"
     << "activation = " << to_string(c.activation) << "\n"
     << "tokenizer_variant = " << to_string(c.tokenizer_variant) << "\n"
     << "use_bn_ffn = " << b(c.use_bn_ffn) << "\n"
     << "ffn_factorized = " << b(c.ffn_factorized) << "\n";
  return os.str();
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig c;
  std::vector<std::string> errors;
  std::int64_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + str(line_no) + ": ";
    if (eq == std::string_view::npos) {
      errors.push_back(where + "expected 'key = value'");
      continue;
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view val = trim(line.substr(eq + 1));
    bool ok = true;
    if (key == "input_hw") ok = parse_pair(val, c.input_hw.h, c.input_hw.w);
    else if (key == "in_channels") ok = parse_int(val, c.in_channels);
    else if (key == "d0") ok = parse_int(val, c.d0);
    else if (key == "stage_dims") ok = parse_pair(val, c.stage_dims[0], c.stage_dims[1]);
    else if (key == "depths") ok = parse_pair(val, c.depths[0], c.depths[1]);
    else if (key == "partition_size") ok = parse_int(val, c.partition_size);
    else if (key == "ffn_kernel") ok = parse_int(val, c.ffn_kernel);
    else if (key == "merge_k") ok = parse_int(val, c.merge_k);
    else if (key == "num_classes") ok = parse_int(val, c.num_classes);
    else if (key == "head_dim") ok = parse_int(val, c.head_dim);
    else if (key == "use_partition") ok = parse_bool(val, c.use_partition);
    else if (key == "append_cls") ok = parse_bool(val, c.append_cls);
    else if (key == "use_merging") ok = parse_bool(val, c.use_merging);
    else if (key == "use_maxpool_tok") ok = parse_bool(val, c.use_maxpool_tok);
    else if (key == "use_bn_tok") ok = parse_bool(val, c.use_bn_tok);
    else if (key == "use_bn_ffn") ok = parse_bool(val, c.use_bn_ffn);
    else if (key == "ffn_factorized") ok = parse_bool(val, c.ffn_factorized);
    else if (key == "activation") {
      if (val == "gelu") c.activation = Activation::kGelu;
      else if (val == "relu") c.activation = Activation::kRelu;
      else if (val == "none") c.activation = Activation::kNone;
      else ok = false;
    } else if (key == "tokenizer_variant") {
      if (val == "factorized7") c.tokenizer_variant = TokenizerVariant::kFactorized7;
      else if (val == "full7") c.tokenizer_variant = TokenizerVariant::kFull7;
      else if (val == "full5") c.tokenizer_variant = TokenizerVariant::kFull5;
      else ok = false;
    } else {
      errors.push_back(where + "unknown key '" + key + "'");
      continue;
    }
    if (!ok) errors.push_back(where + "bad value '" + std::string(val) + "' for " + key);
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

ModelConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

ModelConfig preset_config(std::string_view name) {
  ModelConfig c;
  if (name == "default") return c;
  if (name == "micro") {
    c.input_hw = {8, 8};
    c.d0 = 4;
    c.stage_dims = {8, 8};
    c.depths = {1, 1};
    c.partition_size = 2;
    c.num_classes = 2;
    c.head_dim = 4;
    return c;
  }
  if (name == "tiny") {
    c.input_hw = {16, 16};
    c.stage_dims = {8, 8};
    c.depths = {1, 1};
    c.partition_size = 4;
    c.num_classes = 2;
    c.head_dim = 4;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (default, micro, tiny)");
}

}  // namespace ecvit
