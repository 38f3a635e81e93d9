#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "ecvit/costs.hpp"
#include "ecvit/error.hpp"
#include "ecvit/parallel.hpp"
#include "ecvit/train.hpp"
#include "ecvit/verify/suites.hpp"

using namespace ecvit;

namespace {

ModelConfig resolve_config(const std::string& path, const std::string& preset) {
  if (!path.empty()) return load_config_file(path);
  return preset_config(preset.empty() ? "default" : preset);
}

void print_line(const std::string& s) { std::cout << s << std::endl; }

int cmd_train(const std::string& config_path, const std::string& preset, const std::string& data_dir,
              TrainOptions opts, std::int64_t train_subset, std::int64_t val_subset) {
  opts.config = resolve_config(config_path, preset);
  opts.log = print_line;
  const TrainResult r = train_from_dir(opts, data_dir, train_subset, val_subset);
  if (!r.history.empty()) {
    const auto& last = r.history.back();
    std::printf("done: %lld steps, epoch %lld val_acc %.4f val_loss %.4f\n", static_cast<long long>(r.steps),
                static_cast<long long>(last.epoch), last.val_acc, last.val_loss);
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, std::int64_t batch,
             std::optional<std::int64_t> partition_size, const std::string& config_path, const std::string& dump) {
  const Checkpoint c = load_checkpoint(ckpt_path);
  ModelParams<float> model = model_from_checkpoint(c);
  const ModelConfig& cfg = model.config;
  ModelConfig requested = config_path.empty() ? cfg : load_config_file(config_path);
  if (partition_size) requested.partition_size = *partition_size;
  require_matching_config(cfg, requested);
  const Dataset data = load_cifar(data_dir, variant_for(cfg), Split::kTest);
  if (data.num_classes != cfg.num_classes) {
    throw ConfigError("model has " + std::to_string(cfg.num_classes) + " classes, dataset has " +
                      std::to_string(data.num_classes));
  }
  const EvalResult r = evaluate(model, data, batch);
  std::printf("images %lld  correct %lld  accuracy %.4f  loss %.6f\n", static_cast<long long>(r.count),
              static_cast<long long>(r.correct), r.accuracy, r.loss);
  if (!dump.empty()) {
    std::ofstream out(dump);
    if (!out) throw Error("cannot write " + dump);
    out << "index,label";
    for (std::int64_t k = 0; k < r.classes; ++k) out << ",logit" << k;
    out << '\n';
    char buf[32];
    for (std::int64_t i = 0; i < r.count; ++i) {
      out << i << ',' << r.labels[static_cast<std::size_t>(i)];
      for (std::int64_t k = 0; k < r.classes; ++k) {
        std::snprintf(buf, sizeof buf, ",%.9g", r.logits[static_cast<std::size_t>(i * r.classes + k)]);
        out << buf;
      }
      out << '\n';
    }
  }
  return 0;
}

int cmd_count(const std::string& config_path, const std::string& preset) {
  const ModelConfig cfg = resolve_config(config_path, preset);
  const CostReport r = count_costs(cfg);
  std::cout << format_cost_table(r) << "\n" << cost_json(cfg, r) << std::endl;
  return 0;
}

int run_suite(const verify::Suite& s) {
  std::cout << verify::format_suite(s);
  std::int64_t failed = 0;
  for (const auto& c : s) failed += c.pass ? 0 : 1;
  std::printf("%zu checks, %lld failed\n", s.size(), static_cast<long long>(failed));
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer training, cost counting and verification"};
  app.require_subcommand(1);

  std::string config_path, preset, data_dir, ckpt, dump;
  TrainOptions topts;
  std::int64_t train_subset = 0, val_subset = 0;
  bool no_warmup = false, no_augment = false;
  std::string out_dir, resume;

  auto* train = app.add_subcommand("train", "train a model on CIFAR binaries");
  train->add_option("--config", config_path, "model config file (key = value)");
  train->add_option("--preset", preset, "built-in config: default, tiny, micro");
  train->add_option("--data-dir", data_dir, "directory with CIFAR binary batches")->required();
  train->add_option("--out-dir", out_dir, "where metrics.csv and checkpoints go")->required();
  train->add_option("--epochs", topts.epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch", topts.batch)->check(CLI::PositiveNumber);
  train->add_option("--lr", topts.lr);
  train->add_option("--wd", topts.weight_decay);
  train->add_option("--seed", topts.seed);
  train->add_flag("--no-warmup", no_warmup);
  train->add_flag("--no-augment", no_augment);
  train->add_option("--overfit", topts.overfit, "train and validate on the first N images");
  train->add_option("--train-subset", train_subset, "use the first N training images");
  train->add_option("--val-subset", val_subset, "use the first N test images");
  train->add_option("--clip-grad", topts.clip_grad, "global gradient norm limit (0 = off)");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--stop-after", topts.stop_after, "exit after this many completed epochs");

  std::int64_t eval_batch = 64;
  std::optional<std::int64_t> partition_size;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data-dir", data_dir)->required();
  eval->add_option("--batch", eval_batch)->check(CLI::PositiveNumber);
  eval->add_option("--partition-size", partition_size, "expected partition size; must match the checkpoint");
  eval->add_option("--config", config_path, "expected config; must match the checkpoint");
  eval->add_option("--dump-logits", dump, "write per-image logits as CSV");

  auto* count = app.add_subcommand("count", "parameter and MAC counts");
  count->add_option("--config", config_path);
  count->add_option("--preset", preset);

  std::uint64_t seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "float64 finite-difference gradient checks");
  gradcheck->add_option("--seed", seed);
  auto* selftest = app.add_subcommand("selftest", "oracle equivalence and invariant checks");
  selftest->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      topts.warmup = !no_warmup;
      topts.augment = !no_augment;
      topts.out_dir = out_dir;
      topts.resume = resume;
      return cmd_train(config_path, preset, data_dir, topts, train_subset, val_subset);
    }
    if (*eval) return cmd_eval(ckpt, data_dir, eval_batch, partition_size, config_path, dump);
    if (*count) return cmd_count(config_path, preset);
    if (*gradcheck) return run_suite(verify::gradcheck_suite(seed));
    if (*selftest) return run_suite(verify::selftest_suite(seed));
  } catch (const TrainingDiverged& e) {
    std::cerr << "diverged at step " << e.step() << ": " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
