#include "ecvit/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace ecvit {

namespace {

constexpr const char* kParam = "param:";
constexpr const char* kBuffer = "buffer:";
constexpr const char* kMoment1 = "adam.m:";
constexpr const char* kMoment2 = "adam.v:";

void say(const TrainOptions& o, const std::string& s) {
  if (o.log) o.log(s);
}

std::vector<std::int64_t> gather_labels(const Dataset& d, std::span<const std::int64_t> idx) {
  std::vector<std::int64_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(d.labels[static_cast<std::size_t>(i)]);
  return out;
}

Checkpoint full_checkpoint(const TrainOptions& o, const ModelParams<float>& model, AdamW<float>& opt,
                           std::int64_t epoch, const std::vector<EpochMetrics>& history) {
  Checkpoint c = model_checkpoint(model);
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.records.push_back(Record::from_tensor(kMoment1 + params[i].first, opt.first_moments()[i]));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.records.push_back(Record::from_tensor(kMoment2 + params[i].first, opt.second_moments()[i]));
  }
  c.records.push_back(Record::from_ints("train.step", {opt.steps()}));
  c.records.push_back(Record::from_ints("train.epoch", {epoch}));
  // Data order and augmentation draw from streams derived from (seed, epoch,
  // step), so the seed is the whole generator state.
  c.records.push_back(Record::from_ints("train.rng", {static_cast<std::int64_t>(o.seed)}));
  c.records.push_back(Record::from_ints("train.schedule", {o.epochs, o.batch, o.warmup ? 1 : 0, o.overfit}));
  Record hyper;
  hyper.name = "train.hyper";
  hyper.type = RecordType::kFloat64;
  hyper.dims = {3};
  hyper.f64 = {o.lr, o.weight_decay, o.clip_grad};
  c.records.push_back(hyper);
  if (!history.empty()) {
    Record h;
    h.name = "train.history";
    h.type = RecordType::kFloat64;
    h.dims = {static_cast<std::int64_t>(history.size()), 7};
    for (const auto& m : history) {
      h.f64.insert(h.f64.end(), {static_cast<double>(m.epoch), m.lr, m.train_loss, m.train_acc, m.val_loss,
                                 m.val_acc, m.wall_seconds});
    }
    c.records.push_back(std::move(h));
  }
  return c;
}

void check_same(bool ok, const std::string& what) {
  if (!ok) {
    throw CheckpointError(CheckpointError::Kind::kConfigConflict,
                          "resume: " + what + " differs from the checkpoint's run");
  }
}

}  // namespace

CifarVariant variant_for(const ModelConfig& cfg) {
  return cfg.num_classes == 100 ? CifarVariant::kCifar100 : CifarVariant::kCifar10;
}

Checkpoint model_checkpoint(const ModelParams<float>& model) {
  Checkpoint c;
  c.config_text = serialize_config(model.config);
  for (const auto& [name, t] : named_parameters(model)) c.records.push_back(Record::from_tensor(kParam + name, t));
  for (const auto& [name, t] : named_buffers(model)) c.records.push_back(Record::from_tensor(kBuffer + name, t));
  return c;
}

ModelParams<float> model_from_checkpoint(const Checkpoint& c) {
  ModelConfig cfg;
  try {
    cfg = parse_config(c.config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::kConfigConflict,
                          std::string("checkpoint config does not parse: ") + e.what());
  }
  ModelParams<float> m = build_model<float>(cfg, 0);
  std::set<std::string> expected;
  for (auto [name, t] : named_parameters(m)) {
    copy_record(c.at(kParam + name), t);
    expected.insert(kParam + name);
  }
  for (auto [name, t] : named_buffers(m)) {
    copy_record(c.at(kBuffer + name), t);
    expected.insert(kBuffer + name);
  }
  for (const auto& r : c.records) {
    const bool model_entry = r.name.rfind(kParam, 0) == 0 || r.name.rfind(kBuffer, 0) == 0;
    if (model_entry && !expected.count(r.name)) {
      throw CheckpointError(CheckpointError::Kind::kNameMismatch,
                            "checkpoint entry '" + r.name + "' does not belong to its config");
    }
  }
  return m;
}

void require_matching_config(const ModelConfig& checkpoint_cfg, const ModelConfig& requested) {
  std::istringstream a(serialize_config(checkpoint_cfg)), b(serialize_config(requested));
  std::string la, lb, diff;
  while (std::getline(a, la) && std::getline(b, lb)) {
    if (la != lb) diff += "\n  checkpoint: " + la + "\n  requested:  " + lb;
  }
  if (!diff.empty()) {
    throw CheckpointError(CheckpointError::Kind::kConfigConflict, "config conflict with checkpoint:" + diff);
  }
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds\n";
  char line[256];
  for (const auto& m : history) {
    std::snprintf(line, sizeof line, "%lld,%.8g,%.6f,%.6f,%.6f,%.6f,%.3f\n", static_cast<long long>(m.epoch), m.lr,
                  m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.wall_seconds);
    out += line;
  }
  return out;
}

EvalResult evaluate(ModelParams<float>& model, const Dataset& data, std::int64_t batch) {
  if (data.num_classes != model.config.num_classes) {
    throw ConfigError("model has " + std::to_string(model.config.num_classes) + " classes but the dataset has " +
                      std::to_string(data.num_classes));
  }
  NoGradGuard no_grad;
  EvalResult r;
  r.classes = model.config.num_classes;
  r.count = data.size();
  double loss_sum = 0;
  const BatchIterator it(data.size(), batch, 0, false);
  for (const auto& idx : it.epoch(0)) {
    const Tensor<float> images = preprocess(data, idx, model.config.input_hw, false, 0);
    const auto labels = gather_labels(data, idx);
    const Tensor<float> logits = forward(model, images, Mode::kEval);
    loss_sum += static_cast<double>(cross_entropy(logits, labels).item()) * static_cast<double>(idx.size());
    const auto pred = argmax(logits, 1);
    for (std::size_t i = 0; i < idx.size(); ++i) r.correct += pred[i] == labels[i] ? 1 : 0;
    r.logits.insert(r.logits.end(), logits.values().begin(), logits.values().end());
    r.labels.insert(r.labels.end(), labels.begin(), labels.end());
  }
  r.loss = loss_sum / static_cast<double>(r.count);
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  return r;
}

TrainResult train(const TrainOptions& o, const Dataset& train_full, const Dataset& val_full) {
  require_valid(o.config);
  const bool overfit = o.overfit > 0;
  const Dataset train_set = overfit ? take_subset(train_full, o.overfit) : train_full;
  const Dataset& val_set = overfit ? train_set : val_full;
  const bool augment = o.augment && !overfit;
  if (train_set.num_classes != o.config.num_classes) {
    throw ConfigError("config has " + std::to_string(o.config.num_classes) + " classes but the dataset has " +
                      std::to_string(train_set.num_classes));
  }

  ModelParams<float> model = build_model<float>(o.config, o.seed);
  AdamW<float> opt(named_parameters(model), AdamWOptions{.weight_decay = o.weight_decay});
  const BatchIterator it(train_set.size(), o.batch, o.seed);
  const std::int64_t per_epoch = it.batches_per_epoch();
  const std::int64_t total_steps = o.epochs * per_epoch;
  const std::int64_t warmup = o.warmup ? default_warmup(total_steps) : 0;

  TrainResult result;
  std::int64_t start_epoch = 0;
  if (!o.resume.empty()) {
    const Checkpoint c = load_checkpoint(o.resume);
    check_same(c.config_text == serialize_config(o.config), "model config");
    const auto& sched = c.at("train.schedule").i64;
    check_same(sched == std::vector<std::int64_t>{o.epochs, o.batch, o.warmup ? 1 : 0, o.overfit}, "schedule");
    check_same(c.at("train.rng").i64.front() == static_cast<std::int64_t>(o.seed), "seed");
    const auto& hyper = c.at("train.hyper").f64;
    check_same(hyper == std::vector<double>{o.lr, o.weight_decay, o.clip_grad}, "optimizer settings");
    (void)model_from_checkpoint(c);  // rejects missing or foreign entries
    for (auto [name, t] : named_parameters(model)) copy_record(c.at(kParam + name), t);
    for (auto [name, t] : named_buffers(model)) copy_record(c.at(kBuffer + name), t);
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      copy_record(c.at(kMoment1 + params[i].first), opt.first_moments()[i]);
      copy_record(c.at(kMoment2 + params[i].first), opt.second_moments()[i]);
    }
    opt.set_steps(c.at("train.step").i64.front());
    start_epoch = c.at("train.epoch").i64.front();
    if (const auto* h = c.find("train.history")) {
      for (std::int64_t e = 0; e < h->dims[0]; ++e) {
        const double* v = h->f64.data() + e * 7;
        result.history.push_back({static_cast<std::int64_t>(v[0]), v[1], v[2], v[3], v[4], v[5], v[6]});
      }
    }
    say(o, "resumed from " + o.resume.string() + " at epoch " + std::to_string(start_epoch));
  }

  if (!o.out_dir.empty()) std::filesystem::create_directories(o.out_dir);
  double best_val = -1;
  for (const auto& m : result.history) best_val = std::max(best_val, m.val_acc);

  const std::int64_t end_epoch = o.stop_after > 0 ? std::min(o.epochs, start_epoch + o.stop_after) : o.epochs;
  for (std::int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0;
    std::int64_t correct = 0, seen = 0;
    double lr = 0;
    const auto batches = it.epoch(epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const std::int64_t step = opt.steps();
      lr = cosine_lr(step, total_steps, o.lr, warmup);
      const auto aug_seed = Rng::derive(o.seed, {static_cast<std::uint64_t>(epoch), b, 1}).next_u64();
      const Tensor<float> images = preprocess(train_set, idx, o.config.input_hw, augment, aug_seed);
      const auto labels = gather_labels(train_set, idx);
      const Tensor<float> logits = forward(model, images, Mode::kTrain);
      const Tensor<float> loss = cross_entropy(logits, labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingDiverged(step, "loss became " + std::to_string(lv) + " at step " + std::to_string(step) +
                                         "; last.ckpt holds the last completed epoch");
      }
      backward(loss);
      if (o.clip_grad > 0) clip_grad_norm(opt.params(), o.clip_grad);
      opt.step(lr);
      opt.zero_grad();
      result.step_losses.push_back(lv);
      loss_sum += lv * static_cast<double>(idx.size());
      const auto pred = argmax(logits, 1);
      for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
      seen += static_cast<std::int64_t>(idx.size());
    }
    const EvalResult val = evaluate(model, val_set, o.batch);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochMetrics m{epoch + 1, lr, loss_sum / static_cast<double>(seen),
                   static_cast<double>(correct) / static_cast<double>(seen), val.loss, val.accuracy, wall};
    result.history.push_back(m);
    char line[200];
    std::snprintf(line, sizeof line, "epoch %lld  lr %.3g  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f  %.1fs",
                  static_cast<long long>(m.epoch), m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc, wall);
    say(o, line);

    if (!o.out_dir.empty()) {
      std::ofstream(o.out_dir / "metrics.csv") << metrics_csv(result.history);
      const bool last_epoch = epoch + 1 == end_epoch;
      if (!overfit || last_epoch) {
        const Checkpoint c = full_checkpoint(o, model, opt, epoch + 1, result.history);
        save_checkpoint(c, o.out_dir / "last.ckpt");
        if (m.val_acc > best_val) save_checkpoint(c, o.out_dir / "best.ckpt");
      }
    }
    best_val = std::max(best_val, m.val_acc);
  }
  result.steps = opt.steps();
  return result;
}

TrainResult train_from_dir(const TrainOptions& opts, const std::filesystem::path& data_dir,
                           std::int64_t train_subset, std::int64_t val_subset) {
  const auto v = variant_for(opts.config);
  Dataset tr = load_cifar(data_dir, v, Split::kTrain);
  Dataset va = load_cifar(data_dir, v, Split::kTest);
  if (train_subset > 0) tr = take_subset(tr, train_subset);
  if (val_subset > 0) va = take_subset(va, val_subset);
  return train(opts, tr, va);
}

}  // namespace ecvit
