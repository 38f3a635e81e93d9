#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ecvit/checkpoint.hpp"
#include "ecvit/error.hpp"
#include "ecvit/optim.hpp"
#include "ecvit/parallel.hpp"
#include "ecvit/train.hpp"
#include "support.hpp"

using namespace ecvit;
namespace fs = std::filesystem;
using TD = Tensor<double>;

namespace {

ModelConfig tiny(std::int64_t classes = 2) {
  ModelConfig c = preset_config("tiny");
  c.num_classes = classes;
  return c;
}

TrainOptions quick_options(std::int64_t epochs, std::int64_t batch) {
  TrainOptions o;
  o.config = tiny();
  o.epochs = epochs;
  o.batch = batch;
  o.seed = 5;
  return o;
}

std::vector<std::uint8_t> encode_file(const Checkpoint& c) { return encode_checkpoint(c); }

// Byte offset of the first record's type tag.
std::size_t first_type_offset(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t cfg_len = 0, name_len = 0;
  std::memcpy(&cfg_len, bytes.data() + 8, 4);
  const std::size_t rec = 12 + cfg_len + 4;
  std::memcpy(&name_len, bytes.data() + rec, 4);
  return rec + 4 + name_len;
}

CheckpointError::Kind decode_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode accepted corrupted bytes";
  return CheckpointError::Kind::kIo;
}

Checkpoint param_records(const Checkpoint& c) {
  Checkpoint out;
  for (const auto& r : c.records) {
    if (r.name.rfind("param:", 0) == 0 || r.name.rfind("buffer:", 0) == 0 || r.name.rfind("adam.", 0) == 0) {
      out.records.push_back(r);
    }
  }
  return out;
}

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  TD p({1}, 0.5);
  p.set_requires_grad(true);
  AdamW<double> opt({{"w", p}}, {.weight_decay = 0.0});
  backward(sum(p));  // gradient 1
  opt.step(0.1);
  EXPECT_NEAR(p.item(), 0.5 - 0.1, 1e-9);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, ZeroGradientDecaysExactly) {
  TD p({3}, {1.0, -2.0, 0.25});
  p.set_requires_grad(true);
  AdamW<double> opt({{"w", p}}, {.weight_decay = 0.05});
  backward(sum(scale(p, 0.0)));
  opt.step(0.01);
  const double f = 1.0 - 0.01 * 0.05;
  EXPECT_DOUBLE_EQ(p.at({0}), 1.0 * f);
  EXPECT_DOUBLE_EQ(p.at({1}), -2.0 * f);
  EXPECT_DOUBLE_EQ(p.at({2}), 0.25 * f);
}

TEST(AdamW, NoDecayForNormsAndClassToken) {
  EXPECT_FALSE(decays("stage2.0.ln1.gamma"));
  EXPECT_FALSE(decays("tokenizer.bn_h.beta"));
  EXPECT_FALSE(decays("tokenizer.cls"));
  EXPECT_TRUE(decays("tokenizer.pos"));
  EXPECT_TRUE(decays("stage3.0.qkv"));
  TD g({1}, 2.0);
  g.set_requires_grad(true);
  AdamW<double> opt({{"head.ln.gamma", g}}, {.weight_decay = 0.5});
  backward(sum(scale(g, 0.0)));
  opt.step(0.1);
  EXPECT_EQ(g.item(), 2.0);
}

TEST(AdamW, MissingGradientNamesParameter) {
  TD a({1}, 1.0), b({1}, 1.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW<double> opt({{"first", a}, {"second.weight", b}}, {});
  backward(sum(a));
  try {
    opt.step(0.1);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("second.weight"), std::string::npos);
  }
}

TEST(AdamW, ZeroRateZeroDecayLeavesParametersBitIdentical) {
  auto m = build_model<float>(tiny(), 1);
  const auto before = named_parameters(m);
  std::vector<std::vector<float>> saved;
  for (const auto& [n, t] : before) saved.push_back(t.to_vector());
  AdamW<float> opt(named_parameters(m), {.weight_decay = 0.0});
  Rng rng(2);
  const std::vector<std::int64_t> labels{0, 1, 1};
  for (int s = 0; s < 5; ++s) {
    Tensor<float> img({3, 3, 16, 16});
    for (auto& v : img.mutable_values()) v = static_cast<float>(rng.uniform(-1, 1));
    backward(cross_entropy(forward(m, img, Mode::kTrain), labels));
    opt.step(0.0);
    opt.zero_grad();
  }
  for (std::size_t i = 0; i < saved.size(); ++i) EXPECT_EQ(before[i].second.to_vector(), saved[i]) << before[i].first;
}

TEST(Schedule, CosineEndpoints) {
  const std::int64_t total = 30 * 782;
  EXPECT_EQ(total, 23460);
  const auto warm = default_warmup(total);
  EXPECT_EQ(warm, 1173);
  EXPECT_DOUBLE_EQ(cosine_lr(warm, total, 0.01, warm), 0.01);
  EXPECT_DOUBLE_EQ(cosine_lr(total, total, 0.01, warm), 0.0);
  EXPECT_NEAR(cosine_lr(10 + 50, 110, 0.01, 10), 0.005, 1e-15);
  EXPECT_NEAR(cosine_lr(10 + 25, 110, 0.01, 10), 0.005 * (1 + std::sqrt(0.5)), 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(0, total, 0.01, 0), 0.01);
  EXPECT_NEAR(cosine_lr(total / 2, total, 0.01, 0), 0.005, 1e-15);
  EXPECT_GT(cosine_lr(0, total, 0.01, warm), 0.0);
  for (std::int64_t s = 1; s <= warm; ++s) {
    ASSERT_GT(cosine_lr(s, total, 0.01, warm), cosine_lr(s - 1, total, 0.01, warm));
  }
}

TEST(Schedule, ClipGradNorm) {
  TD a({2}, {3.0, 0.0}), b({1}, 4.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(add(sum(mul(a, a)), sum(mul(b, b))));  // grads (6, 0) and (8): norm 10
  const Named<double> ps{{"a", a}, {"b", b}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 5.0), 10.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 4.0);
}

TEST(Checkpoint, RoundTripByteIdentical) {
  auto m = build_model<float>(tiny(), 3);
  Checkpoint c = model_checkpoint(m);
  c.records.push_back(Record::from_ints("extra.ints", {1, -2, 3}));
  c.records.push_back(Record::from_tensor("extra.f64", TD({2, 2}, {1, 2, 3, 4})));
  const auto dir = fixtures::scratch_dir("ckpt_rt");
  save_checkpoint(c, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(fixtures::read_bytes(dir / "a.ckpt"), fixtures::read_bytes(dir / "b.ckpt"));
  EXPECT_EQ(back.config_text, c.config_text);
  EXPECT_EQ(back.at("extra.ints").i64, (std::vector<std::int64_t>{1, -2, 3}));
  const auto bytes = fixtures::read_bytes(dir / "a.ckpt");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ECVT");
  auto restored = model_from_checkpoint(back);
  const auto a = named_parameters(m), b = named_parameters(restored);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector());
}

TEST(Checkpoint, FaultsAreTyped) {
  const auto bytes = encode_file(model_checkpoint(build_model<float>(tiny(), 4)));
  using K = CheckpointError::Kind;
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(decode_kind(magic), K::kBadMagic);
  auto version = bytes;
  version[4] = 99;
  EXPECT_EQ(decode_kind(version), K::kVersionMismatch);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_EQ(decode_kind(truncated), K::kTruncated);
  EXPECT_EQ(decode_kind(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 6)), K::kTruncated);
  auto dtype = bytes;
  dtype[first_type_offset(bytes)] = 9;
  EXPECT_EQ(decode_kind(dtype), K::kBadDtype);
  try {
    load_checkpoint("/nonexistent/dir/x.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), K::kIo);
  }
}

TEST(Checkpoint, NameSetMustMatchConfig) {
  Checkpoint c = model_checkpoint(build_model<float>(tiny(), 5));
  Checkpoint missing = c;
  missing.records.erase(missing.records.begin());
  try {
    model_from_checkpoint(missing);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kNameMismatch);
  }
  Checkpoint extra = c;
  extra.records.push_back(Record::from_tensor("param:stage2.9.qkv", Tensor<float>({8, 24})));
  try {
    model_from_checkpoint(extra);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kNameMismatch);
  }
  Checkpoint other = c;
  ModelConfig cfg = tiny();
  cfg.use_bn_ffn = false;
  other.config_text = serialize_config(cfg);
  EXPECT_THROW(model_from_checkpoint(other), CheckpointError);
}

TEST(Checkpoint, PartitionSizeConflict) {
  const ModelConfig cfg = tiny();
  ModelConfig flag = cfg;
  flag.partition_size = 2;
  try {
    require_matching_config(cfg, flag);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kConfigConflict);
    EXPECT_NE(std::string(e.what()).find("partition_size"), std::string::npos);
  }
  EXPECT_NO_THROW(require_matching_config(cfg, cfg));
}

TEST(Evaluate, DeterministicAndBatchInvariant) {
  const Dataset d = fixtures::synthetic_dataset(70, 10, 6, true, Split::kTest);
  auto m = build_model<float>(tiny(10), 7);
  const EvalResult a = evaluate(m, d, 64);
  const EvalResult b = evaluate(m, d, 64);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.loss, b.loss);
  const EvalResult one = evaluate(m, d, 1);
  EXPECT_EQ(one.correct, a.correct);
  EXPECT_NEAR(one.loss, a.loss, 1e-5);
  std::int64_t recount = 0;
  for (std::int64_t i = 0; i < a.count; ++i) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < a.classes; ++k) {
      if (a.logits[static_cast<std::size_t>(i * a.classes + k)] > a.logits[static_cast<std::size_t>(i * a.classes + best)]) best = k;
    }
    recount += best == d.labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  EXPECT_EQ(recount, a.correct);
  EXPECT_DOUBLE_EQ(a.accuracy, static_cast<double>(recount) / 70.0);
}

TEST(Evaluate, FreshModelNearChance) {
  const Dataset d = fixtures::synthetic_dataset(1000, 10, 8, false, Split::kTest);
  auto m = build_model<float>(tiny(10), 9);
  const EvalResult r = evaluate(m, d, 250);
  EXPECT_GE(r.accuracy, 0.05);
  EXPECT_LE(r.accuracy, 0.15);
}

TEST(Evaluate, ClassCountMismatch) {
  const Dataset d = fixtures::synthetic_dataset(4, 10, 8, false);
  auto m = build_model<float>(tiny(2), 9);
  EXPECT_THROW(evaluate(m, d, 4), ConfigError);
  TrainOptions o = quick_options(1, 4);
  EXPECT_THROW(train(o, d, d), ConfigError);
}

TEST(Train, FixedSeedIsBitwiseReproducible) {
  set_worker_threads(1);
  const Dataset tr = fixtures::synthetic_dataset(48, 2, 10, true);
  const Dataset va = fixtures::synthetic_dataset(16, 2, 11, true, Split::kTest);
  const TrainOptions o = quick_options(2, 16);
  const TrainResult a = train(o, tr, va);
  const TrainResult b = train(o, tr, va);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.steps, 6);
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history[1].val_loss, b.history[1].val_loss);
  TrainOptions other = o;
  other.seed = 6;
  EXPECT_NE(train(other, tr, va).step_losses, a.step_losses);
  set_worker_threads(0);
}

TEST(Train, WritesMetricsAndCheckpoints) {
  const Dataset tr = fixtures::synthetic_dataset(32, 2, 12, true);
  TrainOptions o = quick_options(2, 16);
  o.out_dir = fixtures::scratch_dir("train_out");
  const TrainResult r = train(o, tr, tr);
  std::ifstream csv(o.out_dir / "metrics.csv");
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header, "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(fs::exists(o.out_dir / "last.ckpt"));
  EXPECT_TRUE(fs::exists(o.out_dir / "best.ckpt"));
  const Checkpoint c = load_checkpoint(o.out_dir / "last.ckpt");
  EXPECT_EQ(c.at("train.step").i64.front(), r.steps);
  EXPECT_EQ(c.at("train.epoch").i64.front(), 2);
  EXPECT_EQ(c.at("train.history").dims, (Shape{2, 7}));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  set_worker_threads(1);
  const Dataset tr = fixtures::synthetic_dataset(48, 2, 13, true);
  const Dataset va = fixtures::synthetic_dataset(16, 2, 14, true, Split::kTest);
  TrainOptions full = quick_options(3, 16);
  full.out_dir = fixtures::scratch_dir("resume_full");
  const TrainResult a = train(full, tr, va);

  TrainOptions part = full;
  part.out_dir = fixtures::scratch_dir("resume_part");
  part.stop_after = 1;
  const TrainResult first = train(part, tr, va);
  ASSERT_EQ(first.history.size(), 1u);
  TrainOptions rest = full;
  rest.out_dir = part.out_dir;
  rest.resume = part.out_dir / "last.ckpt";
  const TrainResult b = train(rest, tr, va);

  std::vector<double> joined = first.step_losses;
  joined.insert(joined.end(), b.step_losses.begin(), b.step_losses.end());
  EXPECT_EQ(joined, a.step_losses);
  ASSERT_EQ(b.history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(b.history[e].train_loss, a.history[e].train_loss);
    EXPECT_EQ(b.history[e].val_loss, a.history[e].val_loss);
    EXPECT_EQ(b.history[e].val_acc, a.history[e].val_acc);
    EXPECT_EQ(b.history[e].lr, a.history[e].lr);
  }
  const auto pa = encode_checkpoint(param_records(load_checkpoint(full.out_dir / "last.ckpt")));
  const auto pb = encode_checkpoint(param_records(load_checkpoint(rest.out_dir / "last.ckpt")));
  EXPECT_EQ(pa, pb);

  TrainOptions wrong = rest;
  wrong.lr = 0.02;
  try {
    train(wrong, tr, va);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kConfigConflict);
  }
  set_worker_threads(0);
}

TEST(Train, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  const Dataset tr = fixtures::synthetic_dataset(32, 2, 15, true);
  TrainOptions o = quick_options(3, 16);
  o.out_dir = fixtures::scratch_dir("diverge");
  o.stop_after = 1;
  train(o, tr, tr);
  const auto good = fixtures::read_bytes(o.out_dir / "last.ckpt");

  Checkpoint c = load_checkpoint(o.out_dir / "last.ckpt");
  for (auto& r : c.records) {
    if (r.name == "param:head.fc.weight") r.f32[0] = std::nanf("");
  }
  save_checkpoint(c, o.out_dir / "poisoned.ckpt");
  TrainOptions resume = o;
  resume.stop_after = 0;
  resume.resume = o.out_dir / "poisoned.ckpt";
  try {
    train(resume, tr, tr);
    FAIL();
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step(), 2);
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
  }
  EXPECT_EQ(fixtures::read_bytes(o.out_dir / "last.ckpt"), good);
}

TEST(Train, FiftyStepMovingAverageDecreases) {
  const Dataset d = fixtures::synthetic_dataset(80, 2, 3, true);
  TrainOptions o = quick_options(10, 16);
  o.augment = false;
  const TrainResult r = train(o, d, d);
  ASSERT_EQ(r.step_losses.size(), 50u);
  double prev = INFINITY;
  for (std::size_t i = 9; i < r.step_losses.size(); ++i) {
    double s = 0;
    for (std::size_t j = i - 9; j <= i; ++j) s += r.step_losses[j];
    EXPECT_LT(s / 10, prev) << "window ending at step " << i;
    prev = s / 10;
  }
}

TEST(Train, FirstEpochBeatsUniformPredictor) {
  // Learnable 10-class stand-in for CIFAR-10.
  const Dataset d = fixtures::synthetic_dataset(512, 10, 16, true);
  TrainOptions o = quick_options(1, 32);
  o.config = tiny(10);
  const TrainResult r = train(o, d, d);
  EXPECT_LT(r.history.front().train_loss, std::log(10.0));
}

TEST(Train, OverfitsSixtyFourNoiseImages) {
  // Stand-in for the CIFAR-10 overfit check: 64 noise images with random
  // labels, a narrow model, one full batch per step for 300 steps.
  ModelConfig c = tiny(10);
  c.stage_dims = {32, 32};
  c.head_dim = 8;
  const Dataset d = fixtures::synthetic_dataset(64, 10, 1, false);
  TrainOptions o;
  o.config = c;
  o.epochs = 300;
  o.batch = 64;
  o.overfit = 64;
  const TrainResult r = train(o, d, d);
  EXPECT_EQ(r.steps, 300);
  EXPECT_GE(r.history.back().train_acc, 0.98);
}

TEST(Train, MetricsCsvFormat) {
  const std::string csv = metrics_csv({{1, 0.01, 2.0, 0.5, 1.5, 0.625, 3.25}});
  EXPECT_EQ(csv, "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds\n1,0.01,2.000000,0.500000,1.500000,0.625000,3.250\n");
}
