#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ecvit/data.hpp"
#include "ecvit/error.hpp"
#include "ecvit/verify/oracles.hpp"
#include "ecvit/verify/suites.hpp"
#include "support.hpp"

using namespace ecvit;
namespace fs = std::filesystem;
using TF = Tensor<float>;

namespace {

// Record r: label byte(s), then pixel p of plane c holds (r * 7 + c * 3 + p) % 256.
std::vector<std::uint8_t> fixture_bytes(CifarVariant v, const std::vector<std::uint8_t>& labels,
                                        std::uint8_t coarse_base = 0) {
  std::vector<std::uint8_t> out;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (v == CifarVariant::kCifar100) out.push_back(static_cast<std::uint8_t>(coarse_base + r));
    out.push_back(labels[r]);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 1024; ++p) out.push_back(static_cast<std::uint8_t>((r * 7 + c * 3 + p) % 256));
  }
  return out;
}

}  // namespace

TEST(Cifar, RecordSizesAndNames) {
  EXPECT_EQ(record_bytes(CifarVariant::kCifar10), 3073);
  EXPECT_EQ(record_bytes(CifarVariant::kCifar100), 3074);
  EXPECT_EQ(cifar_files(CifarVariant::kCifar10, Split::kTrain).size(), 5u);
  EXPECT_EQ(cifar_files(CifarVariant::kCifar10, Split::kTest), std::vector<std::string>{"test_batch.bin"});
  EXPECT_EQ(cifar_files(CifarVariant::kCifar100, Split::kTrain), std::vector<std::string>{"train.bin"});
}

TEST(Cifar, TwoRecordFixtureExact) {
  const auto dir = fixtures::scratch_dir("two_records");
  fixtures::write_bytes(dir / "two.bin", fixture_bytes(CifarVariant::kCifar10, {3, 9}));
  const Dataset d = read_cifar_file(dir / "two.bin", CifarVariant::kCifar10);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.labels, (std::vector<std::int64_t>{3, 9}));
  const std::vector<std::int64_t> idx{0, 1};
  const TF t = image_tensor(d, idx);
  ASSERT_EQ(t.shape(), (Shape{2, 3, 32, 32}));
  for (std::int64_t r = 0; r < 2; ++r)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t p = 0; p < 1024; p += 37) {
        const auto byte = static_cast<float>((r * 7 + c * 3 + p) % 256);
        ASSERT_EQ(t.at({r, c, p / 32, p % 32}), byte / 255.0f);
      }
}

TEST(Cifar, HundredUsesFineLabel) {
  const auto dir = fixtures::scratch_dir("c100");
  fixtures::write_bytes(dir / "train.bin", fixture_bytes(CifarVariant::kCifar100, {99, 0, 42}, 17));
  fixtures::write_bytes(dir / "test.bin", fixture_bytes(CifarVariant::kCifar100, {5}, 1));
  const Dataset d = load_cifar(dir, CifarVariant::kCifar100, Split::kTrain);
  EXPECT_EQ(d.num_classes, 100);
  EXPECT_EQ(d.labels, (std::vector<std::int64_t>{99, 0, 42}));
  EXPECT_EQ(d.coarse, (std::vector<std::uint8_t>{17, 18, 19}));
  EXPECT_EQ(load_cifar(dir, CifarVariant::kCifar100, Split::kTest).size(), 1);
}

TEST(Cifar, WrongSizeNamesCounts) {
  const auto dir = fixtures::scratch_dir("bad_size");
  auto bytes = fixture_bytes(CifarVariant::kCifar10, {1});
  bytes.pop_back();
  fixtures::write_bytes(dir / "bad.bin", bytes);
  try {
    read_cifar_file(dir / "bad.bin", CifarVariant::kCifar10);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3073"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3072"), std::string::npos) << msg;
  }
}

TEST(Cifar, LabelOutOfRange) {
  const auto dir = fixtures::scratch_dir("bad_label");
  fixtures::write_bytes(dir / "bad.bin", fixture_bytes(CifarVariant::kCifar10, {10}));
  EXPECT_THROW(read_cifar_file(dir / "bad.bin", CifarVariant::kCifar10), FormatError);
  EXPECT_THROW(load_cifar(dir / "nowhere", CifarVariant::kCifar10, Split::kTest), FormatError);
}

TEST(Cifar, RoundTripByteExact) {
  const auto src = fixtures::scratch_dir("rt_src");
  const auto nested = src / "cifar-10-batches-bin";
  fs::create_directories(nested);
  for (int i = 1; i <= 5; ++i) {
    fixtures::write_bytes(nested / ("data_batch_" + std::to_string(i) + ".bin"),
                         fixture_bytes(CifarVariant::kCifar10, {static_cast<std::uint8_t>(i), 0, 9}));
  }
  const Dataset d = load_cifar(src, CifarVariant::kCifar10, Split::kTrain);
  EXPECT_EQ(d.size(), 15);
  const auto out = fixtures::scratch_dir("rt_out");
  write_cifar(d, out);
  for (const auto& f : cifar_files(CifarVariant::kCifar10, Split::kTrain)) {
    EXPECT_EQ(fixtures::read_bytes(out / f), fixtures::read_bytes(nested / f)) << f;
  }
  const auto src100 = fixtures::scratch_dir("rt100");
  fixtures::write_bytes(src100 / "test.bin", fixture_bytes(CifarVariant::kCifar100, {7, 77, 3}, 4));
  const auto out100 = fixtures::scratch_dir("rt100_out");
  write_cifar(load_cifar(src100, CifarVariant::kCifar100, Split::kTest), out100);
  EXPECT_EQ(fixtures::read_bytes(out100 / "test.bin"), fixtures::read_bytes(src100 / "test.bin"));
}

TEST(Cifar, ChannelStatisticsOfKnownBytes) {
  Dataset d;
  d.labels = {0, 1};
  d.pixels.resize(2 * kCifarPixels);
  // Channel 0 all 0 / 255 split by image, channel 1 constant 51, channel 2 alternating 0 and 255.
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t p = 0; p < 1024; ++p) {
      d.pixels[static_cast<std::size_t>(i * kCifarPixels + p)] = i == 0 ? 0 : 255;
      d.pixels[static_cast<std::size_t>(i * kCifarPixels + 1024 + p)] = 51;
      d.pixels[static_cast<std::size_t>(i * kCifarPixels + 2048 + p)] = p % 2 == 0 ? 0 : 255;
    }
  const auto s = channel_statistics(d);
  EXPECT_NEAR(s.mean[0], 0.5, 1e-12);
  EXPECT_NEAR(s.std[0], 0.5, 1e-12);
  EXPECT_NEAR(s.mean[1], 0.2, 1e-12);
  EXPECT_NEAR(s.std[1], 0.0, 1e-12);
  EXPECT_NEAR(s.mean[2], 0.5, 1e-12);
  EXPECT_NEAR(s.std[2], 0.5, 1e-12);
}

TEST(Preprocess, ConstantResizeAndRamp) {
  const TF c = resize_bilinear(TF({1, 3, 32, 32}, 0.375f), {56, 56});
  EXPECT_EQ(c.shape(), (Shape{1, 3, 56, 56}));
  for (float v : c.values()) ASSERT_EQ(v, 0.375f);
  TF ramp({1, 1, 32, 32});
  for (std::int64_t i = 0; i < 32; ++i)
    for (std::int64_t j = 0; j < 32; ++j) ramp.set({0, 0, i, j}, static_cast<float>(j) / 31.0f);
  const auto ref = oracle::bilinear(verify::as_doubles(ramp), 32, 32, 56, 56);
  const TF y = resize_bilinear(ramp, {56, 56});
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-6);
}

TEST(Preprocess, StandardizeInverts) {
  Rng rng(1);
  const TF x = verify::random_tensor<float>({2, 3, 4, 4}, rng, 0, 1);
  const TF back = destandardize(standardize(x));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-6);
  EXPECT_NEAR(standardize(TF({1, 3, 1, 1}, 0.4914f)).at({0, 0, 0, 0}), 0.0f, 1e-7);
}

TEST(Preprocess, EvalDeterministic) {
  const Dataset d = fixtures::synthetic_dataset(6, 10, 2, false);
  const std::vector<std::int64_t> idx{4, 0, 5};
  const TF a = preprocess(d, idx, {56, 56}, false, 11);
  const TF b = preprocess(d, idx, {56, 56}, false, 99);
  EXPECT_EQ(a.shape(), (Shape{3, 3, 56, 56}));
  EXPECT_EQ(a.to_vector(), b.to_vector());
  const TF c = preprocess(d, idx, {56, 56}, true, 11);
  EXPECT_EQ(c.to_vector(), preprocess(d, idx, {56, 56}, true, 11).to_vector());
  EXPECT_NE(c.to_vector(), preprocess(d, idx, {56, 56}, true, 12).to_vector());
}

TEST(Preprocess, AugmentationStaysWithinSourceRange) {
  // Crop, mirror and bilinear resize only mix source pixels, so every output
  // lies between the standardized extremes of the source channel.
  const Dataset d = fixtures::synthetic_dataset(8, 10, 3, false);
  const std::int64_t plane = kCifarSide * kCifarSide;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const std::vector<std::int64_t> idx{i};
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const TF aug = preprocess(d, idx, {40, 40}, true, seed);
      for (std::int64_t c = 0; c < 3; ++c) {
        const std::uint8_t* src = d.image(i) + c * plane;
        const auto [mn, mx] = std::minmax_element(src, src + plane);
        const auto cc = static_cast<std::size_t>(c);
        const float lo = (*mn / 255.0f - kCifarMean[cc]) / kCifarStd[cc];
        const float hi = (*mx / 255.0f - kCifarMean[cc]) / kCifarStd[cc];
        for (std::int64_t p = 0; p < 1600; ++p) {
          ASSERT_GE(aug.data()[c * 1600 + p], lo - 1e-5f);
          ASSERT_LE(aug.data()[c * 1600 + p], hi + 1e-5f);
        }
      }
    }
  }
}

TEST(Preprocess, AugmentCropsAndFlips) {
  // A single bright pixel at (5, 10) must land where a 4 px reflect pad,
  // crop offset and optional mirror put it.
  std::vector<std::uint8_t> img(kCifarPixels, 0);
  img[5 * 32 + 10] = 255;
  bool saw_flip = false, saw_plain = false;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(s);
    std::vector<float> out(kCifarPixels);
    augment_image(img.data(), rng, out.data());
    const auto it = std::max_element(out.begin(), out.begin() + 1024);
    ASSERT_EQ(*it, 1.0f);
    const auto pos = it - out.begin();
    const auto row = pos / 32, col = pos % 32;
    EXPECT_LE(std::abs(row - 5), 4);
    if (std::abs(col - 10) <= 4) saw_plain = true;
    if (std::abs(col - 21) <= 4) saw_flip = true;
  }
  EXPECT_TRUE(saw_plain);
  EXPECT_TRUE(saw_flip);
}

TEST(Batches, CountsAndShortLastBatch) {
  const BatchIterator it(50000, 64, 1);
  EXPECT_EQ(it.batches_per_epoch(), 782);
  const auto e = it.epoch(0);
  ASSERT_EQ(e.size(), 782u);
  EXPECT_EQ(e.back().size(), 16u);
}

TEST(Batches, DeterministicPermutation) {
  const Dataset d = fixtures::synthetic_dataset(103, 10, 4, false);
  const BatchIterator it(d.size(), 16, 9);
  EXPECT_EQ(it.epoch(2), it.epoch(2));
  EXPECT_NE(it.epoch(2), it.epoch(3));
  EXPECT_NE(BatchIterator(d.size(), 16, 10).epoch(2), it.epoch(2));
  std::vector<std::int64_t> seen, labels;
  for (const auto& b : it.epoch(1)) {
    for (auto i : b) {
      seen.push_back(i);
      labels.push_back(d.labels[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(seen.begin(), seen.end());
  for (std::int64_t i = 0; i < d.size(); ++i) EXPECT_EQ(seen[static_cast<std::size_t>(i)], i);
  auto expected = d.labels;
  std::sort(expected.begin(), expected.end());
  std::sort(labels.begin(), labels.end());
  EXPECT_EQ(labels, expected);
  const BatchIterator ordered(10, 4, 0, false);
  EXPECT_EQ(ordered.epoch(5).front(), (std::vector<std::int64_t>{0, 1, 2, 3}));
}

TEST(Dataset, Subset) {
  const Dataset d = fixtures::synthetic_dataset(20, 10, 5, false);
  const Dataset s = take_subset(d, 7);
  EXPECT_EQ(s.size(), 7);
  EXPECT_TRUE(std::equal(s.pixels.begin(), s.pixels.end(), d.pixels.begin()));
  EXPECT_EQ(take_subset(d, 100).size(), 20);
}
