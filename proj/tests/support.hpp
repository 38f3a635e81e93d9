#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ecvit/data.hpp"
#include "ecvit/rng.hpp"

namespace ecvit::fixtures {

/// In-memory CIFAR-10 style dataset. With `learnable`, each class gets its own
/// colour and stripe direction under per-pixel noise; otherwise pixels and
/// labels are independent noise.
inline Dataset synthetic_dataset(std::int64_t n, std::int64_t classes, std::uint64_t seed, bool learnable,
                                 Split split = Split::kTrain) {
  Dataset d;
  d.split = split;
  d.num_classes = classes;
  d.variant = classes == 100 ? CifarVariant::kCifar100 : CifarVariant::kCifar10;
  d.pixels.resize(static_cast<std::size_t>(n * kCifarPixels));
  Rng rng = Rng::derive(seed, {77});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(classes)));
    d.labels.push_back(label);
    if (d.variant == CifarVariant::kCifar100) d.coarse.push_back(static_cast<std::uint8_t>(label / 5));
    std::uint8_t* px = d.pixels.data() + i * kCifarPixels;
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < kCifarSide; ++y)
        for (std::int64_t x = 0; x < kCifarSide; ++x) {
          double v = rng.uniform(0.0, 255.0);
          if (learnable) {
            const double base = 40.0 + 170.0 * static_cast<double>((label * 3 + c * 7) % 10) / 9.0;
            const bool stripe = ((label % 2 == 0 ? x : y) / 4) % 2 == 0;
            v = base + (stripe ? 25.0 : -25.0) + rng.uniform(-30.0, 30.0);
          }
          px[(c * kCifarSide + y) * kCifarSide + x] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
  }
  d.files = {split == Split::kTrain ? "data_batch_1.bin" : "test_batch.bin"};
  d.file_records = {n};
  return d;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ecvit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ecvit::fixtures
