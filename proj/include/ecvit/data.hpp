#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecvit/ops.hpp"
#include "ecvit/rng.hpp"

namespace ecvit {

enum class CifarVariant { kCifar10, kCifar100 };
enum class Split { kTrain, kTest };

inline constexpr std::int64_t kCifarSide = 32;
inline constexpr std::int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

std::int64_t record_bytes(CifarVariant v);

/// Standard file names of a split, in load order.
std::vector<std::string> cifar_files(CifarVariant v, Split s);

/// Raw CIFAR records. Pixels stay as bytes (channel-planar, row-major) so the
/// dataset can be written back unchanged; image_tensor maps them to [0, 1].
struct Dataset {
  CifarVariant variant = CifarVariant::kCifar10;
  Split split = Split::kTrain;
  std::int64_t num_classes = 10;
  std::vector<std::uint8_t> pixels;  // size() * 3072
  std::vector<std::int64_t> labels;  // fine labels for CIFAR-100
  std::vector<std::uint8_t> coarse;  // CIFAR-100 only
  std::vector<std::string> files;    // source file names
  std::vector<std::int64_t> file_records;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  const std::uint8_t* image(std::int64_t i) const { return pixels.data() + i * kCifarPixels; }
};

/// Reads one binary file. Throws FormatError on a size that is not a whole
/// number of records or an out-of-range label.
Dataset read_cifar_file(const std::filesystem::path& path, CifarVariant v);

/// Loads a split from `dir` (or its cifar-10-batches-bin / cifar-100-binary
/// subdirectory).
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant v, Split s);

/// Writes the records back, one file per source file.
void write_cifar(const Dataset& d, const std::filesystem::path& dir);

/// The first `count` records (or all, if fewer), as a single-file dataset.
Dataset take_subset(const Dataset& d, std::int64_t count);

/// [n, 3, 32, 32] with bytes / 255.
Tensor<float> image_tensor(const Dataset& d, std::span<const std::int64_t> indices);

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

/// Per-channel mean and population deviation of bytes / 255.
ChannelStats channel_statistics(const Dataset& d);

/// Bilinear resize with half-pixel centers (align_corners = false).
Tensor<float> resize_bilinear(const Tensor<float>& x, Hw target);

Tensor<float> standardize(const Tensor<float>& x);
Tensor<float> destandardize(const Tensor<float>& x);

/// Reflect-pad by 4, take a random 32x32 crop and mirror with probability 1/2.
/// `dst` receives 3 * 32 * 32 values in [0, 1].
void augment_image(const std::uint8_t* src, Rng& rng, float* dst);

/// Batch of images ready for the model: optional augmentation, resize to
/// `target`, standardization. Image i of the batch draws from
/// Rng::derive(aug_seed, {i}).
Tensor<float> preprocess(const Dataset& d, std::span<const std::int64_t> indices, Hw target, bool augment,
                         std::uint64_t aug_seed);

/// Fisher-Yates permutation of [0, n) determined by (seed, epoch).
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch);

/// Shuffled index batches for one epoch; the last one may be short.
class BatchIterator {
 public:
  BatchIterator(std::int64_t dataset_size, std::int64_t batch_size, std::uint64_t seed, bool shuffle = true);

  std::int64_t batches_per_epoch() const;
  std::vector<std::vector<std::int64_t>> epoch(std::int64_t epoch) const;

 private:
  std::int64_t n_;
  std::int64_t batch_;
  std::uint64_t seed_;
  bool shuffle_;
};

}  // namespace ecvit
