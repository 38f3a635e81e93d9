#include "ecvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "ecvit/parallel.hpp"

namespace ecvit {

namespace fs = std::filesystem;

std::int64_t record_bytes(CifarVariant v) { return v == CifarVariant::kCifar10 ? 3073 : 3074; }

std::vector<std::string> cifar_files(CifarVariant v, Split s) {
  if (v == CifarVariant::kCifar100) return {s == Split::kTrain ? "train.bin" : "test.bin"};
  if (s == Split::kTest) return {"test_batch.bin"};
  std::vector<std::string> out;
  for (int i = 1; i <= 5; ++i) out.push_back("data_batch_" + std::to_string(i) + ".bin");
  return out;
}

namespace {

void append_records(Dataset& d, const std::vector<std::uint8_t>& bytes, const std::string& name) {
  const auto rec = record_bytes(d.variant);
  const auto size = static_cast<std::int64_t>(bytes.size());
  if (size == 0 || size % rec != 0) {
    throw FormatError(name + ": expected a positive multiple of " + std::to_string(rec) + " bytes (" +
                      std::to_string(rec) + " per record), got " + std::to_string(size));
  }
  const auto n = size / rec;
  const std::int64_t label_bytes = rec - kCifarPixels;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    const std::int64_t label = r[label_bytes - 1];
    if (label >= d.num_classes) {
      throw FormatError(name + ": record " + std::to_string(i) + " has label " + std::to_string(label) +
                        " outside [0, " + std::to_string(d.num_classes) + ")");
    }
    if (d.variant == CifarVariant::kCifar100) d.coarse.push_back(r[0]);
    d.labels.push_back(label);
    d.pixels.insert(d.pixels.end(), r + label_bytes, r + rec);
  }
  d.files.push_back(name);
  d.file_records.push_back(n);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset empty_dataset(CifarVariant v, Split s) {
  Dataset d;
  d.variant = v;
  d.split = s;
  d.num_classes = v == CifarVariant::kCifar10 ? 10 : 100;
  return d;
}

}  // namespace

Dataset read_cifar_file(const fs::path& path, CifarVariant v) {
  Dataset d = empty_dataset(v, Split::kTrain);
  append_records(d, read_bytes(path), path.filename().string());
  return d;
}

Dataset load_cifar(const fs::path& dir, CifarVariant v, Split s) {
  const auto files = cifar_files(v, s);
  fs::path base = dir;
  const fs::path nested = dir / (v == CifarVariant::kCifar10 ? "cifar-10-batches-bin" : "cifar-100-binary");
  if (!fs::exists(base / files.front()) && fs::exists(nested / files.front())) base = nested;
  Dataset d = empty_dataset(v, s);
  for (const auto& f : files) {
    const fs::path p = base / f;
    if (!fs::exists(p)) throw FormatError("missing CIFAR file " + p.string());
    append_records(d, read_bytes(p), f);
  }
  return d;
}

void write_cifar(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  const auto rec = record_bytes(d.variant);
  std::int64_t i = 0;
  for (std::size_t f = 0; f < d.files.size(); ++f) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(static_cast<std::size_t>(d.file_records[f] * rec));
    for (std::int64_t r = 0; r < d.file_records[f]; ++r, ++i) {
      if (d.variant == CifarVariant::kCifar100) bytes.push_back(d.coarse[static_cast<std::size_t>(i)]);
      bytes.push_back(static_cast<std::uint8_t>(d.labels[static_cast<std::size_t>(i)]));
      bytes.insert(bytes.end(), d.image(i), d.image(i) + kCifarPixels);
    }
    std::ofstream out(dir / d.files[f], std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("cannot write " + (dir / d.files[f]).string());
  }
}

Dataset take_subset(const Dataset& d, std::int64_t count) {
  const auto n = std::min(count, d.size());
  Dataset s = empty_dataset(d.variant, d.split);
  s.num_classes = d.num_classes;
  s.labels.assign(d.labels.begin(), d.labels.begin() + n);
  if (!d.coarse.empty()) s.coarse.assign(d.coarse.begin(), d.coarse.begin() + n);
  s.pixels.assign(d.pixels.begin(), d.pixels.begin() + n * kCifarPixels);
  s.files = {d.files.empty() ? "subset.bin" : d.files.front()};
  s.file_records = {n};
  return s;
}

Tensor<float> image_tensor(const Dataset& d, std::span<const std::int64_t> indices) {
  const auto n = static_cast<std::int64_t>(indices.size());
  std::vector<float> v(static_cast<std::size_t>(n * kCifarPixels));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint8_t* src = d.image(indices[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < kCifarPixels; ++j) {
      v[static_cast<std::size_t>(i * kCifarPixels + j)] = static_cast<float>(src[j]) / 255.0f;
    }
  }
  return Tensor<float>({n, 3, kCifarSide, kCifarSide}, std::move(v));
}

ChannelStats channel_statistics(const Dataset& d) {
  ChannelStats s;
  const std::int64_t plane = kCifarSide * kCifarSide;
  for (int c = 0; c < 3; ++c) {
    // Histogram of byte values keeps the sums exact.
    std::array<std::int64_t, 256> hist{};
    for (std::int64_t i = 0; i < d.size(); ++i) {
      const std::uint8_t* p = d.image(i) + c * plane;
      for (std::int64_t j = 0; j < plane; ++j) ++hist[p[j]];
    }
    const double n = static_cast<double>(d.size() * plane);
    double sum = 0;
    for (int b = 0; b < 256; ++b) sum += static_cast<double>(hist[static_cast<std::size_t>(b)]) * (b / 255.0);
    const double mean = sum / n;
    double sq = 0;
    for (int b = 0; b < 256; ++b) {
      const double dx = b / 255.0 - mean;
      sq += static_cast<double>(hist[static_cast<std::size_t>(b)]) * dx * dx;
    }
    s.mean[static_cast<std::size_t>(c)] = mean;
    s.std[static_cast<std::size_t>(c)] = std::sqrt(sq / n);
  }
  return s;
}

namespace {

struct Tap {
  std::int64_t i0, i1;
  float w1;
};

std::vector<Tap> taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
    const auto i0 = std::min(static_cast<std::int64_t>(src), in - 1);
    t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), static_cast<float>(src - static_cast<double>(i0))};
  }
  return t;
}

void resize_plane(const float* src, std::int64_t w, const std::vector<Tap>& ty,
                  const std::vector<Tap>& tx, float* dst) {
  const auto ow = static_cast<std::int64_t>(tx.size());
  for (std::size_t y = 0; y < ty.size(); ++y) {
    const float* r0 = src + ty[y].i0 * w;
    const float* r1 = src + ty[y].i1 * w;
    const float wy = ty[y].w1;
    for (std::int64_t x = 0; x < ow; ++x) {
      const Tap& t = tx[static_cast<std::size_t>(x)];
      const float top = r0[t.i0] + t.w1 * (r0[t.i1] - r0[t.i0]);
      const float bot = r1[t.i0] + t.w1 * (r1[t.i1] - r1[t.i0]);
      dst[static_cast<std::int64_t>(y) * ow + x] = top + wy * (bot - top);
    }
  }
}

void standardize_in_place(float* x, std::int64_t planes_per_image, std::int64_t images, std::int64_t plane,
                          bool inverse) {
  for (std::int64_t i = 0; i < images; ++i) {
    for (std::int64_t c = 0; c < planes_per_image; ++c) {
      const float m = kCifarMean[static_cast<std::size_t>(c)], s = kCifarStd[static_cast<std::size_t>(c)];
      float* p = x + (i * planes_per_image + c) * plane;
      for (std::int64_t j = 0; j < plane; ++j) p[j] = inverse ? p[j] * s + m : (p[j] - m) / s;
    }
  }
}

}  // namespace

Tensor<float> resize_bilinear(const Tensor<float>& x, Hw target) {
  if (x.rank() != 4) throw ShapeError("resize_bilinear: expected [B, C, H, W], got " + shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = taps(H, target.h), tx = taps(W, target.w);
  Tensor<float> out({B, C, target.h, target.w});
  for (std::int64_t p = 0; p < B * C; ++p) {
    resize_plane(x.data() + p * H * W, W, ty, tx, out.mutable_data() + p * target.h * target.w);
  }
  return out;
}

Tensor<float> standardize(const Tensor<float>& x) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("standardize: expected [B, 3, H, W], got " + shape_str(x.shape()));
  Tensor<float> out = x.clone();
  standardize_in_place(out.mutable_data(), 3, x.dim(0), x.dim(2) * x.dim(3), false);
  return out;
}

Tensor<float> destandardize(const Tensor<float>& x) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("destandardize: expected [B, 3, H, W], got " + shape_str(x.shape()));
  Tensor<float> out = x.clone();
  standardize_in_place(out.mutable_data(), 3, x.dim(0), x.dim(2) * x.dim(3), true);
  return out;
}

void augment_image(const std::uint8_t* src, Rng& rng, float* dst) {
  constexpr std::int64_t pad = 4, S = kCifarSide;
  const auto oy = static_cast<std::int64_t>(rng.below(2 * pad + 1));
  const auto ox = static_cast<std::int64_t>(rng.below(2 * pad + 1));
  const bool flip = rng.uniform() < 0.5;
  auto reflect = [](std::int64_t i) { return i < 0 ? -i : (i >= S ? 2 * (S - 1) - i : i); };
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < S; ++y) {
      const auto sy = reflect(y + oy - pad);
      for (std::int64_t x = 0; x < S; ++x) {
        const auto sx = reflect((flip ? S - 1 - x : x) + ox - pad);
        dst[(c * S + y) * S + x] = static_cast<float>(src[(c * S + sy) * S + sx]) / 255.0f;
      }
    }
  }
}

Tensor<float> preprocess(const Dataset& d, std::span<const std::int64_t> indices, Hw target, bool augment,
                         std::uint64_t aug_seed) {
  const auto n = static_cast<std::int64_t>(indices.size());
  const auto ty = taps(kCifarSide, target.h), tx = taps(kCifarSide, target.w);
  const std::int64_t plane_in = kCifarSide * kCifarSide, plane_out = target.h * target.w;
  std::vector<float> out(static_cast<std::size_t>(n * 3 * plane_out));
  parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<float> img(static_cast<std::size_t>(kCifarPixels));
    for (std::int64_t i = lo; i < hi; ++i) {
      const std::uint8_t* src = d.image(indices[static_cast<std::size_t>(i)]);
      if (augment) {
        Rng rng = Rng::derive(aug_seed, {static_cast<std::uint64_t>(i)});
        augment_image(src, rng, img.data());
      } else {
        for (std::int64_t j = 0; j < kCifarPixels; ++j) img[static_cast<std::size_t>(j)] = static_cast<float>(src[j]) / 255.0f;
      }
      for (std::int64_t c = 0; c < 3; ++c) {
        float* dst = out.data() + (i * 3 + c) * plane_out;
        if (target.h == kCifarSide && target.w == kCifarSide) {
          std::copy_n(img.data() + c * plane_in, plane_in, dst);
        } else {
          resize_plane(img.data() + c * plane_in, kCifarSide, ty, tx, dst);
        }
      }
      standardize_in_place(out.data() + i * 3 * plane_out, 3, 1, plane_out, false);
    }
  });
  return Tensor<float>({n, 3, target.h, target.w}, std::move(out));
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(epoch)});
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

BatchIterator::BatchIterator(std::int64_t dataset_size, std::int64_t batch_size, std::uint64_t seed, bool shuffle)
    : n_(dataset_size), batch_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw ContractError("batch size must be at least 1");
}

std::int64_t BatchIterator::batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

std::vector<std::vector<std::int64_t>> BatchIterator::epoch(std::int64_t epoch) const {
  std::vector<std::int64_t> order;
  if (shuffle_) {
    order = epoch_order(n_, seed_, epoch);
  } else {
    order.resize(static_cast<std::size_t>(n_));
    std::iota(order.begin(), order.end(), std::int64_t{0});
  }
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t s = 0; s < n_; s += batch_) {
    const auto e = std::min(n_, s + batch_);
    out.emplace_back(order.begin() + s, order.begin() + e);
  }
  return out;
}

}  // namespace ecvit
