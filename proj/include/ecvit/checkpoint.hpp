#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ecvit/tensor.hpp"

namespace ecvit {

inline constexpr char kCheckpointMagic[4] = {'E', 'C', 'V', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class RecordType : std::uint8_t { kFloat32 = 1, kFloat64 = 2, kInt64 = 3 };

/// One named array. Exactly one of the value vectors is used, per `type`.
struct Record {
  std::string name;
  RecordType type = RecordType::kFloat32;
  Shape dims;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;

  template <typename T>
  static Record from_tensor(std::string name, const Tensor<T>& t);
  static Record from_ints(std::string name, std::vector<std::int64_t> values);

  std::int64_t numel() const;
};

/// Layout: magic "ECVT", u32 version, u32 length + config text, u32 record
/// count, then per record: u32 name length + name, u8 type, u32 rank, i64
/// dims, little-endian values.
struct Checkpoint {
  std::string config_text;
  std::vector<Record> records;

  const Record* find(const std::string& name) const;
  const Record& at(const std::string& name) const;  // kNameMismatch when absent
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies a float record into an existing tensor of the same shape.
template <typename T>
void copy_record(const Record& r, Tensor<T>& dst);

}  // namespace ecvit
