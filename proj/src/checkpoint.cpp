#include "ecvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ecvit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
Record Record::from_tensor(std::string name, const Tensor<T>& t) {
  Record r;
  r.name = std::move(name);
  r.dims = t.shape();
  if constexpr (std::is_same_v<T, float>) {
    r.type = RecordType::kFloat32;
    r.f32 = t.to_vector();
  } else {
    r.type = RecordType::kFloat64;
    r.f64 = t.to_vector();
  }
  return r;
}

Record Record::from_ints(std::string name, std::vector<std::int64_t> values) {
  Record r;
  r.name = std::move(name);
  r.type = RecordType::kInt64;
  r.dims = {static_cast<std::int64_t>(values.size())};
  r.i64 = std::move(values);
  return r;
}

std::int64_t Record::numel() const { return shape_numel(dims); }

const Record* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const Record& Checkpoint::at(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  throw CheckpointError(CheckpointError::Kind::kNameMismatch, "checkpoint has no entry '" + name + "'");
}

namespace {

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " +
                                std::to_string(pos_));
    }
  }
  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void get_bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    std::string s(n, '\0');
    get_bytes(s.data(), n, what);
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(c.config_text);
  w.put(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    w.put_string(r.name);
    w.put(static_cast<std::uint8_t>(r.type));
    w.put(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.put(static_cast<std::int64_t>(d));
    const auto n = static_cast<std::size_t>(r.numel());
    switch (r.type) {
      case RecordType::kFloat32: w.put_bytes(r.f32.data(), n * sizeof(float)); break;
      case RecordType::kFloat64: w.put_bytes(r.f64.data(), n * sizeof(double)); break;
      case RecordType::kInt64: w.put_bytes(r.i64.data(), n * sizeof(std::int64_t)); break;
    }
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  char magic[4];
  rd.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kBadMagic, "not a checkpoint (bad magic bytes)");
  }
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersionMismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.config_text = rd.get_string("config");
  const auto count = rd.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    r.name = rd.get_string("record name");
    const auto tag = rd.get<std::uint8_t>("dtype tag");
    if (tag < 1 || tag > 3) {
      throw CheckpointError(CheckpointError::Kind::kBadDtype,
                            "entry '" + r.name + "' has unknown dtype tag " + std::to_string(tag));
    }
    r.type = static_cast<RecordType>(tag);
    const auto rank = rd.get<std::uint32_t>("rank");
    rd.need(static_cast<std::size_t>(rank) * sizeof(std::int64_t), "dims");
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = rd.get<std::int64_t>("dims");
      if (dim <= 0) {
        throw CheckpointError(CheckpointError::Kind::kTruncated,
                              "entry '" + r.name + "' has non-positive dimension");
      }
      r.dims.push_back(dim);
      n *= dim;
    }
    const auto un = static_cast<std::size_t>(n);
    switch (r.type) {
      case RecordType::kFloat32:
        rd.need(un * sizeof(float), "values");
        r.f32.resize(un);
        rd.get_bytes(r.f32.data(), un * sizeof(float), "values");
        break;
      case RecordType::kFloat64:
        rd.need(un * sizeof(double), "values");
        r.f64.resize(un);
        rd.get_bytes(r.f64.data(), un * sizeof(double), "values");
        break;
      case RecordType::kInt64:
        rd.need(un * sizeof(std::int64_t), "values");
        r.i64.resize(un);
        rd.get_bytes(r.i64.data(), un * sizeof(std::int64_t), "values");
        break;
    }
    c.records.push_back(std::move(r));
  }
  if (!rd.done()) {
    throw CheckpointError(CheckpointError::Kind::kTruncated, "unexpected bytes after the last checkpoint entry");
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

template <typename T>
void copy_record(const Record& r, Tensor<T>& dst) {
  if (r.dims != dst.shape()) {
    throw CheckpointError(CheckpointError::Kind::kNameMismatch,
                          "entry '" + r.name + "' has shape " + shape_str(r.dims) + ", expected " +
                              shape_str(dst.shape()));
  }
  auto out = dst.mutable_values();
  if (r.type == RecordType::kFloat32) {
    std::copy(r.f32.begin(), r.f32.end(), out.begin());
  } else if (r.type == RecordType::kFloat64) {
    std::copy(r.f64.begin(), r.f64.end(), out.begin());
  } else {
    throw CheckpointError(CheckpointError::Kind::kBadDtype, "entry '" + r.name + "' is not floating point");
  }
}

template Record Record::from_tensor(std::string, const Tensor<float>&);
template Record Record::from_tensor(std::string, const Tensor<double>&);
template void copy_record(const Record&, Tensor<float>&);
template void copy_record(const Record&, Tensor<double>&);

}  // namespace ecvit
