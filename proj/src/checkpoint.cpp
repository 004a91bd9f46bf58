#include "velofill/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace velofill {

namespace {

using Kind = CheckpointError::Kind;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string string() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(Kind::CorruptCheckpoint, "checkpoint truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const UNet& model) {
  std::vector<std::uint8_t> out{'V', 'L', 'F', 'L'};
  put_u32(out, kCheckpointVersion);
  put_string(out, model.config.to_text());

  auto record = [&](const std::string& name, const Tensor& t) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  };
  model.weights.for_each_parameter(record);
  model.weights.for_each_buffer(record);
  put_u32(out, crc_of(out));
  return out;
}

UNet deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "VLFL", 4) != 0)
    throw CheckpointError(Kind::CorruptCheckpoint, "not a checkpoint (bad magic)");
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  if (trailer.u32() != crc_of(body))
    throw CheckpointError(Kind::CorruptCheckpoint, "checkpoint checksum mismatch");

  Reader in(body.subspan(4));
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                                     ", expected " + std::to_string(kCheckpointVersion));
  UNetConfig config;
  try {
    config = UNetConfig::from_text(in.string());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::CorruptCheckpoint, std::string("bad checkpoint config: ") + e.what());
  }

  std::map<std::string, Tensor> tensors;
  while (!in.done()) {
    std::string name = in.string();
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw CheckpointError(Kind::CorruptCheckpoint, "implausible tensor rank in " + name);
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    Tensor t(shape);
    for (auto& v : t.values()) v = std::bit_cast<float>(in.u32());
    tensors.emplace(std::move(name), std::move(t));
  }

  UNet model = build_unet<float>(config, 0);
  std::size_t used = 0;
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError(Kind::CorruptCheckpoint, "checkpoint lacks " + name);
    if (it->second.shape() != dst.shape())
      throw CheckpointError(Kind::CorruptCheckpoint, "shape mismatch for " + name);
    dst = std::move(it->second);
    ++used;
  };
  model.weights.for_each_parameter(assign);
  model.weights.for_each_buffer(assign);
  if (used != tensors.size())
    throw CheckpointError(Kind::CorruptCheckpoint, "checkpoint holds unexpected tensors");
  return model;
}

void save_checkpoint(const UNet& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot write " + path);
  file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw std::runtime_error("failed writing " + path);
}

UNet load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace velofill
