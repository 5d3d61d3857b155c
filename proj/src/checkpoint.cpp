#include "ptsm/checkpoint.hpp"

#include <cstring>

#include "ptsm/binio.hpp"
#include "ptsm/errors.hpp"

namespace ptsm {

namespace {
constexpr unsigned char kMagic[4] = {'P', 'T', 'S', 'C'};
constexpr std::uint8_t kFormatVersion = 1;
constexpr i64 kMaxElements = 1LL << 30;
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
  check_contract(find(name) == nullptr, "duplicate checkpoint tensor: " + name);
  tensors.emplace_back(name, t);
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::vector<unsigned char> buf;
  binio::put_bytes(buf, kMagic, 4);
  binio::put_u8(buf, kFormatVersion);
  binio::put_u64(buf, ck.config_hash);
  binio::put_u32(buf, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    binio::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    binio::put_bytes(buf, name.data(), name.size());
    binio::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (i64 d = 0; d < t.rank(); ++d)
      binio::put_u32(buf, static_cast<std::uint32_t>(t.dim(d)));
    for (i64 i = 0; i < t.numel(); ++i) binio::put_f64(buf, t[i]);
  }
  const std::string meta = ck.meta.is_null() ? std::string("{}") : ck.meta.dump();
  binio::put_u32(buf, static_cast<std::uint32_t>(meta.size()));
  binio::put_bytes(buf, meta.data(), meta.size());
  binio::put_u32(buf, binio::crc32(buf.data(), buf.size()));
  binio::atomic_write_file(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::vector<unsigned char> bytes = binio::read_file(path);
  if (bytes.size() < 4)
    throw DatasetError(DatasetError::Kind::Truncated, "file too short for a header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DatasetError(DatasetError::Kind::BadMagic, "not a PTSC checkpoint");
  if (bytes.size() < 5)
    throw DatasetError(DatasetError::Kind::Truncated, "file ends before the version byte");
  if (bytes[4] != kFormatVersion)
    throw DatasetError(DatasetError::Kind::BadVersion,
                       "unsupported checkpoint version " + std::to_string(bytes[4]));
  if (bytes.size() < 9)
    throw DatasetError(DatasetError::Kind::Truncated, "file ends inside the header");

  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  if (binio::crc32(bytes.data(), bytes.size() - 4) != stored)
    throw DatasetError(DatasetError::Kind::ChecksumMismatch, "CRC32 does not match the payload");

  binio::Reader r(bytes.data() + 5, bytes.size() - 5 - 4);
  Checkpoint ck;
  ck.config_hash = r.u64();
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096)
      throw DatasetError(DatasetError::Kind::InvalidField, "tensor name is implausibly long");
    const unsigned char* np = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(np), name_len);
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 8)
      throw DatasetError(DatasetError::Kind::InvalidField, "tensor rank out of range");
    Shape shape;
    i64 numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const i64 dim = r.u32();
      if (dim < 1) throw DatasetError(DatasetError::Kind::InvalidField, "tensor dimension must be positive");
      numel *= dim;
      if (numel > kMaxElements)
        throw DatasetError(DatasetError::Kind::InvalidField, "tensor is implausibly large");
      shape.push_back(dim);
    }
    Tensor t(shape);
    for (i64 j = 0; j < t.numel(); ++j) t[j] = r.f64();
    if (ck.find(name) != nullptr)
      throw DatasetError(DatasetError::Kind::InvalidField, "duplicate tensor name: " + name);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  const std::uint32_t meta_len = r.u32();
  const unsigned char* mp = r.take(meta_len);
  if (r.remaining() != 0)
    throw DatasetError(DatasetError::Kind::InvalidField, "trailing bytes after the metadata block");
  try {
    ck.meta = nlohmann::json::parse(mp, mp + meta_len);
  } catch (const nlohmann::json::exception&) {
    throw DatasetError(DatasetError::Kind::InvalidField, "metadata block is not valid JSON");
  }
  return ck;
}

}  // namespace ptsm
