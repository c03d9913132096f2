#include "carel/ndgrad/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include "carel/errors.hpp"

namespace carel::ndgrad {
namespace {

constexpr std::array<char, 8> kMagic = {'N', 'D', 'G', 'R', 'A', 'D', 'C', 'K'};

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b.data(), b.size());
}

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b.data(), b.size());
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw IoError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& is, std::uint64_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint truncated");
  return s;
}

}  // namespace

bool Checkpoint::has_tensor(std::string_view name) const {
  for (const auto& [k, v] : tensors) {
    if (k == name) return true;
  }
  return false;
}

bool Checkpoint::has_text(std::string_view name) const {
  for (const auto& [k, v] : texts) {
    if (k == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
  for (const auto& [k, v] : tensors) {
    if (k == name) return v;
  }
  throw VersionError("checkpoint has no tensor record '" + std::string(name) + "'");
}

const std::string& Checkpoint::text(std::string_view name) const {
  for (const auto& [k, v] : texts) {
    if (k == name) return v;
  }
  throw VersionError("checkpoint has no text record '" + std::string(name) + "'");
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(kCheckpointVersion.size()));
  os.write(kCheckpointVersion.data(), static_cast<std::streamsize>(kCheckpointVersion.size()));
  put_u64(os, ckpt.config_digest);
  put_u32(os, static_cast<std::uint32_t>(ckpt.texts.size()));
  for (const auto& [name, value] : ckpt.texts) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, value.size());
    os.write(value.data(), static_cast<std::streamsize>(value.size()));
  }
  put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(os, d);
    for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw VersionError("not an ndgrad checkpoint (bad magic)");
  }
  const std::string version = get_bytes(is, get_u32(is));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version '" + version + "' is not supported (expected '" +
                       std::string(kCheckpointVersion) + "')");
  }
  Checkpoint ckpt;
  ckpt.config_digest = get_u64(is);
  const std::uint32_t n_text = get_u32(is);
  for (std::uint32_t i = 0; i < n_text; ++i) {
    std::string name = get_bytes(is, get_u32(is));
    std::string value = get_bytes(is, get_u64(is));
    ckpt.texts.emplace_back(std::move(name), std::move(value));
  }
  const std::uint32_t n_tensor = get_u32(is);
  for (std::uint32_t i = 0; i < n_tensor; ++i) {
    std::string name = get_bytes(is, get_u32(is));
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw IoError("checkpoint record '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = get_u64(is);
    const std::size_t count = element_count(shape);
    std::vector<double> values(count);
    for (auto& v : values) v = std::bit_cast<double>(get_u64(is));
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  return read_checkpoint(is);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace carel::ndgrad
