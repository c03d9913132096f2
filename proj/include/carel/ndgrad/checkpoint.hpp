#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "carel/ndgrad/tensor.hpp"

namespace carel::ndgrad {

inline constexpr std::string_view kCheckpointVersion = "ndgrad-checkpoint/1";

// Self-describing binary checkpoint:
//
//   magic "NDGRADCK"
//   version tag          u32 length + bytes
//   config digest        u64
//   text record count    u32, then (name: u32 + bytes, value: u64 + bytes)*
//   tensor record count  u32, then (name: u32 + bytes, rank: u32,
//                                   extents: u64 * rank, values: f64 * count)*
//
// All integers and doubles are little-endian; doubles are raw IEEE-754 bits,
// so a round trip is bit-exact.
struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::vector<std::pair<std::string, std::string>> texts;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
  void put_text(std::string name, std::string value) { texts.emplace_back(std::move(name), std::move(value)); }

  bool has_tensor(std::string_view name) const;
  bool has_text(std::string_view name) const;
  // Missing records raise VersionError: the file does not match the reader.
  const Tensor& tensor(std::string_view name) const;
  const std::string& text(std::string_view name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a; used as the config digest.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace carel::ndgrad
