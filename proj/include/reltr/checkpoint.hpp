#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reltr/tensor.hpp"

namespace reltr {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

/// Binary layout, little-endian:
///   "RELTRCKP" u32 version
///   u64 metadata length, metadata as JSON text
///   u64 array count, then per array:
///     u32 name length, name, u32 rank, u64 dims[rank], f64 data[numel]
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws std::runtime_error on any malformed or truncated input.
Checkpoint decode_checkpoint(const std::string& bytes);

/// Written to a sibling temp file, then renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes text to path through a temp file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace reltr
