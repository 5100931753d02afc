#pragma once

// Checkpoint container: magic "PCD1", then
//   u64 array_count
//   per array: u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f64 data (row-major)
//   u64 meta_len, meta bytes (UTF-8 key = value text)
// All integers and floats little-endian.

#include <map>
#include <string>

#include "pcd/autodiff.hpp"

namespace pcd {

struct Checkpoint {
  std::map<std::string, ad::Matrix> arrays;
  std::string meta;

  std::string encode() const;
  static Checkpoint decode(const std::string& bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace pcd
