#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace kinedec::checkpoint {

struct NamedArray {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> values;  // size = product of shape
};

// Versioned binary container of named, shape-tagged double arrays plus a
// free-form JSON metadata string. Layout (all integers little-endian):
//
//   "KDEC"              4-byte magic
//   version             u32 (currently 1)
//   metadata length     u64, then that many UTF-8 bytes
//   array count         u64
//   per array:
//     name length       u64, then the name bytes
//     rank              u64, then rank u64 dimensions
//     values            product-of-dims f64, IEEE-754 bit patterns
//
// Doubles travel as uint64 bit patterns, so a write/read round trip is
// bit-exact including negative zero and subnormals.
struct Checkpoint {
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  // Throws std::out_of_range naming the missing array.
  const NamedArray& at(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kinedec::checkpoint
