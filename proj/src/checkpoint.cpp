#include "kinedec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kinedec::checkpoint {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'E', 'C'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string path;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(path + ": " + what);
  }
  void need(size_t n) const {
    if (pos + n > buf.size()) fail("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(uint64_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& Checkpoint::at(const std::string& name) const {
  const NamedArray* a = find(name);
  if (!a) throw std::out_of_range("checkpoint has no array named '" + name + "'");
  return *a;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, ckpt.metadata.size());
  out += ckpt.metadata;
  put_u64(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    uint64_t n = 1;
    for (int64_t d : a.shape) {
      if (d < 1) throw std::invalid_argument("checkpoint array '" + a.name +
                                             "' has a non-positive dimension");
      n *= static_cast<uint64_t>(d);
    }
    if (n != a.values.size())
      throw std::invalid_argument("checkpoint array '" + a.name + "' has " +
                                  std::to_string(a.values.size()) + " values for " +
                                  std::to_string(n) + " slots");
    put_u64(out, a.name.size());
    out += a.name;
    put_u64(out, a.shape.size());
    for (int64_t d : a.shape) put_u64(out, static_cast<uint64_t>(d));
    for (double v : a.values) put_f64(out, v);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf, 0, path.string()};
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    r.fail("not a checkpoint file (bad magic)");
  r.pos = 4;
  const uint32_t version = r.u32();
  if (version != kVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.metadata = r.bytes(r.u64());
  const uint64_t count = r.u64();
  ckpt.arrays.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.u64());
    const uint64_t rank = r.u64();
    if (rank > 16) r.fail("array '" + a.name + "' has implausible rank");
    uint64_t n = 1;
    for (uint64_t d = 0; d < rank; ++d) {
      const uint64_t dim = r.u64();
      if (dim == 0) r.fail("array '" + a.name + "' has a zero dimension");
      a.shape.push_back(static_cast<int64_t>(dim));
      n *= dim;
    }
    r.need(n * 8);
    a.values.reserve(n);
    for (uint64_t v = 0; v < n; ++v) a.values.push_back(r.f64());
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.pos != buf.size()) r.fail("trailing bytes after checkpoint payload");
  return ckpt;
}

}  // namespace kinedec::checkpoint
