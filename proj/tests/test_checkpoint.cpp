#include <bit>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "doctest.h"
#include "kinedec/checkpoint.hpp"

using namespace kinedec::checkpoint;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / (stem + std::to_string(::getpid()) + ".ckpt");
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& stem) : path(temp_file(stem)) {}
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
};

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip preserves every bit") {
  Checkpoint ckpt;
  ckpt.metadata = R"({"epoch":3,"note":"best"})";
  ckpt.arrays.push_back({"w", {2, 3}, {1.0, -0.0, 1e-300, DBL_MIN * 0.5, -DBL_MAX, 0.1 + 0.2}});
  ckpt.arrays.push_back({"b", {4}, {0.0, -1.0, 3.5, 1.0 / 3.0}});

  TempFile tf("ckpt_roundtrip_");
  save_checkpoint(tf.path, ckpt);
  const Checkpoint back = load_checkpoint(tf.path);

  CHECK(back.metadata == ckpt.metadata);
  REQUIRE(back.arrays.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back.arrays[i].name == ckpt.arrays[i].name);
    CHECK(back.arrays[i].shape == ckpt.arrays[i].shape);
    REQUIRE(back.arrays[i].values.size() == ckpt.arrays[i].values.size());
    for (size_t j = 0; j < back.arrays[i].values.size(); ++j) {
      const uint64_t got = std::bit_cast<uint64_t>(back.arrays[i].values[j]);
      const uint64_t want = std::bit_cast<uint64_t>(ckpt.arrays[i].values[j]);
      CHECK(got == want);
    }
  }
  CHECK(std::signbit(back.arrays[0].values[1]));
}

TEST_CASE("saving the same contents twice produces identical bytes") {
  Checkpoint ckpt;
  ckpt.metadata = "{}";
  ckpt.arrays.push_back({"p", {3}, {0.25, -7.0, 2e-17}});

  TempFile a("ckpt_bytes_a_");
  TempFile b("ckpt_bytes_b_");
  save_checkpoint(a.path, ckpt);
  save_checkpoint(b.path, ckpt);
  CHECK(slurp(a.path) == slurp(b.path));

  const Checkpoint back = load_checkpoint(a.path);
  TempFile c("ckpt_bytes_c_");
  save_checkpoint(c.path, back);
  CHECK(slurp(c.path) == slurp(a.path));
}

TEST_CASE("find and at") {
  Checkpoint ckpt;
  ckpt.arrays.push_back({"w1", {1}, {2.0}});
  CHECK(ckpt.find("w1") != nullptr);
  CHECK(ckpt.find("nope") == nullptr);
  CHECK(ckpt.at("w1").values[0] == 2.0);
  CHECK_THROWS_WITH_AS(ckpt.at("nope"), doctest::Contains("nope"), std::out_of_range);
}

TEST_CASE("value count must match the shape") {
  Checkpoint ckpt;
  ckpt.arrays.push_back({"w", {2, 2}, {1.0, 2.0, 3.0}});
  TempFile tf("ckpt_badcount_");
  CHECK_THROWS_AS(save_checkpoint(tf.path, ckpt), std::invalid_argument);
}

TEST_CASE("rejects foreign and damaged files") {
  TempFile tf("ckpt_damage_");

  SUBCASE("bad magic") {
    std::ofstream f(tf.path, std::ios::binary);
    f << "NOPE this is not a checkpoint";
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tf.path), doctest::Contains("magic"),
                         std::runtime_error);
  }

  SUBCASE("unsupported version") {
    Checkpoint ckpt;
    save_checkpoint(tf.path, ckpt);
    std::string bytes = slurp(tf.path);
    bytes[4] = 9;
    std::ofstream f(tf.path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tf.path), doctest::Contains("version"),
                         std::runtime_error);
  }

  SUBCASE("truncated payload") {
    Checkpoint ckpt;
    ckpt.arrays.push_back({"w", {8}, std::vector<double>(8, 1.5)});
    save_checkpoint(tf.path, ckpt);
    std::string bytes = slurp(tf.path);
    bytes.resize(bytes.size() - 11);
    std::ofstream f(tf.path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tf.path), doctest::Contains("truncated"),
                         std::runtime_error);
  }

  SUBCASE("trailing garbage") {
    Checkpoint ckpt;
    save_checkpoint(tf.path, ckpt);
    std::ofstream f(tf.path, std::ios::binary | std::ios::app);
    f << "extra";
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tf.path), doctest::Contains("trailing"),
                         std::runtime_error);
  }

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(tf.path / "does_not_exist.ckpt"), std::runtime_error);
  }
}

TEST_CASE("empty checkpoint is valid") {
  TempFile tf("ckpt_empty_");
  Checkpoint ckpt;
  save_checkpoint(tf.path, ckpt);
  const Checkpoint back = load_checkpoint(tf.path);
  CHECK(back.metadata.empty());
  CHECK(back.arrays.empty());
}

}
