#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "speechchain/checkpoint.hpp"
#include "speechchain/rng.hpp"

using namespace speechchain;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* stem) {
  return fs::temp_directory_path() / (std::string(stem) + "_" +
                                      std::to_string(::getpid()) + ".ckpt");
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(99);
  Checkpoint out;
  out.seed = 424242;
  out.step = 17;
  Tensor a({3, 4});
  for (double& v : a.data) v = rng.normal();
  Tensor b({7});
  for (double& v : b.data) v = rng.uniform(-1e10, 1e10);
  b.data[0] = 0.1;  // not exactly representable; must survive unchanged
  b.data[1] = -0.0;
  out.add("enc/W", a);
  out.add("dec/b", b);

  const fs::path path = temp_file("roundtrip");
  save_checkpoint(out, path);
  Checkpoint in = load_checkpoint(path);
  fs::remove(path);

  REQUIRE(in.seed == 424242);
  REQUIRE(in.step == 17);
  REQUIRE(in.entries.size() == 2);
  REQUIRE(in.entries[0].name == "enc/W");
  REQUIRE(in.entries[1].name == "dec/b");
  REQUIRE(bit_equal(in.entries[0].tensor, a));
  REQUIRE(bit_equal(in.entries[1].tensor, b));
  REQUIRE(std::signbit(in.entries[1].tensor.data[1]));
}

TEST_CASE("checkpoint rejects foreign files") {
  const fs::path path = temp_file("foreign");
  {
    std::ofstream os(path, std::ios::binary);
    os << "definitely not a checkpoint";
  }
  REQUIRE_THROWS(load_checkpoint(path));
  fs::remove(path);
  REQUIRE_THROWS(load_checkpoint(path));  // missing file
}

TEST_CASE("checkpoint find by name") {
  Checkpoint c;
  c.add("x", Tensor({2}, 1.0));
  REQUIRE(c.find("x") != nullptr);
  REQUIRE(c.find("y") == nullptr);
}
