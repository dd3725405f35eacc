#include <doctest.h>

#include <fstream>

#include "clipvs/checkpoint.hpp"
#include "clipvs/errors.hpp"
#include "fixtures.hpp"

using namespace clipvs;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

Archive sample() {
  nn::Rng rng(1);
  Archive a;
  a.meta = {{"kind", "test"}, {"step", 7}};
  a.put("a", Tensor::randn({2, 3}, 1.0, rng));
  a.put("b", Tensor({4}, std::vector<double>{1e-300, -0.0, 3.5, 1e300}));
  a.put("empty", Tensor({0, 5}));
  return a;
}

}  // namespace

TEST_CASE("archive round trip is exact") {
  fixture::TempDir dir("archive");
  const Archive a = sample();
  save_archive(dir.path() / "a.ck", a);
  const Archive b = load_archive(dir.path() / "a.ck");
  CHECK(b.meta["kind"] == "test");
  CHECK(b.meta["step"] == 7);
  REQUIRE(b.tensors().size() == 3);
  for (const auto& [name, t] : a.tensors()) CHECK(b.get(name) == t);
  save_archive(dir.path() / "b.ck", b);
  CHECK(slurp(dir.path() / "a.ck") == slurp(dir.path() / "b.ck"));
  CHECK_THROWS_AS(b.get("missing"), IntegrityError);
  CHECK(slurp(dir.path() / "a.ck").substr(0, 8) == "CLIPVSCK");
}

TEST_CASE("damaged archives are rejected") {
  fixture::TempDir dir("archive_bad");
  const fs::path good = dir.path() / "good.ck";
  save_archive(good, sample());
  const std::string bytes = slurp(good);

  std::string magic = bytes;
  magic[0] = 'X';
  spit(dir.path() / "magic.ck", magic);
  CHECK_THROWS_AS(load_archive(dir.path() / "magic.ck"), IntegrityError);

  std::string version = bytes;
  version[8] = 9;
  spit(dir.path() / "version.ck", version);
  CHECK_THROWS_AS(load_archive(dir.path() / "version.ck"), IntegrityError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{14}, std::size_t{30}, bytes.size() - 1}) {
    spit(dir.path() / "cut.ck", bytes.substr(0, cut));
    CHECK_THROWS_AS(load_archive(dir.path() / "cut.ck"), IntegrityError);
  }
  CHECK_THROWS(load_archive(dir.path() / "absent.ck"));
}

TEST_CASE("parameter sets restore in place") {
  nn::Rng rng(2);
  nn::ParameterSet src, dst;
  src.add("w", Tensor::randn({3, 2}, 1.0, rng));
  src.add("b", Tensor::randn({2}, 1.0, rng));
  dst.add("w", Tensor({3, 2}));
  dst.add("b", Tensor({2}));
  Archive a;
  a.put_parameters(src, "model.");
  CHECK(a.contains("model.w"));
  a.load_parameters(dst, "model.");
  CHECK(dst.hash() == src.hash());

  nn::ParameterSet wrong;
  wrong.add("w", Tensor({2, 3}));
  CHECK_THROWS_AS(a.load_parameters(wrong, "model."), IntegrityError);
  nn::ParameterSet extra;
  extra.add("z", Tensor({1}));
  CHECK_THROWS_AS(a.load_parameters(extra, "model."), IntegrityError);
}
