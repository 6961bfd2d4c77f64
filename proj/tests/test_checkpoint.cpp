#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "t2icount/checkpoint.hpp"
#include "t2icount/config.hpp"

using namespace t2i;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.config = default_config();
  c.state = {{"epoch", 3}, {"step", 42}};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Mat<Real> a(3, 5), b(1, 7);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(rng);
  c.tensors = {{"param/a", a}, {"param/b", b}};
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir dir("t2i_ckpt_roundtrip");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(dir.path / "x.ckpt", c);
  CHECK_FALSE(fs::exists(dir.path / "x.ckpt.tmp"));
  const Checkpoint r = load_checkpoint(dir.path / "x.ckpt");
  CHECK(r.config == c.config);
  CHECK(r.state == c.state);
  REQUIRE(r.tensors.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r.tensors[i].name == c.tensors[i].name);
    CHECK(r.tensors[i].value == c.tensors[i].value);
  }
  REQUIRE(r.find("param/b"));
  CHECK(r.find("param/b")->value.cols() == 7);
  CHECK(r.find("param/zz") == nullptr);
}

TEST_CASE("any corrupted byte or truncation is detected") {
  TempDir dir("t2i_ckpt_corrupt");
  const fs::path good = dir.path / "good.ckpt", bad = dir.path / "bad.ckpt";
  save_checkpoint(good, sample_checkpoint());
  const std::string bytes = slurp(good);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    std::string b = bytes;
    const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, b.size() - 1)(rng);
    b[pos] = static_cast<char>(b[pos] ^ (1 << (trial % 8)));
    spit(bad, b);
    CHECK_THROWS_AS_MESSAGE(load_checkpoint(bad), CheckpointError, "flip at byte " << pos);
  }
  // Equivalent JSON spelling is still a corrupted file.
  std::string e = bytes;
  const auto at = e.find("1e-08");
  REQUIRE(at != std::string::npos);
  e[at + 1] = 'E';
  spit(bad, e);
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    spit(bad, bytes.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  }
  spit(bad, bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.ckpt"), CheckpointError);

  std::string b = bytes;
  b[b.size() - 3] ^= 0x10;
  spit(bad, b);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("payload integrity"), CheckpointError);
}

TEST_CASE("restore_parameters requires every parameter with the right shape") {
  nn::ParameterStore<Real> store;
  store.add("a", Mat<Real>::Zero(3, 5), nn::ParamGroup::Head);
  store.add("b", Mat<Real>::Zero(1, 7), nn::ParamGroup::Denoiser);
  const Checkpoint c = sample_checkpoint();
  restore_parameters(c, store);
  CHECK(store.find("a")->var.value() == c.tensors[0].value);

  Checkpoint missing = c;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(restore_parameters(missing, store), CheckpointError);
  Checkpoint shaped = c;
  shaped.tensors[0].value = Mat<Real>::Zero(5, 3);
  CHECK_THROWS_AS(restore_parameters(shaped, store), CheckpointError);

  Checkpoint out;
  out.config = c.config;
  add_parameters(out, store);
  CHECK(out.find("param/a"));
  CHECK(out.find("param/b"));
}
