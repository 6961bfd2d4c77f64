#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "t2icount/evalrunner.hpp"

using namespace t2i;

namespace {

struct ConstantPredictor final : DensityPredictor {
  double value;
  explicit ConstantPredictor(double v) : value(v) {}
  Grid<Real> predict(const Grid<Real>& image, const std::string&) const override {
    Grid<Real> d(1, image.height / 8, image.width / 8);
    d.data.setConstant(value);
    return d;
  }
};

// Latent cell (y, x) of each window gets the mean of the window's red channel
// over that 8x8 patch; windows therefore disagree only through their content.
struct PatchMeanPredictor final : DensityPredictor {
  Grid<Real> predict(const Grid<Real>& image, const std::string&) const override {
    Grid<Real> d(1, image.height / 8, image.width / 8);
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) d(0, y / 8, x / 8) += image(0, y, x) / 64;
    return d;
  }
};

Grid<Real> random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Grid<Real> g(3, h, w);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) g.data.data()[i] = u(rng);
  return g;
}

}  // namespace

TEST_CASE("window placement") {
  CHECK(window_starts(384, 384) == std::vector<int>{0});
  CHECK(window_starts(768, 384) == std::vector<int>{0, 384});
  CHECK(window_starts(504, 384) == std::vector<int>{0, 120});
  CHECK(padded_extent(500, 384) == 504);
  CHECK(padded_extent(100, 384) == 384);
  CHECK_THROWS_AS(window_starts(100, 384), DimensionError);
}

TEST_CASE("coverage matches brute-force window membership") {
  for (auto [h, w] : {std::pair{504, 384}, std::pair{800, 1000}, std::pair{384, 392}}) {
    const auto cov = window_coverage(h, w, 384);
    const auto ys = window_starts(h, 384), xs = window_starts(w, 384);
    for (int y = 0; y < h / 8; ++y)
      for (int x = 0; x < w / 8; ++x) {
        int n = 0;
        for (int y0 : ys)
          for (int x0 : xs) n += (y * 8 >= y0 && y * 8 < y0 + 384 && x * 8 >= x0 && x * 8 < x0 + 384);
        CHECK(cov(0, y, x) == n);
      }
  }
}

TEST_CASE("single window is the direct forward") {
  const auto img = random_image(384, 384, 1);
  PatchMeanPredictor p;
  const auto direct = p.predict(img, "x");
  const auto tiled = sliding_window_predict(p, img, "x");
  CHECK((tiled.data - direct.data).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("disjoint windows concatenate") {
  const auto img = random_image(768, 384, 2);
  PatchMeanPredictor p;
  const auto tiled = sliding_window_predict(p, img, "x");
  const auto whole = p.predict(img, "x");  // patch means are local, so the full image is the oracle
  CHECK(tiled.height == 96);
  CHECK((tiled.data - whole.data).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("constant density survives overlap averaging") {
  ConstantPredictor p(0.37);
  const auto d = sliding_window_predict(p, random_image(500, 384, 3), "x");
  CHECK(d.height == 63);
  CHECK(d.width == 48);
  CHECK((d.data.array() - 0.37).abs().maxCoeff() <= 1e-12);
  const auto small = sliding_window_predict(p, random_image(37, 50, 4), "x");
  CHECK(small.height == 5);
  CHECK(small.width == 7);
}

TEST_CASE("metrics") {
  const auto m = compute_metrics({{10, 8}, {5, 9}});
  CHECK(m.mae == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(m.rmse == doctest::Approx(std::sqrt(10.0)).epsilon(1e-12));
  CHECK(compute_metrics({{7, 7}}).rmse == 0.0);
  CHECK_THROWS_AS(compute_metrics({}), InputError);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 50);
  for (int k = 0; k < 200; ++k) {
    std::vector<std::pair<double, double>> pairs;
    const int n = 1 + k % 17;
    for (int i = 0; i < n; ++i) pairs.emplace_back(u(rng), u(rng));
    const auto a = compute_metrics(pairs);
    CHECK(a.rmse >= a.mae - 1e-12);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    const auto b = compute_metrics(pairs);
    CHECK(b.mae == doctest::Approx(a.mae).epsilon(1e-12));
    CHECK(b.rmse == doctest::Approx(a.rmse).epsilon(1e-12));
  }
}

TEST_CASE("oracle benchmark scores zero and writes a report") {
  SynthConfig sc;
  sc.train_images = 0;
  sc.val_images = 0;
  sc.test_images = 5;
  const auto samples = synth_minority_samples(synth_images(sc), Split::Test);
  const auto r = run_benchmark(samples, oracle_density(4.0), "synth", "minority");
  CHECK(r.failures == 0);
  CHECK(r.metrics.n == 5);
  CHECK(r.metrics.mae < 1e-9);
  CHECK(r.metrics.rmse < 1e-9);

  const auto dir = std::filesystem::temp_directory_path() / "t2icount_test_report";
  std::filesystem::remove_all(dir);
  write_report(dir, r, "test", "abc");
  std::ifstream in(dir / "summary.json");
  const auto summary = nlohmann::json::parse(in);
  CHECK(summary["n"] == 5);
  CHECK(summary["config_hash"] == "abc");
  std::ifstream rec(dir / "records.jsonl");
  int lines = 0;
  for (std::string line; std::getline(rec, line);) ++lines;
  CHECK(lines == 5);
  std::filesystem::remove_all(dir);

  EvalResult fsc;
  fsc.dataset = "fsc147";
  fsc.prompt_mode = "class";
  const auto table = format_table(fsc, "test");
  CHECK(table.find("97.86") != std::string::npos);
  CHECK(table.find("58.78") != std::string::npos);
}

TEST_CASE("failed images are recorded and excluded") {
  CountingSample good, bad;
  good.id = "a";
  good.pixels = std::make_shared<const Grid<Real>>(3, 16, 16);
  good.points = {{3, 3}};
  good.class_name = "dots";
  bad.id = "b";
  bad.image_path = "/nonexistent/b.png";
  bad.class_name = "dots";
  const auto r = run_benchmark({good, bad}, oracle_density(4.0), "synth", "class");
  CHECK(r.failures == 1);
  CHECK(r.metrics.n == 1);
  CHECK_FALSE(r.per_image[1].error.empty());
}
