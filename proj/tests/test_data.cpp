#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "t2icount/data.hpp"
#include "t2icount/log.hpp"

using namespace t2i;
namespace fs = std::filesystem;

namespace {

std::vector<Point> random_points(int n, int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0, w - 1), uy(0, h - 1);
  std::vector<Point> pts;
  for (int i = 0; i < n; ++i) pts.push_back({ux(rng), uy(rng)});
  return pts;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("t2icount_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Connected components of pixels matching `pred`, 4-neighbourhood.
template <typename Pred>
int count_blobs(const Grid<Real>& img, Pred pred) {
  std::vector<char> seen(static_cast<std::size_t>(img.pixels()), 0);
  int blobs = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (seen[img.index(y, x)] || !pred(img, y, x)) continue;
      ++blobs;
      std::vector<std::pair<int, int>> stack{{y, x}};
      seen[img.index(y, x)] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || nx < 0 || ny >= img.height || nx >= img.width) continue;
          if (seen[img.index(ny, nx)] || !pred(img, ny, nx)) continue;
          seen[img.index(ny, nx)] = 1;
          stack.push_back({ny, nx});
        }
      }
    }
  return blobs;
}

}  // namespace

TEST_CASE("rasterized density has unit mass per point") {
  CHECK(rasterize_density({}, 32, 32, 4).data.cwiseAbs().maxCoeff() == 0.0);
  for (double sigma : {0.5, 1.0, 4.0, 15.0}) {
    CHECK(rasterize_density({{0, 0}}, 40, 30, sigma).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rasterize_density({{17.3, 5.8}}, 40, 30, sigma).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::mt19937_64 rng(1);
  const auto pts = random_points(50, 384, 384, rng);
  CHECK(std::abs(rasterize_density(pts, 384, 384, 4).sum() - 50) <= 0.05);
  CHECK(rasterize_density(pts, 384, 384, 4).data.minCoeff() >= 0.0);
  CHECK_THROWS_AS(rasterize_density(pts, 384, 384, 0), InputError);
}

TEST_CASE("rasterized mass sits at the point") {
  const auto d = rasterize_density({{10, 20}}, 40, 40, 2.0);
  Eigen::Index arg;
  d.data.row(0).maxCoeff(&arg);
  CHECK(arg == d.index(20, 10));
  // first moment oracle: the kernel is symmetric and untruncated here
  double mx = 0, my = 0;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      mx += x * d(0, y, x);
      my += y * d(0, y, x);
    }
  CHECK(mx == doctest::Approx(10.0));
  CHECK(my == doctest::Approx(20.0));
}

TEST_CASE("sum pooling conserves mass") {
  std::mt19937_64 rng(2);
  const auto d = rasterize_density(random_points(30, 384, 384, rng), 384, 384, 4);
  const auto p = pool_density(d, 8);
  CHECK(p.height == 48);
  CHECK(p.width == 48);
  CHECK(std::abs(p.sum() - d.sum()) < 1e-6);

  Grid<Real> u(1, 16, 16);
  u.data.setConstant(0.25);
  CHECK((pool_density(u, 8).data.array() - 16.0).abs().maxCoeff() < 1e-12);

  Grid<Real> delta(1, 16, 16);
  delta(0, 8, 8) = 1;
  CHECK(pool_density(delta, 8)(0, 1, 1) == 1.0);
  CHECK_THROWS_AS(pool_density(Grid<Real>(1, 12, 16), 8), DimensionError);
}

TEST_CASE("mass conservation across point counts") {
  std::mt19937_64 rng(3);
  for (int n : {1, 10, 200}) {
    const auto d = rasterize_density(random_points(n, 64, 96, rng), 64, 96, 4);
    CHECK(std::abs(d.sum() - n) <= 1e-3 * n);
    CHECK(std::abs(pool_density(d, 8).sum() - d.sum()) <= 1e-6);
  }
}

TEST_CASE("geometric augmentation pieces") {
  std::mt19937_64 rng(4);
  Grid<Real> img(3, 384, 384);
  img.data.setRandom();
  const std::vector<Point> pts{{10, 20}, {383, 0}, {100.5, 200.25}};

  const auto same = crop(rescale(img, pts, 1.0).image, pts, 0, 0, 384, 384);
  CHECK(same.points == pts);
  CHECK(same.image.data == img.data);

  const auto big = rescale(img, pts, 2.0);
  CHECK(big.image.height == 768);
  CHECK(big.points[0] == Point{20, 40});

  const auto flipped = hflip(img, pts);
  CHECK(flipped.points[0] == Point{373, 20});
  CHECK(flipped.image(1, 5, 0) == img(1, 5, 383));
  CHECK(hflip(flipped.image, flipped.points).image.data == img.data);

  const auto c = crop(img, pts, 10, 5, 64, 64);
  REQUIRE(c.points.size() == 1);
  CHECK(c.points[0] == Point{5, 10});
  CHECK(c.image(2, 0, 0) == img(2, 10, 5));
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Grid<Real> img(1, 2, 3);
  img.data << 1, 2, 3, 4, 5, 6;
  const auto p = reflect_pad(img, 4, 6);
  // oracle: index i maps to i for i < n, else 2(n-1) - i, periodically
  const int rows[] = {0, 1, 0, 1};
  const int cols[] = {0, 1, 2, 1, 0, 1};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) CHECK(p(0, y, x) == img(0, rows[y], cols[x]));
  CHECK_THROWS_AS(reflect_pad(img, 1, 6), DimensionError);
}

TEST_CASE("augmentation keeps points consistent with pixels") {
  SynthConfig sc;
  sc.train_images = 6;
  sc.val_images = sc.test_images = 0;
  const auto images = synth_images(sc);
  AugmentConfig ac;
  ac.crop = 96;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    std::mt19937_64 rng(seed);
    const auto& im = images[seed % images.size()];
    const auto a = augment(*im.pixels, im.points[0], ac, rng);
    CHECK(a.image.height == 96);
    CHECK(a.image.width == 96);
    CHECK(a.image.data.minCoeff() >= 0.0);
    CHECK(a.image.data.maxCoeff() <= 1.0);
    const auto d = rasterize_density(a.points, 96, 96, 4);
    CHECK(d.sum() == doctest::Approx(static_cast<double>(a.points.size())).epsilon(1e-9));
    // every kept point lands on a reddish pixel (disc centers survive rescale/crop/flip)
    for (const auto& p : a.points) {
      const int x = static_cast<int>(std::lround(p.x)), y = static_cast<int>(std::lround(p.y));
      if (x < 1 || y < 1 || x > 94 || y > 94) continue;
      const double r = a.image(0, y, x), b = a.image(2, y, x);
      CHECK(r > b);
    }
  }
  std::mt19937_64 rng(1);
  ac.crop = 100;
  CHECK_THROWS_AS(augment(*images[0].pixels, {}, ac, rng), ConfigError);
}

TEST_CASE("augmentation pads small images up to the crop") {
  std::mt19937_64 rng(5);
  Grid<Real> img(3, 40, 48);
  img.data.setConstant(0.5);
  AugmentConfig ac;
  ac.crop = 128;
  ac.scale_min = ac.scale_max = 1.0;
  ac.brightness = ac.contrast = ac.saturation = 0;
  const auto a = augment(img, {{10, 10}}, ac, rng);
  CHECK(a.image.height == 128);
  CHECK(a.points.size() >= 1);
}

TEST_CASE("synthetic corpus") {
  SynthConfig sc;
  sc.train_images = 10;
  sc.val_images = 4;
  sc.test_images = 6;
  sc.seed = 42;
  const auto a = synth_images(sc);
  const auto b = synth_images(sc);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].pixels->data == b[i].pixels->data);
    CHECK(a[i].points[0] == b[i].points[0]);
    const auto minority = a[i].points[a[i].minority_class()].size();
    const auto majority = a[i].points[a[i].majority_class].size();
    CHECK(minority >= 1);
    CHECK(minority <= 5);
    CHECK(majority >= 15);
    CHECK(majority <= 45);
    const auto& img = *a[i].pixels;
    const int discs = count_blobs(img, [](const Grid<Real>& g, int y, int x) { return g(0, y, x) > 0.7 && g(2, y, x) < 0.4; });
    const int squares = count_blobs(img, [](const Grid<Real>& g, int y, int x) { return g(2, y, x) > 0.7 && g(0, y, x) < 0.4; });
    CHECK(discs == static_cast<int>(a[i].points[0].size()));
    CHECK(squares == static_cast<int>(a[i].points[1].size()));
  }
  CHECK(synth_samples(a, Split::Train).size() == 20);
  CHECK(synth_minority_samples(a, Split::Test).size() == 6);
  sc.seed = 43;
  CHECK(synth_images(sc)[0].pixels->data != a[0].pixels->data);
}

TEST_CASE("FSC-147 layout round trip through the synthetic writer") {
  SynthConfig sc;
  sc.train_images = 5;
  sc.val_images = 3;
  sc.test_images = 4;
  const auto images = synth_images(sc);
  const auto root = scratch_dir("fsc");
  write_synth_corpus(root, images);

  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& m) { warnings.push_back(m); });
  const auto train = load_fsc147(root, Split::Train);
  const auto val = load_fsc147(root, Split::Val);
  CHECK(train.size() == 5);
  CHECK(val.size() == 3);
  CHECK(warnings.size() == 2);  // sizes differ from the public release
  CHECK(std::is_sorted(train.begin(), train.end(), [](const auto& x, const auto& y) { return x.id < y.id; }));
  const auto again = load_fsc147(root, Split::Train);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(again[i].points == train[i].points);
  CHECK(train[0].class_name == synth_classes()[images[0].majority_class]);
  const auto loaded = load(train[0]);
  CHECK(loaded.image.height == sc.image_size);
  CHECK(std::abs(loaded.image.data.maxCoeff() - images[0].pixels->data.maxCoeff()) < 1.0 / 255);

  const auto minority = load_fsc147s(root / "minority.json", root);
  REQUIRE(minority.size() == 4);
  for (const auto& s : minority) {
    CHECK(s.points.size() >= 1);
    CHECK(s.points.size() <= 5);
  }

  std::ofstream(root / "empty.json") << "[]";
  warnings.clear();
  CHECK(load_fsc147s(root / "empty.json", root).empty());
  CHECK(warnings.size() == 1);
  std::ofstream(root / "bad.json") << R"([{"image_id": "nope.png", "minority_class": "dots", "points": [[1, 2]]}])";
  CHECK_THROWS_AS(load_fsc147s(root / "bad.json", root), IngestionError);
  CHECK_THROWS_AS(load_fsc147(root / "missing", Split::Train), IngestionError);
  CHECK_THROWS_AS(parse_split("holdout"), InputError);
  fs::remove_all(root);
}

TEST_CASE("points outside the image are clamped with a warning") {
  CountingSample s;
  s.id = "x";
  s.pixels = std::make_shared<const Grid<Real>>(3, 16, 16);
  s.points = {{-3, 4}, {8, 20}, {5, 5}};
  int warnings = 0;
  ScopedWarningSink sink([&](const std::string&) { ++warnings; });
  const auto l = load(s);
  CHECK(warnings == 1);
  CHECK(l.points[0] == Point{0, 4});
  CHECK(l.points[1] == Point{8, 15});
  CHECK(l.points[2] == Point{5, 5});
}

TEST_CASE("CARPK boxes become centers") {
  CHECK(box_center(10, 10, 30, 30) == Point{20, 20});
  const auto root = scratch_dir("carpk");
  fs::create_directories(root / "ImageSets");
  fs::create_directories(root / "Annotations");
  std::ofstream(root / "ImageSets" / "test.txt") << "b\na\n";
  std::ofstream(root / "Annotations" / "a.txt") << "10 10 30 30 1\n0 0 4 8 1\n";
  std::ofstream(root / "Annotations" / "b.txt") << "1 2 3\n5 5 7 9 1\n\n";
  int warnings = 0;
  ScopedWarningSink sink([&](const std::string&) { ++warnings; });
  const auto samples = load_carpk(root, Split::Test);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].id == "a");
  CHECK(samples[0].points == std::vector<Point>{{20, 20}, {2, 4}});
  CHECK(samples[1].points == std::vector<Point>{{6, 7}});
  CHECK(warnings == 1);
  for (const auto& s : samples) CHECK(s.class_name == "cars");
  CHECK_THROWS_AS(load_carpk(root, Split::Train), IngestionError);
  fs::remove_all(root);
}
