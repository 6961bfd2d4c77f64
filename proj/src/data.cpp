#include "t2icount/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "t2icount/errors.hpp"
#include "t2icount/hash.hpp"
#include "t2icount/imageio.hpp"
#include "t2icount/log.hpp"
#include "t2icount/resample.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t2i {

namespace {

constexpr const char* kFscImages = "images_384_VarV2";
constexpr const char* kFscAnnotations = "annotation_FSC147_384.json";
constexpr const char* kFscSplits = "Train_Test_Val_FSC_147.json";
constexpr const char* kFscClasses = "ImageClasses_FSC147.txt";

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IngestionError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::vector<Point> parse_points(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw IngestionError(where + ": points must be an array");
  std::vector<Point> pts;
  pts.reserve(arr.size());
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() < 2 || !p[0].is_number() || !p[1].is_number())
      throw IngestionError(where + ": point is not [x, y]");
    pts.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return pts;
}

json points_json(const std::vector<Point>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

std::map<std::string, std::string> read_fsc_classes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::map<std::string, std::string> classes;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    classes[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return classes;
}

}  // namespace

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InputError("unknown split '" + s + "' (expected train, val or test)");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "?";
}

Grid<Real> CountingSample::image() const { return pixels ? *pixels : read_image(image_path); }

LoadedSample load(const CountingSample& s) {
  LoadedSample out{s.id, s.image(), s.points, s.class_name};
  const double max_x = out.image.width - 1, max_y = out.image.height - 1;
  std::size_t clamped = 0;
  for (auto& p : out.points) {
    const Point q{std::clamp(p.x, 0.0, max_x), std::clamp(p.y, 0.0, max_y)};
    if (!(q == p)) ++clamped;
    p = q;
  }
  if (clamped) warn(s.id + ": clamped " + std::to_string(clamped) + " point(s) outside the image");
  return out;
}

// ---------------------------------------------------------------- loaders

std::vector<CountingSample> load_fsc147(const fs::path& root, Split split) {
  const json annotations = read_json(root / kFscAnnotations);
  const json splits = read_json(root / kFscSplits);
  const auto classes = read_fsc_classes(root / kFscClasses);
  const std::string key = to_string(split);
  if (!splits.contains(key)) throw IngestionError((root / kFscSplits).string() + ": no '" + key + "' list");

  std::vector<std::string> names = splits[key].get<std::vector<std::string>>();
  std::sort(names.begin(), names.end());
  std::vector<CountingSample> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    if (!annotations.contains(name)) throw IngestionError(name + ": missing from " + std::string(kFscAnnotations));
    const auto cls = classes.find(name);
    if (cls == classes.end() || cls->second.empty())
      throw IngestionError(name + ": no class in " + std::string(kFscClasses));
    CountingSample s;
    s.id = name;
    s.image_path = (root / kFscImages / name).string();
    s.points = parse_points(annotations[name].at("points"), name);
    s.class_name = cls->second;
    s.split = split;
    s.source = "fsc147";
    out.push_back(std::move(s));
  }

  static const std::map<Split, std::size_t> expected{{Split::Train, 3659}, {Split::Val, 1286}, {Split::Test, 1190}};
  if (out.size() != expected.at(split))
    warn("FSC-147 " + key + " split has " + std::to_string(out.size()) + " images (public release: " +
         std::to_string(expected.at(split)) + ")");
  return out;
}

std::vector<CountingSample> load_fsc147s(const fs::path& file, const fs::path& fsc_root) {
  const json records = read_json(file);
  if (!records.is_array()) throw IngestionError(file.string() + ": expected an array of records");
  std::vector<CountingSample> out;
  for (const auto& r : records) {
    CountingSample s;
    s.id = r.at("image_id").get<std::string>();
    s.image_path = (fsc_root / kFscImages / s.id).string();
    if (!fs::exists(s.image_path)) throw IngestionError(s.id + ": image not found at " + s.image_path);
    s.class_name = r.at("minority_class").get<std::string>();
    if (s.class_name.empty()) throw IngestionError(s.id + ": empty minority_class");
    s.points = parse_points(r.at("points"), s.id);
    if (s.points.empty()) throw IngestionError(s.id + ": minority annotation has no points");
    s.split = Split::Test;
    s.source = "fsc147s";
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  if (out.empty()) warn(file.string() + ": no minority records");
  else if (out.size() != 196)
    warn("FSC-147-S has " + std::to_string(out.size()) + " records (published subset: 196)");
  return out;
}

Point box_center(double x1, double y1, double x2, double y2) { return {(x1 + x2) / 2, (y1 + y2) / 2}; }

std::vector<CountingSample> load_carpk(const fs::path& root, Split split) {
  if (split == Split::Val) throw InputError("CARPK has no val split");
  const fs::path list = root / "ImageSets" / (to_string(split) + ".txt");
  std::ifstream in(list);
  if (!in) throw IngestionError("cannot open " + list.string());
  std::vector<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ss(line);
    std::string id;
    if (ss >> id) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());

  std::vector<CountingSample> out;
  for (const auto& id : ids) {
    const fs::path ann = root / "Annotations" / (id + ".txt");
    std::ifstream a(ann);
    if (!a) throw IngestionError("cannot open " + ann.string());
    CountingSample s;
    s.id = id;
    s.image_path = (root / "Images" / (id + ".png")).string();
    s.class_name = "cars";
    s.split = split;
    s.source = "carpk";
    int line_no = 0;
    for (std::string line; std::getline(a, line);) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ss(line);
      double x1, y1, x2, y2;
      if (!(ss >> x1 >> y1 >> x2 >> y2) || x2 < x1 || y2 < y1) {
        warn(ann.string() + ":" + std::to_string(line_no) + ": malformed box skipped");
        continue;
      }
      s.points.push_back(box_center(x1, y1, x2, y2));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- densities

Grid<Real> rasterize_density(const std::vector<Point>& points, int height, int width, double sigma) {
  if (!(sigma > 0)) throw InputError("rasterize_density: sigma must be positive");
  Grid<Real> d(1, height, width);
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel;
  for (const auto& p : points) {
    const int cx = static_cast<int>(std::lround(std::clamp(p.x, 0.0, width - 1.0)));
    const int cy = static_cast<int>(std::lround(std::clamp(p.y, 0.0, height - 1.0)));
    const int y0 = std::max(0, cy - radius), y1 = std::min(height - 1, cy + radius);
    const int x0 = std::max(0, cx - radius), x1 = std::min(width - 1, cx + radius);
    kernel.assign(static_cast<std::size_t>(y1 - y0 + 1) * (x1 - x0 + 1), 0.0);
    double total = 0;
    std::size_t k = 0;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - p.x, dy = y - p.y;
        kernel[k] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        total += kernel[k++];
      }
    if (!(total > 0)) {
      d(0, cy, cx) += 1;
      continue;
    }
    k = 0;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) d(0, y, x) += kernel[k++] / total;
  }
  return d;
}

Grid<Real> pool_density(const Grid<Real>& density, int factor) {
  return apply(density, *sum_pool_operator<Real>(density.height, density.width, factor));
}

// ---------------------------------------------------------------- augmentation

Grid<Real> reflect_pad(const Grid<Real>& image, int out_h, int out_w) {
  if (out_h < image.height || out_w < image.width) throw DimensionError("reflect_pad: target smaller than image");
  if (out_h == image.height && out_w == image.width) return image;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Grid<Real> out(image.channels(), out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = reflect(y, image.height);
    for (int x = 0; x < out_w; ++x) out.data.col(out.index(y, x)) = image.data.col(image.index(sy, reflect(x, image.width)));
  }
  return out;
}

namespace {

// Mirrored copies of the points that land in the padded band.
std::vector<Point> reflect_points(const std::vector<Point>& points, int h, int w, int out_h, int out_w) {
  std::vector<Point> out = points;
  for (const auto& p : points) {
    const double mx = 2.0 * (w - 1) - p.x, my = 2.0 * (h - 1) - p.y;
    const bool x_ok = out_w > w && mx > w - 1 && mx < out_w;
    const bool y_ok = out_h > h && my > h - 1 && my < out_h;
    if (x_ok) out.push_back({mx, p.y});
    if (y_ok) out.push_back({p.x, my});
    if (x_ok && y_ok) out.push_back({mx, my});
  }
  return out;
}

}  // namespace

AugmentedSample rescale(const Grid<Real>& image, const std::vector<Point>& points, double factor) {
  if (!(factor > 0)) throw InputError("rescale: factor must be positive");
  const int h = std::max(1, static_cast<int>(std::lround(image.height * factor)));
  const int w = std::max(1, static_cast<int>(std::lround(image.width * factor)));
  AugmentedSample out{resize_image(image, h, w), points};
  for (auto& p : out.points) p = {p.x * factor, p.y * factor};
  return out;
}

AugmentedSample crop(const Grid<Real>& image, const std::vector<Point>& points, int top, int left, int size_h,
                     int size_w) {
  if (top < 0 || left < 0 || top + size_h > image.height || left + size_w > image.width)
    throw DimensionError("crop: window outside the image");
  AugmentedSample out;
  out.image = Grid<Real>(image.channels(), size_h, size_w);
  for (int y = 0; y < size_h; ++y)
    out.image.data.middleCols(out.image.index(y, 0), size_w) = image.data.middleCols(image.index(top + y, left), size_w);
  for (const auto& p : points) {
    const Point q{p.x - left, p.y - top};
    if (q.x >= 0 && q.y >= 0 && q.x < size_w && q.y < size_h) out.points.push_back(q);
  }
  return out;
}

AugmentedSample hflip(const Grid<Real>& image, const std::vector<Point>& points) {
  AugmentedSample out{Grid<Real>(image.channels(), image.height, image.width), points};
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      out.image.data.col(out.image.index(y, x)) = image.data.col(image.index(y, image.width - 1 - x));
  for (auto& p : out.points) p.x = image.width - 1 - p.x;
  return out;
}

AugmentedSample augment(const Grid<Real>& image, const std::vector<Point>& points, const AugmentConfig& config,
                        std::mt19937_64& rng) {
  if (!config.enabled) return {image, points};
  if (config.crop <= 0 || config.crop % 8 != 0) throw ConfigError("data.augment.crop must be a positive multiple of 8");
  if (!(config.scale_min > 0) || config.scale_max < config.scale_min)
    throw ConfigError("data.augment: need 0 < scale_min <= scale_max");
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double factor = config.scale_min + (config.scale_max - config.scale_min) * unit(rng);
  AugmentedSample s = rescale(image, points, factor);

  const int c = config.crop;
  if (s.image.height < c || s.image.width < c) {
    const int h = std::max(c, s.image.height), w = std::max(c, s.image.width);
    s.points = reflect_points(s.points, s.image.height, s.image.width, h, w);
    s.image = reflect_pad(s.image, h, w);
  }
  const int top = std::uniform_int_distribution<int>(0, s.image.height - c)(rng);
  const int left = std::uniform_int_distribution<int>(0, s.image.width - c)(rng);
  s = crop(s.image, s.points, top, left, c, c);

  if (unit(rng) < config.flip_prob) s = hflip(s.image, s.points);

  auto jitter = [&](double amount) { return 1.0 + amount * (2 * unit(rng) - 1); };
  const double b = jitter(config.brightness), k = jitter(config.contrast), sat = jitter(config.saturation);
  auto& px = s.image.data;
  px *= b;
  const double mean = px.mean();
  px = ((px.array() - mean) * k + mean).matrix();
  const RowVec<Real> gray = 0.299 * px.row(0) + 0.587 * px.row(1) + 0.114 * px.row(2);
  for (int ch = 0; ch < 3; ++ch) px.row(ch) = gray + sat * (px.row(ch) - gray);
  px = px.cwiseMax(0.0).cwiseMin(1.0);
  return s;
}

// ---------------------------------------------------------------- synthetic corpus

namespace {

void draw_disc(Grid<Real>& img, const Point& c, double r, const std::array<double, 3>& color) {
  const int y0 = std::max(0, static_cast<int>(std::floor(c.y - r))), y1 = std::min(img.height - 1, static_cast<int>(std::ceil(c.y + r)));
  const int x0 = std::max(0, static_cast<int>(std::floor(c.x - r))), x1 = std::min(img.width - 1, static_cast<int>(std::ceil(c.x + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y) <= r * r)
        for (int ch = 0; ch < 3; ++ch) img(ch, y, x) = color[ch];
}

void draw_square_outline(Grid<Real>& img, const Point& c, double half, const std::array<double, 3>& color) {
  const int y0 = std::max(0, static_cast<int>(std::lround(c.y - half))), y1 = std::min(img.height - 1, static_cast<int>(std::lround(c.y + half)));
  const int x0 = std::max(0, static_cast<int>(std::lround(c.x - half))), x1 = std::min(img.width - 1, static_cast<int>(std::lround(c.x + half)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (y <= y0 + 1 || y >= y1 - 1 || x <= x0 + 1 || x >= x1 - 1)
        for (int ch = 0; ch < 3; ++ch) img(ch, y, x) = color[ch];
}

}  // namespace

std::vector<SynthImage> synth_images(const SynthConfig& config) {
  if (config.image_size <= 0 || config.image_size % 8 != 0) throw ConfigError("synth.image_size must be a positive multiple of 8");
  if (config.minority[0] < 0 || config.minority[1] < config.minority[0] || config.majority[1] < config.majority[0])
    throw ConfigError("synth: count ranges must be ordered");
  const int total = config.train_images + config.val_images + config.test_images;
  const double r = config.object_radius;
  const double min_dist = 2 * r + 3;
  const double lo = r + 1, hi = config.image_size - r - 2;

  std::vector<SynthImage> out;
  out.reserve(total);
  for (int i = 0; i < total; ++i) {
    std::mt19937_64 rng(mix_seed({config.seed, static_cast<std::uint64_t>(i)}));
    std::uniform_real_distribution<double> pos(lo, hi);
    std::normal_distribution<double> noise(0.0, 0.03);
    SynthImage im;
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%05d.png", i);
    im.id = name;
    im.split = i < config.train_images ? Split::Train
               : i < config.train_images + config.val_images ? Split::Val
                                                              : Split::Test;
    im.majority_class = std::uniform_int_distribution<int>(0, 1)(rng);
    std::array<int, 2> counts{};
    counts[im.majority_class] = std::uniform_int_distribution<int>(config.majority[0], config.majority[1])(rng);
    counts[im.minority_class()] = std::uniform_int_distribution<int>(config.minority[0], config.minority[1])(rng);

    // Sequential placement with a minimum center distance, so shapes never overlap.
    std::vector<Point> placed;
    for (int cls = 0; cls < 2; ++cls) {
      for (int n = 0; n < counts[cls]; ++n) {
        bool ok = false;
        for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
          const Point p{pos(rng), pos(rng)};
          ok = std::all_of(placed.begin(), placed.end(),
                           [&](const Point& q) { return std::hypot(p.x - q.x, p.y - q.y) >= min_dist; });
          if (ok) {
            placed.push_back(p);
            im.points[cls].push_back(p);
          }
        }
        if (!ok) throw ConfigError("synth: cannot place " + std::to_string(counts[cls]) + " objects without overlap");
      }
    }

    Grid<Real> img(3, config.image_size, config.image_size);
    for (Eigen::Index k = 0; k < img.data.size(); ++k) img.data.data()[k] = 0.5 + noise(rng);
    for (const auto& p : im.points[0]) draw_disc(img, p, r, {0.85, 0.15, 0.15});
    for (const auto& p : im.points[1]) draw_square_outline(img, p, 0.75 * r, {0.15, 0.25, 0.85});
    img.data = img.data.cwiseMax(0.0).cwiseMin(1.0);
    im.pixels = std::make_shared<const Grid<Real>>(std::move(img));
    out.push_back(std::move(im));
  }
  return out;
}

std::vector<CountingSample> synth_samples(const std::vector<SynthImage>& images, Split split) {
  std::vector<CountingSample> out;
  for (const auto& im : images) {
    if (im.split != split) continue;
    for (int cls = 0; cls < 2; ++cls)
      out.push_back({im.id + "#" + synth_classes()[cls], "", im.pixels, im.points[cls], synth_classes()[cls], split, "synth"});
  }
  return out;
}

std::vector<CountingSample> synth_minority_samples(const std::vector<SynthImage>& images, Split split) {
  std::vector<CountingSample> out;
  for (const auto& im : images) {
    if (im.split != split) continue;
    const int cls = im.minority_class();
    out.push_back({im.id, "", im.pixels, im.points[cls], synth_classes()[cls], split, "synth"});
  }
  return out;
}

void write_synth_corpus(const fs::path& root, const std::vector<SynthImage>& images) {
  fs::create_directories(root / kFscImages);
  json annotations = json::object();
  json splits = {{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
  json minority = json::array();
  std::ofstream classes(root / kFscClasses);
  if (!classes) throw IngestionError("cannot write " + (root / kFscClasses).string());
  for (const auto& im : images) {
    write_image((root / kFscImages / im.id).string(), *im.pixels);
    annotations[im.id] = {{"points", points_json(im.points[im.majority_class])},
                          {"class_points",
                           {{synth_classes()[0], points_json(im.points[0])}, {synth_classes()[1], points_json(im.points[1])}}}};
    splits[to_string(im.split)].push_back(im.id);
    classes << im.id << '\t' << synth_classes()[im.majority_class] << '\n';
    if (im.split == Split::Test)
      minority.push_back({{"image_id", im.id},
                          {"minority_class", synth_classes()[im.minority_class()]},
                          {"points", points_json(im.points[im.minority_class()])}});
  }
  std::ofstream(root / kFscAnnotations) << annotations.dump();
  std::ofstream(root / kFscSplits) << splits.dump(1);
  std::ofstream(root / "minority.json") << minority.dump(1);
}

}  // namespace t2i
