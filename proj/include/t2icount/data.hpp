#pragma once

// Dataset ingestion, ground-truth densities, augmentation and the synthetic
// two-class corpus.

#include <array>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "t2icount/tensor.hpp"

namespace t2i {

struct Point {
  double x = 0;
  double y = 0;

  bool operator==(const Point& o) const { return x == o.x && y == o.y; }
};

enum class Split { Train, Val, Test };

Split parse_split(const std::string& s);
std::string to_string(Split s);

struct CountingSample {
  std::string id;
  std::string image_path;                   // used when `pixels` is empty
  std::shared_ptr<const Grid<Real>> pixels;  // in-memory image (synthetic corpus)
  std::vector<Point> points;
  std::string class_name;
  Split split = Split::Test;
  std::string source;

  // Loads the image; points outside it are clamped with a warning.
  Grid<Real> image() const;
};

// Sample with its image materialized and points clamped to it.
struct LoadedSample {
  std::string id;
  Grid<Real> image;
  std::vector<Point> points;
  std::string class_name;
};

LoadedSample load(const CountingSample& s);

// Public layout under root: images_384_VarV2/, annotation_FSC147_384.json,
// Train_Test_Val_FSC_147.json, ImageClasses_FSC147.txt.
std::vector<CountingSample> load_fsc147(const std::filesystem::path& root, Split split);

// JSON array of {image_id, minority_class, points: [[x, y], ...]}; images come
// from the FSC-147 image directory under fsc_root.
std::vector<CountingSample> load_fsc147s(const std::filesystem::path& file, const std::filesystem::path& fsc_root);

// Images/<id>.png, Annotations/<id>.txt ("x1 y1 x2 y2 class" per line),
// ImageSets/{train,test}.txt.
std::vector<CountingSample> load_carpk(const std::filesystem::path& root, Split split);

// Box corners to center point.
Point box_center(double x1, double y1, double x2, double y2);

// Sum of unit-mass Gaussians, each renormalized over its truncated footprint.
Grid<Real> rasterize_density(const std::vector<Point>& points, int height, int width, double sigma);

Grid<Real> pool_density(const Grid<Real>& density, int factor);

struct AugmentConfig {
  bool enabled = true;
  double scale_min = 1.0;
  double scale_max = 2.0;
  int crop = 384;
  double flip_prob = 0.5;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
};

struct AugmentedSample {
  Grid<Real> image;
  std::vector<Point> points;
};

// Rescale -> reflect-pad (if short) -> crop -> flip -> color jitter.
AugmentedSample augment(const Grid<Real>& image, const std::vector<Point>& points, const AugmentConfig& config,
                        std::mt19937_64& rng);

// The deterministic pieces, exposed for testing.
AugmentedSample rescale(const Grid<Real>& image, const std::vector<Point>& points, double factor);
AugmentedSample crop(const Grid<Real>& image, const std::vector<Point>& points, int top, int left, int size_h,
                     int size_w);
AugmentedSample hflip(const Grid<Real>& image, const std::vector<Point>& points);
// Pads the bottom and right edges by mirroring (edge pixel not repeated).
Grid<Real> reflect_pad(const Grid<Real>& image, int out_h, int out_w);

struct SynthConfig {
  int image_size = 128;
  int train_images = 400;
  int val_images = 50;
  int test_images = 50;
  std::array<int, 2> majority{15, 45};
  std::array<int, 2> minority{1, 5};
  double object_radius = 4.0;
  std::uint64_t seed = 0;
};

inline const std::array<std::string, 2>& synth_classes() {
  static const std::array<std::string, 2> names{"dots", "boxes"};
  return names;
}

struct SynthImage {
  std::string id;
  std::shared_ptr<const Grid<Real>> pixels;
  std::array<std::vector<Point>, 2> points;  // per synth_classes() entry
  int majority_class = 0;
  Split split = Split::Train;

  int minority_class() const { return 1 - majority_class; }
};

// Red filled discs ("dots") and blue outlined squares ("boxes") on a noisy
// gray background; one class is the majority per image.
std::vector<SynthImage> synth_images(const SynthConfig& config);

// One sample per (image, class) with the class name as prompt.
std::vector<CountingSample> synth_samples(const std::vector<SynthImage>& images, Split split);
// Minority-class sample of each image in the split.
std::vector<CountingSample> synth_minority_samples(const std::vector<SynthImage>& images, Split split);

// Writes the corpus in the FSC-147 layout (majority class as the image class)
// plus minority.json in the FSC-147-S schema.
void write_synth_corpus(const std::filesystem::path& root, const std::vector<SynthImage>& images);

}  // namespace t2i
