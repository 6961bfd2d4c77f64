#pragma once

// Tiled inference, count metrics and benchmark reports.

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "t2icount/data.hpp"
#include "t2icount/model.hpp"

namespace t2i {

// Density at 1/8 of the input resolution for an input whose sides are multiples of 8.
class DensityPredictor {
 public:
  virtual ~DensityPredictor() = default;
  virtual Grid<Real> predict(const Grid<Real>& image, const std::string& prompt) const = 0;
};

class ModelPredictor final : public DensityPredictor {
 public:
  explicit ModelPredictor(const T2ICountModel& model) : model_(model) {}
  Grid<Real> predict(const Grid<Real>& image, const std::string& prompt) const override;

 private:
  const T2ICountModel& model_;
};

// Window origins along one axis: stride = window, last one clamped to `padded - window`.
std::vector<int> window_starts(int padded, int window);

// Side length after padding: the next multiple of 8, and at least `window`.
int padded_extent(int extent, int window);

// Number of windows covering each latent cell of the padded raster.
Grid<Real> window_coverage(int padded_h, int padded_w, int window);

// Reflect-pads, runs each window, averages overlaps by coverage and crops to
// ceil(H/8) x ceil(W/8).
Grid<Real> sliding_window_predict(const DensityPredictor& predictor, const Grid<Real>& image,
                                  const std::string& prompt, int window = 384);

struct Metrics {
  double mae = 0;
  double rmse = 0;
  std::size_t n = 0;
};

// pairs of (predicted, ground truth)
Metrics compute_metrics(const std::vector<std::pair<double, double>>& pairs);

struct ImageRecord {
  std::string id;
  std::string prompt;
  double predicted = 0;
  double ground_truth = 0;
  std::string error;  // non-empty when the image failed

  double abs_error() const { return std::abs(predicted - ground_truth); }
};

struct EvalResult {
  std::string dataset;
  std::string prompt_mode;
  std::vector<ImageRecord> per_image;
  Metrics metrics;
  std::size_t failures = 0;
};

using DensityFunction = std::function<Grid<Real>(const LoadedSample&)>;

DensityFunction model_density(const T2ICountModel& model, int window);
// Returns the sum-pooled ground truth; scores MAE = RMSE = 0.
DensityFunction oracle_density(double sigma_px);

EvalResult run_benchmark(const std::vector<CountingSample>& samples, const DensityFunction& density,
                         const std::string& dataset, const std::string& prompt_mode);

struct ReferenceRow {
  std::string dataset;
  std::string split;
  double mae;
  double rmse;
};

// Published full-scale numbers, shown next to desk-scale results.
const std::vector<ReferenceRow>& reference_rows();

// records.jsonl, summary.json and table.txt under dir.
void write_report(const std::filesystem::path& dir, const EvalResult& result, const std::string& split,
                  const std::string& config_hash);
std::string format_table(const EvalResult& result, const std::string& split);

}  // namespace t2i
