#include "t2icount/evalrunner.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "t2icount/data.hpp"
#include "t2icount/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t2i {

Grid<Real> ModelPredictor::predict(const Grid<Real>& image, const std::string& prompt) const {
  ad::NoGradGuard no_grad;
  return model_.forward(image, prompt).density_grid();
}

std::vector<int> window_starts(int padded, int window) {
  if (window <= 0 || padded < window) throw DimensionError("window_starts: padded extent smaller than window");
  std::vector<int> starts;
  for (int s = 0; s + window <= padded; s += window) starts.push_back(s);
  if (starts.back() + window < padded) starts.push_back(padded - window);
  return starts;
}

int padded_extent(int extent, int window) {
  const int eight = (extent + kLatentScale - 1) / kLatentScale * kLatentScale;
  return std::max(eight, window);
}

Grid<Real> window_coverage(int padded_h, int padded_w, int window) {
  const int f = kLatentScale, lw = window / f;
  Grid<Real> cov(1, padded_h / f, padded_w / f);
  for (int y0 : window_starts(padded_h, window))
    for (int x0 : window_starts(padded_w, window))
      for (int y = 0; y < lw; ++y)
        for (int x = 0; x < lw; ++x) cov(0, y0 / f + y, x0 / f + x) += 1;
  return cov;
}

Grid<Real> sliding_window_predict(const DensityPredictor& predictor, const Grid<Real>& image,
                                  const std::string& prompt, int window) {
  if (window <= 0 || window % kLatentScale != 0) throw ConfigError("eval.window must be a positive multiple of 8");
  if (image.height < 1 || image.width < 1) throw DimensionError("sliding_window_predict: empty image");
  const int f = kLatentScale, lw = window / f;
  const int ph = padded_extent(image.height, window), pw = padded_extent(image.width, window);
  const Grid<Real> padded = reflect_pad(image, ph, pw);

  Grid<Real> sum(1, ph / f, pw / f);
  for (int y0 : window_starts(ph, window))
    for (int x0 : window_starts(pw, window)) {
      const auto tile = crop(padded, {}, y0, x0, window, window).image;
      const Grid<Real> d = predictor.predict(tile, prompt);
      if (d.height != lw || d.width != lw) throw DimensionError("sliding_window_predict: predictor returned wrong raster");
      for (int y = 0; y < lw; ++y)
        sum.data.middleCols(sum.index(y0 / f + y, x0 / f), lw) += d.data.middleCols(d.index(y, 0), lw);
    }
  sum.data = sum.data.cwiseQuotient(window_coverage(ph, pw, window).data);

  const int oh = (image.height + f - 1) / f, ow = (image.width + f - 1) / f;
  Grid<Real> out(1, oh, ow);
  for (int y = 0; y < oh; ++y) out.data.middleCols(out.index(y, 0), ow) = sum.data.middleCols(sum.index(y, 0), ow);
  return out;
}

Metrics compute_metrics(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw InputError("compute_metrics: empty list");
  double abs_sum = 0, sq_sum = 0;
  for (const auto& [pred, gt] : pairs) {
    abs_sum += std::abs(pred - gt);
    sq_sum += (pred - gt) * (pred - gt);
  }
  const double n = static_cast<double>(pairs.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), pairs.size()};
}

DensityFunction model_density(const T2ICountModel& model, int window) {
  return [&model, window](const LoadedSample& s) {
    return sliding_window_predict(ModelPredictor(model), s.image, s.class_name, window);
  };
}

DensityFunction oracle_density(double sigma_px) {
  return [sigma_px](const LoadedSample& s) {
    const int f = kLatentScale;
    const int ph = (s.image.height + f - 1) / f * f, pw = (s.image.width + f - 1) / f * f;
    return pool_density(rasterize_density(s.points, ph, pw, sigma_px), f);
  };
}

EvalResult run_benchmark(const std::vector<CountingSample>& samples, const DensityFunction& density,
                         const std::string& dataset, const std::string& prompt_mode) {
  EvalResult r;
  r.dataset = dataset;
  r.prompt_mode = prompt_mode;
  std::vector<std::pair<double, double>> pairs;
  for (const auto& s : samples) {
    ImageRecord rec;
    rec.id = s.id;
    rec.prompt = s.class_name;
    rec.ground_truth = static_cast<double>(s.points.size());
    try {
      const auto loaded = load(s);
      rec.predicted = density(loaded).sum();
      if (!std::isfinite(rec.predicted)) throw NumericError("non-finite predicted count");
      pairs.emplace_back(rec.predicted, rec.ground_truth);
    } catch (const Error& e) {
      rec.error = e.what();
      ++r.failures;
      warn(s.id + ": " + rec.error);
    }
    r.per_image.push_back(std::move(rec));
  }
  if (!pairs.empty()) r.metrics = compute_metrics(pairs);
  return r;
}

const std::vector<ReferenceRow>& reference_rows() {
  static const std::vector<ReferenceRow> rows{
      {"fsc147", "val", 13.78, 58.78},
      {"fsc147", "test", 11.76, 97.86},
      {"fsc147s", "test", 4.69, 8.06},
      {"carpk", "test", 8.61, 13.47},
  };
  return rows;
}

std::string format_table(const EvalResult& result, const std::string& split) {
  std::ostringstream out;
  auto row = [&](const std::string& method, const std::string& ds, const std::string& sp, double mae, double rmse) {
    out << std::left << std::setw(30) << method << std::setw(10) << ds << std::setw(7) << sp << std::right
        << std::fixed << std::setprecision(2) << std::setw(9) << mae << std::setw(9) << rmse << "\n";
  };
  out << std::left << std::setw(30) << "method" << std::setw(10) << "dataset" << std::setw(7) << "split"
      << std::right << std::setw(9) << "MAE" << std::setw(9) << "RMSE" << "\n";
  for (const auto& ref : reference_rows())
    if (ref.dataset == result.dataset) row("published (full scale)", ref.dataset, ref.split, ref.mae, ref.rmse);
  row("this run (" + result.prompt_mode + ")", result.dataset, split, result.metrics.mae, result.metrics.rmse);
  return out.str();
}

void write_report(const fs::path& dir, const EvalResult& result, const std::string& split,
                  const std::string& config_hash) {
  fs::create_directories(dir);
  std::ofstream records(dir / "records.jsonl");
  for (const auto& r : result.per_image) {
    json j = {{"id", r.id}, {"prompt", r.prompt}, {"pred", r.predicted}, {"gt", r.ground_truth}};
    if (r.error.empty())
      j["abs_err"] = r.abs_error();
    else
      j["error"] = r.error;
    records << j.dump() << "\n";
  }
  const json summary = {{"dataset", result.dataset},     {"split", split},
                        {"prompt_mode", result.prompt_mode}, {"mae", result.metrics.mae},
                        {"rmse", result.metrics.rmse},   {"n", result.metrics.n},
                        {"failures", result.failures},   {"config_hash", config_hash}};
  std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
  std::ofstream(dir / "table.txt") << format_table(result, split);
}

}  // namespace t2i
