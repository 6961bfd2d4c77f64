#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "t2icount/errors.hpp"

namespace t2i {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Scalar used by the model, trainer and data pipeline.
using Real = double;

// A stack of channel planes over a height x width raster.
// Column j of `data` is the channel vector of pixel (j / width, j % width),
// so per-pixel operations touch contiguous memory.
template <typename Scalar>
struct Grid {
  Mat<Scalar> data;
  int height = 0;
  int width = 0;

  Grid() = default;
  Grid(int channels, int h, int w)
      : data(Mat<Scalar>::Zero(channels, static_cast<Eigen::Index>(h) * w)), height(h), width(w) {}
  Grid(Mat<Scalar> values, int h, int w) : data(std::move(values)), height(h), width(w) {
    if (data.cols() != static_cast<Eigen::Index>(h) * w)
      throw DimensionError("grid: " + std::to_string(data.cols()) + " columns for a " +
                           std::to_string(h) + "x" + std::to_string(w) + " raster");
  }

  int channels() const { return static_cast<int>(data.rows()); }
  Eigen::Index pixels() const { return data.cols(); }
  Eigen::Index index(int y, int x) const { return static_cast<Eigen::Index>(y) * width + x; }

  Scalar& operator()(int c, int y, int x) { return data(c, index(y, x)); }
  Scalar operator()(int c, int y, int x) const { return data(c, index(y, x)); }

  // Single channel as an h x w matrix (row y, column x).
  Mat<Scalar> plane(int c = 0) const {
    Mat<Scalar> out(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out(y, x) = (*this)(c, y, x);
    return out;
  }

  static Grid from_plane(const Mat<Scalar>& m) {
    Grid g(1, static_cast<int>(m.rows()), static_cast<int>(m.cols()));
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) g(0, y, x) = m(y, x);
    return g;
  }

  Scalar sum() const { return data.sum(); }
  bool all_finite() const { return data.allFinite(); }
  bool same_raster(const Grid& o) const { return height == o.height && width == o.width; }
};

template <typename Scalar>
void require_same_raster(const Grid<Scalar>& a, const Grid<Scalar>& b, const char* what) {
  if (!a.same_raster(b))
    throw DimensionError(std::string(what) + ": raster " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
}

}  // namespace t2i
