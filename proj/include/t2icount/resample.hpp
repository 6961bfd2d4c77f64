#pragma once

// Linear pixel operators: bilinear resize, sum pooling and mass-preserving
// spreading, each a sparse matrix over raster pixels. Operators are cached
// by geometry and shared across calls.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <vector>

#include "t2icount/autodiff.hpp"
#include "t2icount/tensor.hpp"

namespace t2i {

namespace detail {

// 1-D bilinear weights, align_corners = false (half-pixel centers).
template <typename Scalar>
std::vector<std::tuple<int, int, Scalar>> bilinear_taps(int in, int out) {
  std::vector<std::tuple<int, int, Scalar>> taps;
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = src - i0;
    taps.emplace_back(o, i0, static_cast<Scalar>(1.0 - frac));
    if (frac > 0) taps.emplace_back(o, i1, static_cast<Scalar>(frac));
  }
  return taps;
}

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> finish_operator(int in_h, int in_w, int out_h, int out_w,
                                                                  std::vector<Eigen::Triplet<Scalar>>& trips) {
  auto op = std::make_shared<ad::PixelOperator<Scalar>>();
  op->in_h = in_h;
  op->in_w = in_w;
  op->out_h = out_h;
  op->out_w = out_w;
  const Eigen::Index n_in = static_cast<Eigen::Index>(in_h) * in_w;
  const Eigen::Index n_out = static_cast<Eigen::Index>(out_h) * out_w;
  op->forward.resize(n_out, n_in);
  op->forward.setFromTriplets(trips.begin(), trips.end());
  op->forward_t = op->forward.transpose();
  return op;
}

enum class OperatorKind { Bilinear, SumPool, Spread };

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> build_operator(OperatorKind kind, int in_h, int in_w, int out_h,
                                                                 int out_w) {
  std::vector<Eigen::Triplet<Scalar>> trips;
  switch (kind) {
    case OperatorKind::Bilinear: {
      const auto ty = bilinear_taps<Scalar>(in_h, out_h);
      const auto tx = bilinear_taps<Scalar>(in_w, out_w);
      for (const auto& [oy, iy, wy] : ty)
        for (const auto& [ox, ix, wx] : tx)
          trips.emplace_back(static_cast<Eigen::Index>(oy) * out_w + ox, static_cast<Eigen::Index>(iy) * in_w + ix,
                             wy * wx);
      break;
    }
    case OperatorKind::SumPool: {
      const int f = in_h / out_h;
      for (int y = 0; y < in_h; ++y)
        for (int x = 0; x < in_w; ++x)
          trips.emplace_back(static_cast<Eigen::Index>(y / f) * out_w + x / f, static_cast<Eigen::Index>(y) * in_w + x,
                             Scalar(1));
      break;
    }
    case OperatorKind::Spread: {
      const int f = out_h / in_h;
      const Scalar share = Scalar(1) / static_cast<Scalar>(f * f);
      for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
          trips.emplace_back(static_cast<Eigen::Index>(y) * out_w + x, static_cast<Eigen::Index>(y / f) * in_w + x / f,
                             share);
      break;
    }
  }
  return finish_operator<Scalar>(in_h, in_w, out_h, out_w, trips);
}

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> cached_operator(OperatorKind kind, int in_h, int in_w, int out_h,
                                                                  int out_w) {
  static std::mutex mutex;
  static std::map<std::tuple<int, int, int, int, int>, std::shared_ptr<const ad::PixelOperator<Scalar>>> cache;
  const auto key = std::make_tuple(static_cast<int>(kind), in_h, in_w, out_h, out_w);
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto op = build_operator<Scalar>(kind, in_h, in_w, out_h, out_w);
  cache.emplace(key, op);
  return op;
}

}  // namespace detail

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> bilinear_operator(int in_h, int in_w, int out_h, int out_w) {
  if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0) throw DimensionError("bilinear: empty raster");
  return detail::cached_operator<Scalar>(detail::OperatorKind::Bilinear, in_h, in_w, out_h, out_w);
}

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> sum_pool_operator(int in_h, int in_w, int factor) {
  if (factor <= 0 || in_h % factor != 0 || in_w % factor != 0)
    throw DimensionError("sum pool: " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                         " is not divisible by " + std::to_string(factor));
  return detail::cached_operator<Scalar>(detail::OperatorKind::SumPool, in_h, in_w, in_h / factor, in_w / factor);
}

template <typename Scalar>
std::shared_ptr<const ad::PixelOperator<Scalar>> spread_operator(int in_h, int in_w, int factor) {
  if (factor <= 0) throw DimensionError("spread: factor must be positive");
  return detail::cached_operator<Scalar>(detail::OperatorKind::Spread, in_h, in_w, in_h * factor, in_w * factor);
}

template <typename Scalar>
Grid<Scalar> apply(const Grid<Scalar>& g, const ad::PixelOperator<Scalar>& op) {
  if (g.height != op.in_h || g.width != op.in_w) throw DimensionError("resample: raster does not match operator");
  return Grid<Scalar>(g.data * op.forward_t, op.out_h, op.out_w);
}

template <typename Scalar>
Grid<Scalar> resize_bilinear(const Grid<Scalar>& g, int out_h, int out_w) {
  if (g.height == out_h && g.width == out_w) return g;
  return apply(g, *bilinear_operator<Scalar>(g.height, g.width, out_h, out_w));
}

template <typename Scalar>
ad::Var<Scalar> resize_bilinear(const ad::Var<Scalar>& x, int out_h, int out_w) {
  if (x.height() == out_h && x.width() == out_w) return x;
  return ad::apply_pixel_operator(x, bilinear_operator<Scalar>(x.height(), x.width(), out_h, out_w));
}

template <typename Scalar>
ad::Var<Scalar> upsample2(const ad::Var<Scalar>& x) {
  return resize_bilinear(x, 2 * x.height(), 2 * x.width());
}

}  // namespace t2i
