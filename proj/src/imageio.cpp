#include "t2icount/imageio.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "t2icount/errors.hpp"

namespace t2i {

namespace {

// Grid (RGB) <-> cv::Mat (BGR, CV_64FC3)
cv::Mat to_mat(const Grid<Real>& g) {
  if (g.channels() != 3) throw DimensionError("image: expected 3 channels");
  cv::Mat m(g.height, g.width, CV_64FC3);
  for (int y = 0; y < g.height; ++y) {
    auto* row = m.ptr<cv::Vec3d>(y);
    for (int x = 0; x < g.width; ++x) row[x] = cv::Vec3d(g(2, y, x), g(1, y, x), g(0, y, x));
  }
  return m;
}

Grid<Real> from_mat(const cv::Mat& bgr) {
  cv::Mat m;
  bgr.convertTo(m, CV_64FC3);
  Grid<Real> g(3, m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3d>(y);
    for (int x = 0; x < m.cols; ++x) {
      g(0, y, x) = row[x][2];
      g(1, y, x) = row[x][1];
      g(2, y, x) = row[x][0];
    }
  }
  return g;
}

}  // namespace

Grid<Real> read_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw IngestionError("cannot read image " + path);
  cv::Mat f;
  m.convertTo(f, CV_64FC3, 1.0 / 255.0);
  return from_mat(f);
}

void write_image(const std::string& path, const Grid<Real>& rgb) {
  cv::Mat m;
  to_mat(rgb).convertTo(m, CV_8UC3, 255.0);
  if (!cv::imwrite(path, m)) throw IngestionError("cannot write image " + path);
}

Grid<Real> resize_image(const Grid<Real>& image, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw DimensionError("resize_image: empty target");
  if (image.height == out_h && image.width == out_w) return image;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

Grid<Real> colorize(const Grid<Real>& map) {
  if (map.channels() != 1) throw DimensionError("colorize: expected a single-channel map");
  const Real lo = map.data.minCoeff(), hi = map.data.maxCoeff();
  cv::Mat gray(map.height, map.width, CV_8UC1);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x)
      gray.at<unsigned char>(y, x) =
          hi > lo ? static_cast<unsigned char>(std::lround(255.0 * (map(0, y, x) - lo) / (hi - lo))) : 0;
  cv::Mat color;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  cv::Mat f;
  color.convertTo(f, CV_64FC3, 1.0 / 255.0);
  return from_mat(f);
}

Grid<Real> overlay(const Grid<Real>& image, const Grid<Real>& map, double alpha) {
  if (map.channels() != 1) throw DimensionError("overlay: expected a single-channel map");
  cv::Mat plane(map.height, map.width, CV_64FC1);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) plane.at<double>(y, x) = map(0, y, x);
  cv::Mat stretched;
  cv::resize(plane, stretched, cv::Size(image.width, image.height), 0, 0, cv::INTER_LINEAR);
  Grid<Real> up(1, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) up(0, y, x) = stretched.at<double>(y, x);
  Grid<Real> out = image;
  out.data = alpha * colorize(up).data + (1.0 - alpha) * image.data;
  return out;
}

Grid<Real> gray_image(const Grid<Real>& map, int out_h, int out_w) {
  Grid<Real> out(3, out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Real v = std::clamp(map(0, y * map.height / out_h, x * map.width / out_w), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) out(c, y, x) = v;
    }
  return out;
}

}  // namespace t2i
