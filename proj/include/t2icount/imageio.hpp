#pragma once

// Image files and display rendering. Images are 3-channel RGB grids in [0, 1].

#include <string>

#include "t2icount/tensor.hpp"

namespace t2i {

Grid<Real> read_image(const std::string& path);
void write_image(const std::string& path, const Grid<Real>& rgb);

Grid<Real> resize_image(const Grid<Real>& image, int out_h, int out_w);

// Map values through a jet colormap after min-max scaling; output is RGB.
Grid<Real> colorize(const Grid<Real>& map);

// alpha * colorize(Up(map)) + (1 - alpha) * image, map stretched to the image size.
Grid<Real> overlay(const Grid<Real>& image, const Grid<Real>& map, double alpha = 0.5);

// Single-channel map in [0, 1] shown as gray levels, stretched to out_h x out_w
// with nearest-neighbour sampling so label boundaries stay crisp.
Grid<Real> gray_image(const Grid<Real>& map, int out_h, int out_w);

}  // namespace t2i
