#pragma once

#include <optional>
#include <random>

#include "t2icount/hscm.hpp"
#include "t2icount/nn.hpp"

namespace t2i {

struct CounterConfig {
  int attn_heads = 8;
  int hidden_channels = 128;
};

// Self-attention over pixels, then conv3x3 -> conv3x3 -> conv1x1 to one
// channel, rectified so density is never negative.
class CountHead {
 public:
  CountHead(CounterConfig config, int in_channels, nn::ParameterStore<Real>& store, std::mt19937_64& rng);

  ad::Var<Real> operator()(const ad::Var<Real>& features) const;

  void zero_output_layer();

 private:
  CounterConfig config_;
  nn::AttentionBlock<Real> attention_;
  nn::Conv2d<Real> conv1_, conv2_, conv3_;
};

// Sum of density over the whole map, or over pixels where mask != 0.
Real integrate(const Grid<Real>& density, const Grid<Real>* mask = nullptr);

}  // namespace t2i
