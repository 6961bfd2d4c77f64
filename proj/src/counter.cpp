#include "t2icount/counter.hpp"

namespace t2i {

namespace {

const ad::Var<Real>& require_finite(const ad::Var<Real>& x, const char* layer) {
  if (!x.value().allFinite()) throw NumericError(std::string(layer) + ": non-finite activations");
  return x;
}

}  // namespace

CountHead::CountHead(CounterConfig config, int in_channels, nn::ParameterStore<Real>& store, std::mt19937_64& rng)
    : config_(config) {
  const auto group = nn::ParamGroup::Head;
  const int hidden = config_.hidden_channels;
  attention_ = nn::AttentionBlock<Real>(store, "counter.self_attention", in_channels, in_channels, config_.attn_heads,
                                        true, group, rng);
  conv1_ = nn::Conv2d<Real>(store, "counter.conv1", in_channels, hidden, 3, 1, group, rng);
  conv2_ = nn::Conv2d<Real>(store, "counter.conv2", hidden, hidden / 2, 3, 1, group, rng);
  conv3_ = nn::Conv2d<Real>(store, "counter.conv3", hidden / 2, 1, 1, 1, group, rng);
  // Start near an empty density with the output ReLU still active.
  conv3_.weight.mutable_value() *= 0.1;
  conv3_.bias.mutable_value().setConstant(0.01);
}

ad::Var<Real> CountHead::operator()(const ad::Var<Real>& features) const {
  auto x = require_finite(attention_(features), "counter.self_attention");
  x = require_finite(ad::relu(conv1_(x)), "counter.conv1");
  x = require_finite(ad::relu(conv2_(x)), "counter.conv2");
  return require_finite(ad::relu(conv3_(x)), "counter.conv3");
}

void CountHead::zero_output_layer() {
  conv3_.weight.mutable_value().setZero();
  conv3_.bias.mutable_value().setZero();
}

Real integrate(const Grid<Real>& density, const Grid<Real>* mask) {
  if (!mask) return density.sum();
  require_same_raster(density, *mask, "integrate");
  Real total = 0;
  for (Eigen::Index j = 0; j < density.pixels(); ++j)
    if (mask->data(0, j) != 0) total += density.data(0, j);
  return total;
}

}  // namespace t2i
