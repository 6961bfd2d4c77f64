#include "t2icount/supervision.hpp"

#include <cmath>

namespace t2i {

Grid<Real> fuse_attention(const CrossAttentionStack& stack, const std::vector<Real>& weights, int out_h, int out_w) {
  std::vector<Grid<Real>> maps;
  maps.reserve(stack.maps.size());
  for (const auto& m : stack.maps) maps.push_back(m.attention);
  return fuse_attention<Real>(maps, weights, out_h, out_w);
}

void LossWeights::validate() const {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("loss.lambda must be a finite value >= 0");
  if (!(gamma >= 0) || !std::isfinite(gamma)) throw ConfigError("loss.gamma must be a finite value >= 0");
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("loss.tau must be positive");
  if (!(theta >= 0 && theta <= 1)) throw ConfigError("loss.theta must lie in [0, 1]");
}

Real default_tau(Real sigma_px, int scale) {
  if (!(sigma_px > 0) || scale <= 0) throw ConfigError("default_tau: sigma and scale must be positive");
  const Real s = sigma_px / scale;
  return std::exp(-0.5) / (2.0 * M_PI * s * s);
}

namespace {

void check_regression_inputs(const ad::Var<Real>& predicted, const Grid<Real>& target) {
  if (predicted.rows() != 1 || predicted.height() != target.height || predicted.width() != target.width ||
      target.channels() != 1)
    throw DimensionError("reg_loss: prediction " + std::to_string(predicted.height()) + "x" +
                         std::to_string(predicted.width()) + " vs target " + std::to_string(target.height) + "x" +
                         std::to_string(target.width));
  if ((target.data.array() < 0).any()) throw InputError("reg_loss: negative ground-truth density");
}

ad::Var<Real> relative_count_gap(const ad::Var<Real>& predicted, const Grid<Real>& target) {
  const Real gt_count = target.sum();
  return ad::scale(ad::abs(ad::add_scalar(ad::sum(predicted), -gt_count)), 1.0 / (gt_count + 1.0));
}

}  // namespace

ad::Var<Real> MseCountLoss::operator()(const ad::Var<Real>& predicted, const Grid<Real>& target) const {
  check_regression_inputs(predicted, target);
  const auto gt = ad::Var<Real>::constant(target.data, target.height, target.width);
  return ad::add(ad::mean(ad::square(ad::sub(predicted, gt))), relative_count_gap(predicted, target));
}

ad::Var<Real> SseCountLoss::operator()(const ad::Var<Real>& predicted, const Grid<Real>& target) const {
  check_regression_inputs(predicted, target);
  const auto gt = ad::Var<Real>::constant(target.data, target.height, target.width);
  return ad::add(ad::sum(ad::square(ad::sub(predicted, gt))), relative_count_gap(predicted, target));
}

std::unique_ptr<RegressionLoss> make_regression_loss(const std::string& kind) {
  if (kind == "mse_count" || kind.empty()) return std::make_unique<MseCountLoss>();
  if (kind == "sse_count") return std::make_unique<SseCountLoss>();
  throw ConfigError("unknown regression loss '" + kind + "'");
}

TotalLoss total_loss(const ad::Var<Real>& predicted, const Grid<Real>& target,
                     const std::vector<SimilarityMap>& similarity, const CrossAttentionStack& stack,
                     const LossWeights& weights, const std::vector<Real>& fusion_weights,
                     const RegressionLoss& regression) {
  TotalLoss out;
  const int h = target.height, w = target.width;
  auto reg = regression(predicted, target);
  out.parts.regression = reg.item();

  out.fused_attention = fuse_attention(stack, fusion_weights, h, w);
  out.pna = pna_map<Real>(target, out.fused_attention, weights.tau, weights.theta);
  out.parts.positives = out.pna.count(PnaMap::kPositive);
  out.parts.negatives = out.pna.count(PnaMap::kNegative);
  out.parts.ambiguous = out.pna.count(PnaMap::kAmbiguous);

  ad::Var<Real> total = reg;
  for (const auto& s : similarity) {
    if (weights.gamma == 0) {
      RowVec<Real> row = resize_bilinear(s.values.grid(), h, w).data.row(0);
      out.parts.rrc.emplace_back(s.stage, rrc_loss_value<Real>(row, out.pna, weights.lambda));
      continue;
    }
    auto term = rrc_loss<Real>(resize_bilinear(s.values, h, w), out.pna, weights.lambda);
    out.parts.rrc.emplace_back(s.stage, term.item());
    total = ad::add(total, ad::scale(term, weights.gamma));
  }
  out.value = total;
  out.parts.total = total.item();
  return out;
}

}  // namespace t2i
