#pragma once

// Supervision signals for the similarity maps and the training objective.

#include <memory>
#include <string>
#include <vector>

#include "t2icount/autodiff.hpp"
#include "t2icount/backbone.hpp"
#include "t2icount/hscm.hpp"
#include "t2icount/resample.hpp"

namespace t2i {

// Scales a single-channel map to [0, 1]. A constant map becomes all zeros.
template <typename Scalar>
Grid<Scalar> min_max_normalize(const Grid<Scalar>& m) {
  Grid<Scalar> out(1, m.height, m.width);
  const Scalar lo = m.data.minCoeff();
  const Scalar hi = m.data.maxCoeff();
  if (!(hi > lo)) return out;
  out.data = (m.data.array() - lo) / (hi - lo);
  return out;
}

// sum_i w_i * Up(norm(A_i)) at out_h x out_w.
template <typename Scalar>
Grid<Scalar> fuse_attention(const std::vector<Grid<Scalar>>& maps, const std::vector<Scalar>& weights, int out_h,
                            int out_w) {
  if (maps.empty()) throw InputError("fuse_attention: empty attention stack");
  if (maps.size() != weights.size())
    throw InputError("fuse_attention: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(maps.size()) + " maps");
  Grid<Scalar> fused(1, out_h, out_w);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].channels() != 1) throw DimensionError("fuse_attention: attention maps must be single-channel");
    fused.data += weights[i] * resize_bilinear(min_max_normalize(maps[i]), out_h, out_w).data;
  }
  return fused;
}

Grid<Real> fuse_attention(const CrossAttentionStack& stack, const std::vector<Real>& weights, int out_h, int out_w);

// Ternary supervision labels: 1 positive, 0 negative, -1 ambiguous.
struct PnaMap {
  static constexpr int kPositive = 1;
  static constexpr int kNegative = 0;
  static constexpr int kAmbiguous = -1;

  Eigen::RowVectorXi labels;
  int height = 0;
  int width = 0;

  Eigen::Index count(int label) const { return (labels.array() == label).count(); }
  int operator()(int y, int x) const { return labels(static_cast<Eigen::Index>(y) * width + x); }
};

// Density test first: p = 1 if D >= tau, else 0 if A <= theta, else -1.
template <typename Scalar>
PnaMap pna_map(const Grid<Scalar>& density, const Grid<Scalar>& attention, Scalar tau, Scalar theta) {
  require_same_raster(density, attention, "pna_map");
  PnaMap p;
  p.height = density.height;
  p.width = density.width;
  p.labels.resize(density.pixels());
  for (Eigen::Index j = 0; j < density.pixels(); ++j) {
    if (density.data(0, j) >= tau)
      p.labels(j) = PnaMap::kPositive;
    else if (attention.data(0, j) <= theta)
      p.labels(j) = PnaMap::kNegative;
    else
      p.labels(j) = PnaMap::kAmbiguous;
  }
  return p;
}

// lambda * sum_{p=1} (1 - S) + sum_{p=0} max(0, S); ambiguous pixels are ignored.
template <typename Scalar>
Scalar rrc_loss_value(const RowVec<Scalar>& s, const PnaMap& p, Scalar lambda) {
  if (s.size() != p.labels.size()) throw DimensionError("rrc_loss: similarity and PNA sizes differ");
  Scalar positive = 0, negative = 0;
  for (Eigen::Index j = 0; j < s.size(); ++j) {
    if (p.labels(j) == PnaMap::kPositive)
      positive += Scalar(1) - s(j);
    else if (p.labels(j) == PnaMap::kNegative)
      negative += std::max(Scalar(0), s(j));
  }
  return lambda * positive + negative;
}

// dL/dS; zero on ambiguous pixels and on negatives with S <= 0.
template <typename Scalar>
RowVec<Scalar> rrc_loss_grad(const RowVec<Scalar>& s, const PnaMap& p, Scalar lambda) {
  if (s.size() != p.labels.size()) throw DimensionError("rrc_loss: similarity and PNA sizes differ");
  RowVec<Scalar> g = RowVec<Scalar>::Zero(s.size());
  for (Eigen::Index j = 0; j < s.size(); ++j) {
    if (p.labels(j) == PnaMap::kPositive)
      g(j) = -lambda;
    else if (p.labels(j) == PnaMap::kNegative && s(j) > Scalar(0))
      g(j) = Scalar(1);
  }
  return g;
}

template <typename Scalar>
ad::Var<Scalar> rrc_loss(const ad::Var<Scalar>& s, const PnaMap& p, Scalar lambda) {
  if (s.rows() != 1) throw DimensionError("rrc_loss: similarity map must be single-channel");
  if (s.height() != p.height || s.width() != p.width) throw DimensionError("rrc_loss: raster differs from PNA map");
  RowVec<Scalar> row = s.value().row(0);
  Mat<Scalar> value = Mat<Scalar>::Constant(1, 1, rrc_loss_value<Scalar>(row, p, lambda));
  return ad::make_result<Scalar>(std::move(value), 0, 0, {s}, [p, lambda](ad::Node<Scalar>& self) {
    auto& ps = self.parents[0];
    RowVec<Scalar> r = ps->value.row(0);
    ps->accumulate(self.grad(0, 0) * rrc_loss_grad<Scalar>(r, p, lambda));
  });
}

struct LossWeights {
  Real lambda = 2.0;
  Real gamma = 0.01;
  Real tau = 0.0;  // objects per latent cell
  Real theta = 0.3;

  void validate() const;
};

// Value of the ground-truth Gaussian one sigma from its center, expressed at
// latent resolution (sigma shrinks by the latent scale).
Real default_tau(Real sigma_px, int scale = kLatentScale);

inline const std::vector<Real>& default_fusion_weights() {
  static const std::vector<Real> w{0.6, 0.3, 0.1};
  return w;
}

class RegressionLoss {
 public:
  virtual ~RegressionLoss() = default;
  virtual std::string name() const = 0;
  virtual ad::Var<Real> operator()(const ad::Var<Real>& predicted, const Grid<Real>& target) const = 0;
};

// mean((D - D_gt)^2) + |sum D - sum D_gt| / (sum D_gt + 1)
class MseCountLoss final : public RegressionLoss {
 public:
  std::string name() const override { return "mse_count"; }
  ad::Var<Real> operator()(const ad::Var<Real>& predicted, const Grid<Real>& target) const override;
};

// sum((D - D_gt)^2) + |sum D - sum D_gt| / (sum D_gt + 1)
class SseCountLoss final : public RegressionLoss {
 public:
  std::string name() const override { return "sse_count"; }
  ad::Var<Real> operator()(const ad::Var<Real>& predicted, const Grid<Real>& target) const override;
};

std::unique_ptr<RegressionLoss> make_regression_loss(const std::string& kind);

// Plain evaluation of the default regression loss.
template <typename Scalar>
Scalar mse_count_value(const Grid<Scalar>& predicted, const Grid<Scalar>& target) {
  require_same_raster(predicted, target, "reg_loss");
  if ((target.data.array() < Scalar(0)).any()) throw InputError("reg_loss: negative ground-truth density");
  const Scalar mse = (predicted.data - target.data).array().square().mean();
  const Scalar gt = target.sum();
  return mse + std::abs(predicted.sum() - gt) / (gt + Scalar(1));
}

template <typename Scalar>
Scalar sse_count_value(const Grid<Scalar>& predicted, const Grid<Scalar>& target) {
  require_same_raster(predicted, target, "reg_loss");
  if ((target.data.array() < Scalar(0)).any()) throw InputError("reg_loss: negative ground-truth density");
  const Scalar sse = (predicted.data - target.data).array().square().sum();
  const Scalar gt = target.sum();
  return sse + std::abs(predicted.sum() - gt) / (gt + Scalar(1));
}

struct LossBreakdown {
  Real total = 0;
  Real regression = 0;
  std::vector<std::pair<int, Real>> rrc;  // (stage, L_RRC)
  Eigen::Index positives = 0, negatives = 0, ambiguous = 0;

  Real rrc_sum() const {
    Real s = 0;
    for (const auto& [stage, v] : rrc) s += v;
    return s;
  }
};

struct TotalLoss {
  ad::Var<Real> value;
  LossBreakdown parts;
  PnaMap pna;
  Grid<Real> fused_attention;
};

// L_reg + gamma * sum over stages of L_RRC(Up(S_i)). The PNA map is built once
// at the density raster and shared by every stage.
TotalLoss total_loss(const ad::Var<Real>& predicted, const Grid<Real>& target,
                     const std::vector<SimilarityMap>& similarity, const CrossAttentionStack& stack,
                     const LossWeights& weights, const std::vector<Real>& fusion_weights,
                     const RegressionLoss& regression);

}  // namespace t2i
