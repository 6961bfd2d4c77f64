#pragma once

// Backbone -> (HSCM | plain F4 projection) -> count head, plus the per-variant
// training objective.

#include <memory>
#include <optional>
#include <random>
#include <string>

#include "t2icount/backbone.hpp"
#include "t2icount/counter.hpp"
#include "t2icount/hscm.hpp"
#include "t2icount/supervision.hpp"

namespace t2i {

// baseline: counter and S on F4, no RRC. baseline+rrc: adds RRC on S(F4).
// full: HSCM with RRC on S3 and S2.
enum class Variant { Baseline, BaselineRrc, Full };

Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

struct ModelConfig {
  BackboneConfig backbone;
  HscmConfig hscm;
  CounterConfig counter;
  Variant variant = Variant::Full;
  std::uint64_t init_seed = 0;
};

struct Prediction {
  ad::Var<Real> density;  // [1, H*W] at latent resolution
  std::vector<SimilarityMap> similarity;
  CrossAttentionStack attention;
  std::vector<StageEvent> trace;

  Real count() const { return density.value().sum(); }
  Grid<Real> density_grid() const { return density.grid(); }
};

class T2ICountModel {
 public:
  explicit T2ICountModel(ModelConfig config);

  // Training path: the noise draw comes from the caller's generator.
  Prediction forward(const Grid<Real>& image, const std::string& prompt, std::mt19937_64& noise_rng) const;
  // Inference path: noise is drawn from a generator seeded with backbone.seed,
  // so equal-sized inputs see the same draw.
  Prediction forward(const Grid<Real>& image, const std::string& prompt) const;
  Prediction forward_latent(const LatentImage& z_t, const TextEmbedding& text) const;

  TotalLoss loss(const Prediction& p, const Grid<Real>& target, const LossWeights& weights,
                 const std::vector<Real>& fusion_weights, const RegressionLoss& regression) const;

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  const Backbone& backbone() const { return *backbone_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  nn::ParameterStore<Real>& parameters() { return store_; }
  const nn::ParameterStore<Real>& parameters() const { return store_; }
  bool has_hscm() const { return hscm_.has_value(); }

 private:
  Prediction run_baseline(const DenoiserOutput& features, const TextEmbedding& text) const;

  ModelConfig config_;
  nn::ParameterStore<Real> store_;
  NoiseSchedule schedule_;
  std::unique_ptr<Backbone> backbone_;
  std::optional<Hscm> hscm_;
  // baseline path
  nn::Conv2d<Real> f4_projection_;
  TextProjection baseline_text_;
  std::unique_ptr<CountHead> head_;
};

}  // namespace t2i
