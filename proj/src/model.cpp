#include "t2icount/model.hpp"

#include "t2icount/resample.hpp"

namespace t2i {

Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "baseline+rrc") return Variant::BaselineRrc;
  if (s == "full") return Variant::Full;
  throw ConfigError("train.variant: unknown value '" + s + "' (expected baseline, baseline+rrc or full)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "baseline";
    case Variant::BaselineRrc:
      return "baseline+rrc";
    case Variant::Full:
      return "full";
  }
  return "?";
}

T2ICountModel::T2ICountModel(ModelConfig config)
    : config_(std::move(config)), schedule_(NoiseSchedule::scaled_linear()) {
  if (config_.variant == Variant::Full && !config_.hscm.enabled) config_.variant = Variant::Baseline;
  if (config_.backbone.timestep > schedule_.steps())
    throw ConfigError("backbone.timestep exceeds the noise schedule length");
  std::mt19937_64 rng(config_.init_seed);
  backbone_ = make_backbone(config_.backbone, store_, rng);
  const int d = config_.hscm.embed_dim;
  if (config_.variant == Variant::Full) {
    hscm_.emplace(config_.hscm, backbone_->pyramid_channels(), backbone_->text_dim(), store_, rng);
  } else {
    f4_projection_ = nn::Conv2d<Real>(store_, "baseline.f4_projection", backbone_->pyramid_channels()[3], d, 1, 1,
                                      nn::ParamGroup::Head, rng);
    baseline_text_ = TextProjection(store_, "baseline.text_projection", backbone_->text_dim(), d, rng);
  }
  head_ = std::make_unique<CountHead>(config_.counter, d, store_, rng);
}

Prediction T2ICountModel::forward_latent(const LatentImage& z_t, const TextEmbedding& text) const {
  const auto features = backbone_->denoise_features(z_t, text);
  if (!hscm_) return run_baseline(features, text);
  auto h = hscm_->run(features.pyramid, text);
  Prediction p;
  p.density = (*head_)(h.v1.features);
  p.similarity = std::move(h.similarity);
  p.attention = features.attention;
  p.trace = std::move(h.trace);
  return p;
}

Prediction T2ICountModel::run_baseline(const DenoiserOutput& features, const TextEmbedding& text) const {
  const auto& f4 = features.pyramid.level(4);
  StageFeatures v4{f4_projection_(f4), 4};
  Prediction p;
  p.similarity.push_back(similarity_map(v4, baseline_text_.pooled(text)));
  const int factor = features.pyramid.level(1).height() / f4.height();
  p.density = ad::apply_pixel_operator((*head_)(v4.features), spread_operator<Real>(f4.height(), f4.width(), factor));
  p.attention = features.attention;
  return p;
}

Prediction T2ICountModel::forward(const Grid<Real>& image, const std::string& prompt,
                                  std::mt19937_64& noise_rng) const {
  const auto z0 = backbone_->encode_image(image);
  const auto z_t = forward_diffuse(z0, config_.backbone.timestep, schedule_, noise_rng);
  return forward_latent(z_t, backbone_->encode_text(prompt));
}

Prediction T2ICountModel::forward(const Grid<Real>& image, const std::string& prompt) const {
  std::mt19937_64 rng(config_.backbone.seed);
  return forward(image, prompt, rng);
}

TotalLoss T2ICountModel::loss(const Prediction& p, const Grid<Real>& target, const LossWeights& weights,
                              const std::vector<Real>& fusion_weights, const RegressionLoss& regression) const {
  LossWeights w = weights;
  if (config_.variant == Variant::Baseline) w.gamma = 0;
  return total_loss(p.density, target, p.similarity, p.attention, w, fusion_weights, regression);
}

}  // namespace t2i
