#include "t2icount/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "t2icount/hash.hpp"
#include "t2icount/resample.hpp"

namespace t2i {

// ---------------------------------------------------------------- schedule

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.empty()) throw ConfigError("noise schedule: empty");
  for (std::size_t t = 0; t < alpha_bar_.size(); ++t) {
    const double a = alpha_bar_[t];
    if (!(a > 0.0 && a <= 1.0)) throw ConfigError("noise schedule: alpha_bar outside (0, 1] at t=" + std::to_string(t));
    if (t > 0 && a > alpha_bar_[t - 1]) throw ConfigError("noise schedule: alpha_bar increases at t=" + std::to_string(t));
  }
}

NoiseSchedule NoiseSchedule::scaled_linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule: need at least one step");
  std::vector<double> alpha_bar(steps + 1);
  alpha_bar[0] = 1.0;
  const double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double root = s0 + (s1 - s0) * frac;
    alpha_bar[i + 1] = alpha_bar[i] * (1.0 - root * root);
  }
  return NoiseSchedule(std::move(alpha_bar));
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw InputError("noise schedule: timestep " + std::to_string(t) + " out of range");
  return alpha_bar_[t];
}

LatentImage diffuse(const LatentImage& z0, double alpha_bar, const Grid<Real>& eps) {
  if (eps.channels() != z0.channels() || !eps.same_raster(z0.data))
    throw DimensionError("forward_diffuse: noise shape differs from latent");
  const Real a = std::sqrt(static_cast<Real>(alpha_bar));
  const Real b = std::sqrt(static_cast<Real>(1.0 - alpha_bar));
  LatentImage out{Grid<Real>(a * z0.data.data + b * eps.data, z0.height(), z0.width())};
  return out;
}

LatentImage forward_diffuse(const LatentImage& z0, int t, const NoiseSchedule& schedule, const Grid<Real>& eps) {
  return diffuse(z0, schedule.alpha_bar(t), eps);
}

LatentImage forward_diffuse(const LatentImage& z0, int t, const NoiseSchedule& schedule, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Grid<Real> eps(z0.channels(), z0.height(), z0.width());
  for (Eigen::Index i = 0; i < eps.data.size(); ++i) eps.data.data()[i] = static_cast<Real>(normal(rng));
  return forward_diffuse(z0, t, schedule, eps);
}

// ---------------------------------------------------------------- helpers

BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "real") return BackboneKind::Real;
  if (s == "mock") return BackboneKind::Mock;
  if (s == "tiny") return BackboneKind::Tiny;
  throw ConfigError("backbone.kind: unknown value '" + s + "' (expected real, mock or tiny)");
}

std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::Real:
      return "real";
    case BackboneKind::Mock:
      return "mock";
    case BackboneKind::Tiny:
      return "tiny";
  }
  return "?";
}

std::uint64_t digest(const Grid<Real>& g) {
  std::uint64_t h = fnv1a(&g.height, sizeof(g.height));
  h = fnv1a(&g.width, sizeof(g.width), h);
  return fnv1a(g.data.data(), sizeof(Real) * static_cast<std::size_t>(g.data.size()), h);
}

void check_image(const Grid<Real>& image) {
  if (image.channels() != 3) throw DimensionError("encode_image: expected 3 channels, got " + std::to_string(image.channels()));
  if (image.height <= 0 || image.width <= 0 || image.height % kLatentScale != 0 || image.width % kLatentScale != 0)
    throw DimensionError("encode_image: " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not a multiple of " + std::to_string(kLatentScale));
  if (!image.all_finite()) throw InputError("encode_image: non-finite pixel values");
}

std::vector<std::string> tokenize_prompt(const std::string& prompt) {
  std::vector<std::string> words;
  std::istringstream in(prompt);
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    words.push_back(w);
  }
  if (words.empty()) throw InputError("encode_text: empty prompt");
  return words;
}

namespace {

void check_denoiser_inputs(const LatentImage& z, const TextEmbedding& text, int latent_channels, int text_dim) {
  if (z.channels() != latent_channels)
    throw DimensionError("denoise_features: latent has " + std::to_string(z.channels()) + " channels, expected " +
                         std::to_string(latent_channels));
  if (text.dim() != text_dim)
    throw DimensionError("denoise_features: text width " + std::to_string(text.dim()) + ", expected " +
                         std::to_string(text_dim));
  if (z.height() % 8 != 0 || z.width() % 8 != 0 || z.height() == 0 || z.width() == 0)
    throw DimensionError("denoise_features: latent " + std::to_string(z.height()) + "x" + std::to_string(z.width()) +
                         " cannot be halved three times");
}

// Mean over heads was taken by the attention layer; here the class-token
// columns are averaged into one spatial map.
Grid<Real> harvest(const Mat<Real>& probs, const std::vector<int>& class_tokens, int h, int w) {
  Grid<Real> map(1, h, w);
  for (int t : class_tokens) map.data.row(0) += probs.col(t).transpose();
  map.data /= static_cast<Real>(class_tokens.size());
  return map;
}

// Bag of token ids: BOS=0, EOS=1, words hashed into [2, vocab).
std::vector<int> token_ids(const std::vector<std::string>& words, int vocab, int max_tokens) {
  std::vector<int> ids{0};
  const std::size_t n = std::min<std::size_t>(words.size(), static_cast<std::size_t>(max_tokens - 2));
  for (std::size_t i = 0; i < n; ++i) ids.push_back(2 + static_cast<int>(fnv1a(words[i]) % static_cast<std::uint64_t>(vocab - 2)));
  ids.push_back(1);
  return ids;
}

// Causal running mean of (token + position) embeddings, mixed through tanh.
TextEmbedding encode_tokens(const std::string& prompt, const Mat<Real>& embedded, const Mat<Real>& mixer) {
  const Eigen::Index length = embedded.cols();
  Mat<Real> running(embedded.rows(), length);
  Vec<Real> acc = Vec<Real>::Zero(embedded.rows());
  for (Eigen::Index i = 0; i < length; ++i) {
    acc += embedded.col(i);
    running.col(i) = acc / static_cast<Real>(i + 1);
  }
  TextEmbedding out;
  out.tokens = (mixer * running).array().tanh().matrix();
  out.pooled = out.tokens.col(length - 1);
  out.prompt = prompt;
  for (int i = 1; i + 1 < length; ++i) out.class_tokens.push_back(i);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- mock

MockBackbone::MockBackbone(BackboneConfig config) : config_(std::move(config)) {}

LatentImage MockBackbone::encode_image(const Grid<Real>& image) const {
  check_image(image);
  auto pool = sum_pool_operator<Real>(image.height, image.width, kLatentScale);
  Grid<Real> pooled = apply(image, *pool);
  pooled.data /= static_cast<Real>(kLatentScale * kLatentScale);
  std::mt19937_64 rng(config_.seed ^ 0x6d6f636b696d67ULL);
  Mat<Real> mix = nn::normal_init<Real>(config_.latent_channels, 3, 1.0, rng);
  return LatentImage{Grid<Real>(mix * (pooled.data.array() * 2 - 1).matrix(), pooled.height, pooled.width)};
}

TextEmbedding MockBackbone::encode_text(const std::string& prompt) const {
  const auto words = tokenize_prompt(prompt);
  const auto ids = token_ids(words, config_.text_vocab, config_.max_tokens);
  Mat<Real> embedded(config_.text_dim, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::mt19937_64 rng(fnv1a(std::to_string(ids[i])) ^ config_.seed);
    embedded.col(static_cast<Eigen::Index>(i)) = nn::normal_init<Real>(config_.text_dim, 1, 1.0, rng);
  }
  std::mt19937_64 rng(config_.seed ^ 0x6d697872ULL);
  const Mat<Real> mixer = nn::normal_init<Real>(config_.text_dim, config_.text_dim, 1.0 / std::sqrt(config_.text_dim), rng);
  return encode_tokens(prompt, embedded, mixer);
}

DenoiserOutput MockBackbone::denoise_features(const LatentImage& z_t, const TextEmbedding& text) const {
  check_denoiser_inputs(z_t, text, config_.latent_channels, config_.text_dim);
  std::mt19937_64 rng(digest(z_t.data) ^ fnv1a(text.prompt) ^ config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  DenoiserOutput out;
  for (int i = 0; i < kPyramidLevels; ++i) {
    const int h = z_t.height() >> i, w = z_t.width() >> i;
    Mat<Real> v(config_.widths[i], static_cast<Eigen::Index>(h) * w);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<Real>(normal(rng));
    out.pyramid.levels[i] = ad::Var<Real>::leaf(std::move(v), config_.mock_differentiable, h, w);
  }
  for (int shift : {2, 1, 0}) {
    const int h = z_t.height() >> shift, w = z_t.width() >> shift;
    Grid<Real> a(1, h, w);
    for (Eigen::Index k = 0; k < a.data.size(); ++k) a.data.data()[k] = static_cast<Real>(uniform(rng));
    out.attention.maps.push_back({h, std::move(a)});
  }
  return out;
}

// ---------------------------------------------------------------- tiny

TinyBackbone::TinyBackbone(BackboneConfig config, nn::ParameterStore<Real>& store, std::mt19937_64& rng)
    : config_(std::move(config)) {
  using nn::ParamGroup;
  const int patch = kLatentScale * kLatentScale * 3;
  const auto& w = config_.widths;
  const int d = config_.text_dim;
  patch_projection_ = store.add("backbone.image_encoder.projection",
                                nn::normal_init<Real>(config_.latent_channels, patch, std::sqrt(3.0 / patch), rng),
                                ParamGroup::FrozenEncoder);
  token_table_ = store.add("backbone.text_encoder.tokens", nn::normal_init<Real>(d, config_.text_vocab, 1.0, rng),
                           ParamGroup::FrozenEncoder);
  position_table_ = store.add("backbone.text_encoder.positions",
                              nn::normal_init<Real>(d, config_.max_tokens, 0.1, rng), ParamGroup::FrozenEncoder);
  text_mixer_ = store.add("backbone.text_encoder.mixer", nn::normal_init<Real>(d, d, 1.0 / std::sqrt(d), rng),
                          ParamGroup::FrozenEncoder);

  const auto group = ParamGroup::Denoiser;
  const std::string p = "backbone.denoiser.";
  down_[0] = nn::Conv2d<Real>(store, p + "down0", config_.latent_channels, w[0], 3, 1, group, rng);
  down_[1] = nn::Conv2d<Real>(store, p + "down1", w[0], w[1], 3, 2, group, rng);
  down_[2] = nn::Conv2d<Real>(store, p + "down2", w[1], w[2], 3, 2, group, rng);
  down_[3] = nn::Conv2d<Real>(store, p + "down3", w[2], w[3], 3, 2, group, rng);
  mid_conv_ = nn::Conv2d<Real>(store, p + "mid.conv", w[3], w[3], 3, 1, group, rng);
  mid_attn_ = nn::AttentionBlock<Real>(store, p + "mid.cross", w[3], d, config_.attn_heads, false, group, rng);
  // up_[k] produces F_{3-k}: it sees Up(F_{4-k}) concatenated with the skip at that resolution.
  for (int k = 0; k < 3; ++k) {
    const int level = 3 - k;  // 1-based pyramid level being produced
    const int in = w[level] + w[level - 1];
    up_[k] = nn::Conv2d<Real>(store, p + "up" + std::to_string(level) + ".conv", in, w[level - 1], 3, 1, group, rng);
    up_attn_[k] = nn::AttentionBlock<Real>(store, p + "up" + std::to_string(level) + ".cross", w[level - 1], d,
                                           config_.attn_heads, false, group, rng);
  }
}

LatentImage TinyBackbone::encode_image(const Grid<Real>& image) const {
  check_image(image);
  const ad::ConvGeometry g = ad::conv_geometry(image.height, image.width, kLatentScale, kLatentScale, 0);
  Mat<Real> patches = ad::im2col<Real>((image.data.array() * 2 - 1).matrix(), g);
  return LatentImage{Grid<Real>(patch_projection_.value() * patches, g.out_h, g.out_w)};
}

TextEmbedding TinyBackbone::encode_text(const std::string& prompt) const {
  const auto words = tokenize_prompt(prompt);
  const auto ids = token_ids(words, config_.text_vocab, config_.max_tokens);
  Mat<Real> embedded(config_.text_dim, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i)
    embedded.col(static_cast<Eigen::Index>(i)) =
        token_table_.value().col(ids[i]) + position_table_.value().col(static_cast<Eigen::Index>(i));
  return encode_tokens(prompt, embedded, text_mixer_.value());
}

DenoiserOutput TinyBackbone::denoise_features(const LatentImage& z_t, const TextEmbedding& text) const {
  check_denoiser_inputs(z_t, text, config_.latent_channels, config_.text_dim);
  const auto x = ad::Var<Real>::from_grid(z_t.data);
  const auto ctx = ad::Var<Real>::constant(text.tokens);

  std::array<ad::Var<Real>, 4> skip;
  skip[0] = ad::silu(down_[0](x));
  for (int k = 1; k < 4; ++k) skip[k] = ad::silu(down_[k](skip[k - 1]));

  DenoiserOutput out;
  out.pyramid.levels[3] = mid_attn_(ad::silu(mid_conv_(skip[3])), ctx);
  for (int k = 0; k < 3; ++k) {
    const int level = 3 - k;
    const auto& coarser = out.pyramid.levels[level];
    auto merged = ad::concat_rows<Real>({upsample2(coarser), skip[level - 1]});
    Mat<Real> probs;
    out.pyramid.levels[level - 1] = up_attn_[k](ad::silu(up_[k](merged)), ctx, &probs);
    const auto& f = out.pyramid.levels[level - 1];
    out.attention.maps.push_back({f.height(), harvest(probs, text.class_tokens, f.height(), f.width())});
  }
  return out;
}

// ---------------------------------------------------------------- factory

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& config, nn::ParameterStore<Real>& store,
                                        std::mt19937_64& rng) {
  if (config.timestep < 0) throw ConfigError("backbone.timestep must be non-negative");
  switch (config.kind) {
    case BackboneKind::Mock:
      return std::make_unique<MockBackbone>(config);
    case BackboneKind::Tiny:
      return std::make_unique<TinyBackbone>(config, store, rng);
    case BackboneKind::Real:
      throw ConfigError(
          "backbone.kind=real needs pretrained latent-diffusion v1.5 weights (U-Net, VAE encoder, CLIP text "
          "encoder), which this build does not bundle; use 'tiny' or 'mock'");
  }
  throw ConfigError("backbone.kind: unhandled value");
}

}  // namespace t2i
