#pragma once

// Feature extraction from a latent denoiser: image/text encoding, the
// forward noising step, and a single denoiser pass that yields a 4-level
// decoder pyramid plus the text-to-image attention maps.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "t2icount/autodiff.hpp"
#include "t2icount/nn.hpp"
#include "t2icount/tensor.hpp"

namespace t2i {

inline constexpr int kLatentScale = 8;
inline constexpr int kPyramidLevels = 4;

struct LatentImage {
  Grid<Real> data;  // [C_lat, H, W]

  int height() const { return data.height; }
  int width() const { return data.width; }
  int channels() const { return data.channels(); }
};

struct TextEmbedding {
  Mat<Real> tokens;  // [d_txt, L], one column per token
  Vec<Real> pooled;  // end-of-sequence token
  std::string prompt;
  std::vector<int> class_tokens;  // token columns holding the prompt's words

  int length() const { return static_cast<int>(tokens.cols()); }
  int dim() const { return static_cast<int>(tokens.rows()); }
};

// levels[0] is F_1 at latent resolution; each following level halves it.
struct FeaturePyramid {
  std::array<ad::Var<Real>, kPyramidLevels> levels;

  const ad::Var<Real>& level(int i) const { return levels.at(i - 1); }
};

struct AttentionMap {
  int resolution = 0;  // map height
  Grid<Real> attention;
};

// Coarse to fine: H/4, H/2, H.
struct CrossAttentionStack {
  std::vector<AttentionMap> maps;
};

struct DenoiserOutput {
  FeaturePyramid pyramid;
  CrossAttentionStack attention;
};

class NoiseSchedule {
 public:
  // alpha_bar[t] for t = 0..T; alpha_bar[0] = 1 means "no noise".
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  // Latent-diffusion v1.x betas: linear in sqrt(beta) between the two ends.
  static NoiseSchedule scaled_linear(int steps = 1000, double beta_start = 0.00085, double beta_end = 0.012);

  double alpha_bar(int t) const;
  int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }

 private:
  std::vector<double> alpha_bar_;
};

// z_t = sqrt(a) z0 + sqrt(1 - a) eps.
LatentImage diffuse(const LatentImage& z0, double alpha_bar, const Grid<Real>& eps);
LatentImage forward_diffuse(const LatentImage& z0, int t, const NoiseSchedule& schedule, const Grid<Real>& eps);
LatentImage forward_diffuse(const LatentImage& z0, int t, const NoiseSchedule& schedule, std::mt19937_64& rng);

enum class BackboneKind { Real, Mock, Tiny };

BackboneKind parse_backbone_kind(const std::string& s);
std::string to_string(BackboneKind k);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::Tiny;
  int timestep = 1;
  std::uint64_t seed = 0;
  int latent_channels = 16;
  int text_dim = 32;
  int text_vocab = 4096;
  int max_tokens = 16;
  std::array<int, kPyramidLevels> widths{32, 32, 48, 64};  // channels of F_1..F_4
  int attn_heads = 4;
  bool mock_differentiable = false;  // mock pyramid levels become gradient leaves
};

class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual BackboneKind kind() const = 0;
  // image: RGB in [0, 1], both sides multiples of 8.
  virtual LatentImage encode_image(const Grid<Real>& image) const = 0;
  virtual TextEmbedding encode_text(const std::string& prompt) const = 0;
  virtual DenoiserOutput denoise_features(const LatentImage& z_t, const TextEmbedding& text) const = 0;

  virtual int latent_channels() const = 0;
  virtual int text_dim() const = 0;
  virtual std::array<int, kPyramidLevels> pyramid_channels() const = 0;
};

// Shared precondition checks.
void check_image(const Grid<Real>& image);
std::vector<std::string> tokenize_prompt(const std::string& prompt);

// Deterministic features and attention seeded by (latent digest, prompt digest).
class MockBackbone final : public Backbone {
 public:
  explicit MockBackbone(BackboneConfig config);

  BackboneKind kind() const override { return BackboneKind::Mock; }
  LatentImage encode_image(const Grid<Real>& image) const override;
  TextEmbedding encode_text(const std::string& prompt) const override;
  DenoiserOutput denoise_features(const LatentImage& z_t, const TextEmbedding& text) const override;

  int latent_channels() const override { return config_.latent_channels; }
  int text_dim() const override { return config_.text_dim; }
  std::array<int, kPyramidLevels> pyramid_channels() const override { return config_.widths; }

 private:
  BackboneConfig config_;
};

// A small encoder-decoder denoiser with text cross-attention, a frozen
// patch-projection image encoder and a frozen hashed-vocabulary text encoder.
class TinyBackbone final : public Backbone {
 public:
  TinyBackbone(BackboneConfig config, nn::ParameterStore<Real>& store, std::mt19937_64& rng);

  BackboneKind kind() const override { return BackboneKind::Tiny; }
  LatentImage encode_image(const Grid<Real>& image) const override;
  TextEmbedding encode_text(const std::string& prompt) const override;
  DenoiserOutput denoise_features(const LatentImage& z_t, const TextEmbedding& text) const override;

  int latent_channels() const override { return config_.latent_channels; }
  int text_dim() const override { return config_.text_dim; }
  std::array<int, kPyramidLevels> pyramid_channels() const override { return config_.widths; }

 private:
  BackboneConfig config_;

  // frozen
  ad::Var<Real> patch_projection_;  // [C_lat, 64 * 3]
  ad::Var<Real> token_table_;       // [d_txt, vocab]
  ad::Var<Real> position_table_;    // [d_txt, max_tokens]
  ad::Var<Real> text_mixer_;        // [d_txt, d_txt]

  // trainable denoiser
  std::array<nn::Conv2d<Real>, 4> down_;
  nn::Conv2d<Real> mid_conv_;
  nn::AttentionBlock<Real> mid_attn_;
  std::array<nn::Conv2d<Real>, 3> up_;            // stages producing F_3, F_2, F_1
  std::array<nn::AttentionBlock<Real>, 3> up_attn_;
};

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& config, nn::ParameterStore<Real>& store,
                                        std::mt19937_64& rng);

// Digest of a latent's bytes; seeds the mock backbone and inference noise.
std::uint64_t digest(const Grid<Real>& g);

}  // namespace t2i
