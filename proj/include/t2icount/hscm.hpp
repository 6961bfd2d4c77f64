#pragma once

// Hierarchical semantic correction over the decoder pyramid.
//
// Stage 3: fuse(V4, F3) -> SEM -> (V3, S3)
// Stage 2: fuse(V3, F2) -> SCM(V3, S3) -> SEM -> (V2, S2)
// Stage 1: fuse(V2, F1) -> SCM(V2, S2) -> V1
// with V4 = F4 projected to the embedding width.

#include <array>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "t2icount/backbone.hpp"
#include "t2icount/nn.hpp"

namespace t2i {

struct HscmConfig {
  int embed_dim = 256;
  int heads = 8;
  bool enabled = true;
};

struct StageFeatures {
  ad::Var<Real> features;  // [d_e, h*w]
  int stage = 0;
};

struct SimilarityMap {
  ad::Var<Real> values;  // [1, h*w], in [-1, 1]
  int stage = 0;
};

struct StageEvent {
  std::string op;  // "fuse", "scm" or "sem"
  int stage = 0;
};

struct HscmOutput {
  StageFeatures v1;
  std::vector<SimilarityMap> similarity;  // S3 then S2
  std::vector<StageEvent> trace;
  std::map<int, ad::Var<Real>> fused;      // F'_i straight out of fusion
  std::map<int, ad::Var<Real>> corrected;  // F'_i after SCM (stages 2 and 1)
};

// Cosine similarity of every pixel's feature vector with `text` ([d_e, 1]).
// A zero vector on either side gives 0.
SimilarityMap similarity_map(const StageFeatures& v, const ad::Var<Real>& text);

// F'_i + Up(V_{i+1} * S_{i+1}), S broadcast over channels.
ad::Var<Real> scm(const ad::Var<Real>& fused, const StageFeatures& next, const SimilarityMap& next_similarity);

// Learned d_txt -> d_e projection shared by the pooled vector and token sequence.
class TextProjection {
 public:
  TextProjection() = default;
  TextProjection(nn::ParameterStore<Real>& store, const std::string& name, int text_dim, int embed_dim,
                 std::mt19937_64& rng);

  ad::Var<Real> pooled(const TextEmbedding& text) const;  // [d_e, 1]
  ad::Var<Real> tokens(const TextEmbedding& text) const;  // [d_e, L]
  const nn::Linear<Real>& linear() const { return linear_; }

 private:
  nn::Linear<Real> linear_;
};

class Hscm {
 public:
  Hscm(HscmConfig config, const std::array<int, kPyramidLevels>& pyramid_channels, int text_dim,
       nn::ParameterStore<Real>& store, std::mt19937_64& rng);

  ad::Var<Real> project_text(const TextEmbedding& text) const { return text_projection_.pooled(text); }
  ad::Var<Real> project_level(int level, const ad::Var<Real>& f) const;

  // Conv(Concat(Up(V_{i+1}), proj(F_i))) for stage i in {1, 2, 3}.
  ad::Var<Real> fuse_adjacent(int stage, const StageFeatures& next, const ad::Var<Real>& level) const;

  // Text->image then image->text attention; S from the updated end-of-sequence token.
  std::pair<StageFeatures, SimilarityMap> sem(int stage, const ad::Var<Real>& fused, const TextEmbedding& text) const;

  HscmOutput run(const FeaturePyramid& pyramid, const TextEmbedding& text) const;

  const HscmConfig& config() const { return config_; }

 private:
  HscmConfig config_;
  std::array<int, kPyramidLevels> pyramid_channels_;
  TextProjection text_projection_;
  std::array<nn::Conv2d<Real>, kPyramidLevels> level_projection_;
  std::array<nn::Conv2d<Real>, 3> fusion_;  // index stage - 1
  std::array<nn::AttentionBlock<Real>, 2> text_to_image_;  // index stage - 2
  std::array<nn::AttentionBlock<Real>, 2> image_to_text_;
};

}  // namespace t2i
