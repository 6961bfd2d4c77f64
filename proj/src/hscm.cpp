#include "t2icount/hscm.hpp"

#include "t2icount/resample.hpp"

namespace t2i {

SimilarityMap similarity_map(const StageFeatures& v, const ad::Var<Real>& text) {
  return {ad::cosine_columns(v.features, text), v.stage};
}

ad::Var<Real> scm(const ad::Var<Real>& fused, const StageFeatures& next, const SimilarityMap& next_similarity) {
  const auto& v = next.features;
  const auto& s = next_similarity.values;
  if (v.height() != s.height() || v.width() != s.width())
    throw DimensionError("scm: similarity map raster differs from stage features");
  if (fused.height() != 2 * v.height() || fused.width() != 2 * v.width())
    throw DimensionError("scm: fused features must be twice the resolution of the previous stage");
  if (fused.rows() != v.rows()) throw DimensionError("scm: channel widths differ");
  return ad::add(fused, upsample2(ad::mul_rows(v, s)));
}

TextProjection::TextProjection(nn::ParameterStore<Real>& store, const std::string& name, int text_dim, int embed_dim,
                               std::mt19937_64& rng)
    : linear_(store, name, text_dim, embed_dim, nn::ParamGroup::Head, rng) {}

ad::Var<Real> TextProjection::pooled(const TextEmbedding& text) const {
  if (text.pooled.size() != linear_.weight.cols())
    throw DimensionError("project_text: pooled width " + std::to_string(text.pooled.size()) + ", expected " +
                         std::to_string(linear_.weight.cols()));
  return linear_(ad::Var<Real>::constant(text.pooled));
}

ad::Var<Real> TextProjection::tokens(const TextEmbedding& text) const {
  if (text.tokens.rows() != linear_.weight.cols()) throw DimensionError("project_text: token width mismatch");
  return linear_(ad::Var<Real>::constant(text.tokens));
}

Hscm::Hscm(HscmConfig config, const std::array<int, kPyramidLevels>& pyramid_channels, int text_dim,
           nn::ParameterStore<Real>& store, std::mt19937_64& rng)
    : config_(config), pyramid_channels_(pyramid_channels) {
  const int d = config_.embed_dim;
  const auto group = nn::ParamGroup::Head;
  text_projection_ = TextProjection(store, "hscm.text_projection", text_dim, d, rng);
  for (int i = 0; i < kPyramidLevels; ++i)
    level_projection_[i] =
        nn::Conv2d<Real>(store, "hscm.level" + std::to_string(i + 1) + ".projection", pyramid_channels[i], d, 1, 1, group, rng);
  for (int stage = 1; stage <= 3; ++stage)
    fusion_[stage - 1] = nn::Conv2d<Real>(store, "hscm.stage" + std::to_string(stage) + ".fusion", 2 * d, d, 3, 1, group, rng);
  for (int stage = 2; stage <= 3; ++stage) {
    const std::string p = "hscm.stage" + std::to_string(stage) + ".sem";
    text_to_image_[stage - 2] = nn::AttentionBlock<Real>(store, p + ".text_to_image", d, d, config_.heads, false, group, rng);
    image_to_text_[stage - 2] = nn::AttentionBlock<Real>(store, p + ".image_to_text", d, d, config_.heads, false, group, rng);
  }
}

ad::Var<Real> Hscm::project_level(int level, const ad::Var<Real>& f) const {
  if (f.rows() != pyramid_channels_[level - 1])
    throw DimensionError("hscm: pyramid level " + std::to_string(level) + " has " + std::to_string(f.rows()) +
                         " channels, expected " + std::to_string(pyramid_channels_[level - 1]));
  return level_projection_[level - 1](f);
}

ad::Var<Real> Hscm::fuse_adjacent(int stage, const StageFeatures& next, const ad::Var<Real>& level) const {
  if (stage < 1 || stage > 3) throw InputError("fuse_adjacent: stage must be 1, 2 or 3");
  const auto& v = next.features;
  if (level.height() != 2 * v.height() || level.width() != 2 * v.width())
    throw DimensionError("fuse_adjacent: stage " + std::to_string(stage) + " level is " + std::to_string(level.height()) +
                         "x" + std::to_string(level.width()) + ", previous stage is " + std::to_string(v.height()) + "x" +
                         std::to_string(v.width()) + " (need exactly half)");
  auto merged = ad::concat_rows<Real>({upsample2(v), project_level(stage, level)});
  return fusion_[stage - 1](merged);
}

std::pair<StageFeatures, SimilarityMap> Hscm::sem(int stage, const ad::Var<Real>& fused, const TextEmbedding& text) const {
  if (stage < 2 || stage > 3) throw InputError("sem: only stages 2 and 3 carry a semantic enhancement block");
  const auto tokens = text_projection_.tokens(text);
  StageFeatures v{text_to_image_[stage - 2](fused, tokens), stage};
  const auto updated = image_to_text_[stage - 2](tokens, v.features);
  const auto summary = ad::slice_cols(updated, updated.cols() - 1, 1);
  return {v, similarity_map(v, summary)};
}

HscmOutput Hscm::run(const FeaturePyramid& pyramid, const TextEmbedding& text) const {
  HscmOutput out;
  StageFeatures v4{project_level(4, pyramid.level(4)), 4};

  auto f3 = fuse_adjacent(3, v4, pyramid.level(3));
  out.trace.push_back({"fuse", 3});
  out.fused[3] = f3;
  auto [v3, s3] = sem(3, f3, text);
  out.trace.push_back({"sem", 3});

  auto f2 = fuse_adjacent(2, v3, pyramid.level(2));
  out.trace.push_back({"fuse", 2});
  out.fused[2] = f2;
  f2 = scm(f2, v3, s3);
  out.trace.push_back({"scm", 2});
  out.corrected[2] = f2;
  auto [v2, s2] = sem(2, f2, text);
  out.trace.push_back({"sem", 2});

  auto f1 = fuse_adjacent(1, v2, pyramid.level(1));
  out.trace.push_back({"fuse", 1});
  out.fused[1] = f1;
  f1 = scm(f1, v2, s2);
  out.trace.push_back({"scm", 1});
  out.corrected[1] = f1;

  out.v1 = {f1, 1};
  out.similarity = {s3, s2};
  return out;
}

}  // namespace t2i
