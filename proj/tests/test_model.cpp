#include <doctest.h>

#include <random>

#include "support/tiny.hpp"
#include "t2icount/model.hpp"

using namespace t2i;

namespace {

ModelConfig tiny_model(const std::string& variant) {
  auto c = testing::tiny_config();
  t2i::apply_override(c, "train.variant=" + variant);
  return parse_config(c).model;
}

Grid<Real> image(int h, int w) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  Grid<Real> g(3, h, w);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) g.data.data()[i] = u(rng);
  return g;
}

bool has_prefix(const nn::ParameterStore<Real>& s, const std::string& prefix) {
  for (const auto& p : s.all())
    if (p.name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("variant names round trip") {
  for (auto v : {Variant::Baseline, Variant::BaselineRrc, Variant::Full}) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("hscm"), ConfigError);
}

TEST_CASE("full variant: latent-resolution density, similarity at H/32 and H/16") {
  T2ICountModel m(tiny_model("full"));
  CHECK(m.has_hscm());
  CHECK(has_prefix(m.parameters(), "hscm."));
  const auto p = m.forward(image(128, 64), "dots");
  CHECK(p.density.height() == 16);
  CHECK(p.density.width() == 8);
  CHECK((p.density.value().array() >= 0).all());
  REQUIRE(p.similarity.size() == 2);
  CHECK(p.similarity[0].values.height() == 4);  // S3
  CHECK(p.similarity[0].values.width() == 2);
  CHECK(p.similarity[1].values.height() == 8);  // S2
  CHECK(p.similarity[1].values.width() == 4);
  for (const auto& s : p.similarity) CHECK(s.values.value().cwiseAbs().maxCoeff() <= 1 + 1e-12);
  CHECK(p.attention.maps.size() == 3);
}

TEST_CASE("baseline variants have no HSCM and compare on F4") {
  for (const std::string v : {"baseline", "baseline+rrc"}) {
    T2ICountModel m(tiny_model(v));
    CHECK_FALSE(m.has_hscm());
    CHECK_FALSE(has_prefix(m.parameters(), "hscm."));
    const auto p = m.forward(image(128, 64), "boxes");
    CHECK(p.density.height() == 16);
    CHECK(p.density.width() == 8);
    REQUIRE(p.similarity.size() == 1);
    CHECK(p.similarity[0].values.height() == 2);  // F4 is H/64
    CHECK(p.similarity[0].values.width() == 1);
  }
}

TEST_CASE("disabling the HSCM selects the baseline") {
  auto c = testing::tiny_config();
  t2i::apply_override(c, "hscm.enabled=false");
  T2ICountModel m(parse_config(c).model);
  CHECK(m.variant() == Variant::Baseline);
  CHECK_FALSE(m.has_hscm());
}

TEST_CASE("inference is deterministic and prompt dependent") {
  T2ICountModel m(tiny_model("full"));
  const auto img = image(64, 64);
  const auto a = m.forward(img, "dots"), b = m.forward(img, "dots"), c = m.forward(img, "boxes");
  CHECK(a.density.value() == b.density.value());
  CHECK(a.density.value() != c.density.value());
  T2ICountModel m2(tiny_model("full"));
  CHECK(m2.forward(img, "dots").density.value() == a.density.value());
}

TEST_CASE("the real backbone is refused and bad images are rejected") {
  auto c = testing::tiny_config();
  t2i::apply_override(c, "backbone.kind=real");
  CHECK_THROWS_AS(T2ICountModel(parse_config(c).model), ConfigError);
  T2ICountModel m(tiny_model("full"));
  CHECK_THROWS_AS(m.forward(image(60, 64), "dots"), DimensionError);
  CHECK_THROWS_AS(m.forward(Grid<Real>(1, 64, 64), "dots"), DimensionError);
}
