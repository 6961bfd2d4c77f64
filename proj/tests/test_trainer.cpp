#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "support/tiny.hpp"
#include "t2icount/log.hpp"
#include "t2icount/trainer.hpp"

using namespace t2i;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  json config = testing::tiny_config();
  std::vector<SynthImage> images;
  std::vector<CountingSample> train, val;

  Fixture() {
    images = synth_images(parse_config(config).synth);
    train = synth_samples(images, Split::Train);
    val = synth_samples(images, Split::Val);
  }
  std::unique_ptr<T2ICountModel> model() const { return std::make_unique<T2ICountModel>(parse_config(config).model); }
};

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<CountingSample> batch_at(const std::vector<CountingSample>& s, std::size_t b) {
  return {s[(2 * b) % s.size()], s[(2 * b + 1) % s.size()]};
}

}  // namespace

TEST_CASE("parameter groups: denoiser at a tenth of the base rate, encoders frozen") {
  Fixture f;
  auto m = f.model();
  const TrainConfig tc = parse_config(f.config).train;
  const auto groups = build_param_groups(m->parameters(), tc);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].name == "denoiser");
  CHECK(groups[0].lr == doctest::Approx(1e-4));
  CHECK(groups[1].name == "head");
  CHECK(groups[1].lr == doctest::Approx(1e-3));

  std::vector<int> seen(m->parameters().all().size(), 0);
  for (const auto& g : groups)
    for (auto i : g.members) ++seen[i];
  const auto& all = m->parameters().all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].group == nn::ParamGroup::FrozenEncoder)
      CHECK_MESSAGE(seen[i] == 0, all[i].name);
    else
      CHECK_MESSAGE(seen[i] == 1, all[i].name);
  }
  CHECK(m->parameters().scalar_count(nn::ParamGroup::FrozenEncoder) > 0);
  CHECK(m->parameters().scalar_count(nn::ParamGroup::Denoiser) > 0);
}

TEST_CASE("AdamW matches a hand-computed update") {
  nn::ParameterStore<Real> store;
  Mat<Real> w0(1, 3);
  w0 << 1.0, -2.0, 0.5;
  store.add("w", w0, nn::ParamGroup::Head);
  store.add("u", Mat<Real>::Constant(1, 1, 4.0), nn::ParamGroup::Head);
  TrainConfig tc;
  tc.base_lr = 0.1;
  tc.weight_decay = 0.01;
  AdamW opt(tc, build_param_groups(store, tc), store);

  Mat<Real> g1(1, 3), g2(1, 3);
  g1 << 0.5, -1.0, 2.0;
  g2 << -0.25, 0.0, 1.0;
  auto& w = store.all()[0].var;
  w.node()->accumulate(g1);
  opt.step(store);
  w.zero_grad();
  w.node()->accumulate(g2);
  opt.step(store);

  const double b1 = 0.9, b2 = 0.999, lr = 0.1, wd = 0.01, eps = 1e-8;
  for (int k = 0; k < 3; ++k) {
    double x = w0(0, k), m = 0, v = 0;
    const double gs[2] = {g1(0, k), g2(0, k)};
    for (int t = 1; t <= 2; ++t) {
      m = b1 * m + (1 - b1) * gs[t - 1];
      v = b2 * v + (1 - b2) * gs[t - 1] * gs[t - 1];
      x *= 1 - lr * wd;
      x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    }
    CHECK(w.value()(0, k) == doctest::Approx(x).epsilon(1e-12));
  }
  CHECK(store.all()[1].var.value()(0, 0) == 4.0);  // never had a gradient
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("identical prediction and target with gamma 0 give zero loss and zero gradients") {
  Fixture f;
  apply_override(f.config, "loss.gamma=0");
  const AppConfig a = parse_config(f.config);
  auto m = f.model();
  const auto img = load(f.train[0]).image;
  const Prediction p = m->forward(img, "dots");
  const Grid<Real> target = p.density_grid();
  auto reg = make_regression_loss("mse_count");
  const TotalLoss l = m->loss(p, target, a.loss, a.fusion_weights, *reg);
  CHECK(l.parts.total == 0.0);
  m->parameters().zero_grad();
  ad::backward(l.value, 1.0);
  for (const auto& prm : m->parameters().all())
    if (prm.var.has_grad()) CHECK_MESSAGE(prm.var.grad().cwiseAbs().maxCoeff() == 0.0, prm.name);
}

TEST_CASE("training steps are deterministic and leave frozen encoders untouched") {
  Fixture f;
  auto a = f.model(), b = f.model();
  Trainer ta(f.config, *a), tb(f.config, *b);
  const auto frozen = frozen_digest(a->parameters());
  std::vector<double> la, lb;
  for (long s = 0; s < 10; ++s) {
    const auto batch = batch_at(f.train, static_cast<std::size_t>(s));
    const auto da = ta.train_step(batch, 0, s), db = tb.train_step(batch, 0, s);
    CHECK_FALSE(da.aborted);
    CHECK(std::isfinite(da.loss));
    CHECK(da.grad_norm > 0);
    CHECK(da.group_grad_norm.count("denoiser"));
    CHECK(da.positives + da.negatives + da.ambiguous == doctest::Approx(1.0));
    la.push_back(da.loss);
    lb.push_back(db.loss);
  }
  CHECK(la == lb);
  const auto& pa = a->parameters().all();
  const auto& pb = b->parameters().all();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].var.value() == pb[i].var.value());
  CHECK(frozen_digest(a->parameters()) == frozen);

  auto fresh = f.model();
  bool head_moved = false, denoiser_moved = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const bool moved = pa[i].var.value() != fresh->parameters().all()[i].var.value();
    if (pa[i].group == nn::ParamGroup::FrozenEncoder) CHECK_FALSE(moved);
    if (pa[i].group == nn::ParamGroup::Head) head_moved = head_moved || moved;
    if (pa[i].group == nn::ParamGroup::Denoiser) denoiser_moved = denoiser_moved || moved;
  }
  CHECK(head_moved);
  CHECK(denoiser_moved);
}

TEST_CASE("resuming mid-epoch reproduces the uninterrupted run") {
  Fixture f;
  TempDir d1("t2i_fit_full"), d2("t2i_fit_resume");
  auto m1 = f.model();
  const FitResult full = Trainer(f.config, *m1).fit(f.train, f.val, d1.path);
  REQUIRE(full.steps == 6);

  json capped = f.config;
  apply_override(capped, "train.max_steps=4");
  auto m2 = f.model();
  const FitResult first = Trainer(capped, *m2).fit(f.train, f.val, d2.path);
  CHECK(first.steps == 4);
  const auto state = load_checkpoint(d2.path / "last.ckpt").state;
  CHECK(state["epoch"] == 1);
  CHECK(state["batch_in_epoch"] == 1);

  auto m3 = f.model();
  ScopedWarningSink quiet([](const std::string&) {});
  const FitResult rest = Trainer(f.config, *m3).fit(f.train, f.val, d2.path, true);
  REQUIRE(rest.step_losses.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(rest.step_losses[i] == doctest::Approx(full.step_losses[4 + i]).epsilon(1e-6));
  CHECK(rest.steps == 6);

  const auto& p1 = m1->parameters().all();
  const auto& p3 = m3->parameters().all();
  for (std::size_t i = 0; i < p1.size(); ++i)
    CHECK(((p1[i].var.value() - p3[i].var.value()).cwiseAbs().maxCoeff()) <= 1e-9);
}

TEST_CASE("best checkpoint holds the lowest validation MAE") {
  Fixture f;
  apply_override(f.config, "train.epochs=3");
  TempDir d("t2i_fit_best");
  auto m = f.model();
  const FitResult r = Trainer(f.config, *m).fit(f.train, f.val, d.path);
  REQUIRE(r.val_mae.size() == 3);
  const auto lowest = std::min_element(r.val_mae.begin(), r.val_mae.end());
  CHECK(r.best_val_mae == *lowest);
  CHECK(r.best_epoch == lowest - r.val_mae.begin());

  const Checkpoint best = load_checkpoint(d.path / "best.ckpt");
  CHECK(best.state["best_val_mae"].get<double>() == *lowest);
  auto restored = model_from_checkpoint(best);
  Trainer t(best.config, *restored);
  CHECK(t.validate(f.val) == doctest::Approx(*lowest).epsilon(1e-12));

  std::ifstream log(d.path / "metrics.jsonl");
  int steps = 0, epochs = 0;
  for (std::string line; std::getline(log, line);) {
    const json j = json::parse(line);
    (j["kind"] == "step" ? steps : epochs)++;
  }
  CHECK(steps == 9);
  CHECK(epochs == 3);
}

TEST_CASE("checkpoint config mismatch is reported on resume") {
  Fixture f;
  TempDir d("t2i_fit_warn");
  apply_override(f.config, "train.epochs=1");
  auto m = f.model();
  Trainer(f.config, *m).fit(f.train, {}, d.path);
  json changed = f.config;
  apply_override(changed, "train.epochs=2");
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& w) { warnings.push_back(w); });
  auto m2 = f.model();
  Trainer(changed, *m2).fit(f.train, {}, d.path, true);
  CHECK(std::any_of(warnings.begin(), warnings.end(), [](const std::string& w) { return w.find("differs") != std::string::npos; }));
  CHECK_THROWS_AS(Trainer(changed, *m2).fit(f.train, {}, d.path / "nope", true), CheckpointError);
}
