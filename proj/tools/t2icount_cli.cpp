// t2icount: train, eval, predict, inspect, make-synth.
// Exit codes: 0 ok, 1 usage or config, 2 data, 3 numeric failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "t2icount/config.hpp"
#include "t2icount/evalrunner.hpp"
#include "t2icount/imageio.hpp"
#include "t2icount/log.hpp"
#include "t2icount/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace t2i;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> set;
  std::string checkpoint;
  std::string dataset;
  std::string split;
  std::string image;
  std::string prompt;
  std::string points;
  std::string out = "out";
  std::optional<double> tau, theta;
  bool oracle = false;
  bool resume = false;
};

// Config from the checkpoint when given, else defaults + file; overrides last.
json effective_config(const Options& o) {
  json c;
  if (!o.checkpoint.empty()) {
    c = load_checkpoint(o.checkpoint).config;
    if (!o.config.empty()) {
      std::ifstream in(o.config);
      if (!in) throw ConfigError("cannot open config " + o.config);
      json doc = json::parse(in, nullptr, false);
      if (doc.is_discarded()) throw ConfigError("config " + o.config + " is not valid JSON");
      merge_config(c, doc);
    }
    for (const auto& s : o.set) apply_override(c, s);
  } else {
    c = load_config(o.config, o.set);
  }
  parse_config(c);
  return c;
}

void echo_config(const fs::path& out, const json& c) {
  fs::create_directories(out);
  std::ofstream(out / "config.json") << c.dump(2) << "\n";
}

std::unique_ptr<T2ICountModel> build_model(const Options& o, const json& c) {
  if (o.checkpoint.empty()) return std::make_unique<T2ICountModel>(parse_config(c).model);
  return model_from_checkpoint(load_checkpoint(o.checkpoint));
}

fs::path minority_file(const DataConfig& d) {
  return d.minority_file.empty() ? fs::path(d.root) / "minority.json" : fs::path(d.minority_file);
}

std::vector<CountingSample> dataset_samples(const std::string& dataset, Split split, const AppConfig& a,
                                            std::string& prompt_mode) {
  prompt_mode = "class";
  if (dataset == "synth") return synth_samples(synth_images(a.synth), split);
  if (dataset == "synth-s") {
    prompt_mode = "minority";
    return synth_minority_samples(synth_images(a.synth), split);
  }
  if (dataset == "fsc147") return load_fsc147(a.data.root, split);
  if (dataset == "fsc147s") {
    prompt_mode = "minority";
    return load_fsc147s(minority_file(a.data), a.data.root);
  }
  if (dataset == "carpk") return load_carpk(a.data.root, split);
  throw ConfigError("unknown dataset '" + dataset + "' (expected synth, synth-s, fsc147, fsc147s or carpk)");
}

int cmd_train(const Options& o) {
  const json c = effective_config(o);
  const AppConfig a = parse_config(c);
  echo_config(o.out, c);
  std::string mode;
  const auto train = dataset_samples(a.data.dataset, Split::Train, a, mode);
  std::vector<CountingSample> val;
  if (a.data.dataset != "carpk") val = dataset_samples(a.data.dataset, Split::Val, a, mode);
  T2ICountModel model(a.model);
  Trainer trainer(c, model);
  std::cout << "training " << to_string(a.model.variant) << " on " << train.size() << " samples ("
            << val.size() << " validation)\n";
  const auto r = trainer.fit(train, val, o.out, o.resume, [&](const StepDiagnostics& d) {
    if (a.train.log_every > 0 && d.step % a.train.log_every == 0)
      std::printf("step %ld epoch %d loss %.5f reg %.5f rrc %.4f grad %.3f\n", d.step, d.epoch, d.loss, d.regression,
                  d.rrc, d.grad_norm);
  });
  std::cout << "steps " << r.steps;
  if (r.best_epoch >= 0) std::cout << ", best val MAE " << r.best_val_mae << " at epoch " << r.best_epoch;
  std::cout << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty() && !o.oracle) throw ConfigError("eval needs --checkpoint or --oracle");
  const json c = effective_config(o);
  const AppConfig a = parse_config(c);
  echo_config(o.out, c);
  const std::string dataset = o.dataset.empty() ? a.data.dataset : o.dataset;
  const std::string split_name = o.split.empty() ? a.eval.split : o.split;
  std::string mode;
  const auto samples = dataset_samples(dataset, parse_split(split_name), a, mode);
  std::unique_ptr<T2ICountModel> model;
  DensityFunction density;
  if (o.oracle) {
    density = oracle_density(a.data.sigma_px);
  } else {
    model = build_model(o, c);
    density = model_density(*model, a.eval.window);
  }
  const auto r = run_benchmark(samples, density, dataset, mode);
  write_report(o.out, r, split_name, config_hash(c));
  std::cout << format_table(r, split_name);
  if (r.failures) std::cerr << r.failures << " image(s) failed; see records.jsonl\n";
  if (r.metrics.n == 0) throw IngestionError("no image could be evaluated");
  return 0;
}

// One forward pass over the image reflect-padded to a multiple of 64.
struct SinglePass {
  Grid<Real> padded;
  Prediction prediction;
};

SinglePass single_pass(const T2ICountModel& model, const Grid<Real>& image, const std::string& prompt) {
  const int m = kLatentScale * 8;
  const int h = (image.height + m - 1) / m * m, w = (image.width + m - 1) / m * m;
  SinglePass s{reflect_pad(image, h, w), {}};
  ad::NoGradGuard guard;
  s.prediction = model.forward(s.padded, prompt);
  return s;
}

Grid<Real> crop_to(const Grid<Real>& g, int h, int w) { return crop(g, {}, 0, 0, h, w).image; }

// Map rendered over the padded image, then cut back to the input extent.
Grid<Real> overlay_on(const SinglePass& s, const Grid<Real>& map, int h, int w) {
  return crop_to(overlay(s.padded, map, 0.5), h, w);
}

std::vector<Point> read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open points file " + path);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_array()) throw IngestionError(path + ": expected a JSON array of [x, y] pairs");
  std::vector<Point> pts;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
      throw IngestionError(path + ": expected a JSON array of [x, y] pairs");
    pts.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return pts;
}

int cmd_predict(const Options& o) {
  if (o.image.empty() || o.prompt.empty()) throw ConfigError("predict needs --image and --prompt");
  const json c = effective_config(o);
  const AppConfig a = parse_config(c);
  echo_config(o.out, c);
  const auto model = build_model(o, c);
  const Grid<Real> image = read_image(o.image);

  Grid<Real> density;
  {
    ad::NoGradGuard guard;
    density = sliding_window_predict(ModelPredictor(*model), image, o.prompt, a.eval.window);
  }
  const double count = integrate(density);
  if (!std::isfinite(count)) throw NumericError("prediction is not finite");

  // The stitched map covers ceil(H/8) x ceil(W/8) cells; display it over the
  // image padded to that extent.
  const int ph = density.height * kLatentScale, pw = density.width * kLatentScale;
  const Grid<Real> padded = reflect_pad(image, ph, pw);
  write_image((fs::path(o.out) / "density.png").string(), crop_to(overlay(padded, density, 0.5), image.height, image.width));

  const SinglePass s = single_pass(*model, image, o.prompt);
  for (const auto& sim : s.prediction.similarity) {
    const std::string name = model->has_hscm() ? "similarity_s" + std::to_string(sim.stage) : "similarity_f4";
    write_image((fs::path(o.out) / (name + ".png")).string(),
                overlay_on(s, sim.values.grid(), image.height, image.width));
  }

  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", count);
  const json record = {{"image", o.image},
                       {"prompt", o.prompt},
                       {"count", std::stod(buf)},
                       {"count_text", buf},
                       {"height", image.height},
                       {"width", image.width},
                       {"window", a.eval.window},
                       {"variant", to_string(model->variant())}};
  std::ofstream(fs::path(o.out) / "prediction.json") << record.dump(2) << "\n";
  std::cout << o.prompt << ": " << buf << "\n";
  return 0;
}

int cmd_inspect(const Options& o) {
  if (o.image.empty() || o.prompt.empty()) throw ConfigError("inspect needs --image and --prompt");
  const json c = effective_config(o);
  const AppConfig a = parse_config(c);
  echo_config(o.out, c);
  const auto model = build_model(o, c);
  const Grid<Real> image = read_image(o.image);
  const double tau = o.tau.value_or(a.loss.tau), theta = o.theta.value_or(a.loss.theta);
  LossWeights check = a.loss;
  check.tau = tau;
  check.theta = theta;
  check.validate();

  const SinglePass s = single_pass(*model, image, o.prompt);
  const int lh = s.padded.height / kLatentScale, lw = s.padded.width / kLatentScale;
  const Grid<Real> fused = fuse_attention(s.prediction.attention, a.fusion_weights, lh, lw);
  // Fused weights sum to 1, so the map already lies in [0, 1].
  const fs::path out(o.out);
  write_image((out / "fused_attention.png").string(), overlay_on(s, fused, image.height, image.width));
  write_image((out / "fused_attention_gray.png").string(),
              crop_to(gray_image(fused, s.padded.height, s.padded.width), image.height, image.width));

  // White foreground, black pseudo-background (A <= theta).
  Grid<Real> background(1, lh, lw);
  for (Eigen::Index i = 0; i < fused.data.size(); ++i) background.data(0, i) = fused.data(0, i) <= theta ? 0.0 : 1.0;
  write_image((out / "pseudo_background.png").string(),
              crop_to(gray_image(background, s.padded.height, s.padded.width), image.height, image.width));

  json summary = {{"image", o.image}, {"prompt", o.prompt}, {"tau", tau}, {"theta", theta},
                  {"background_fraction", 1.0 - background.data.mean()}};
  if (o.points.empty()) {
    warn("no ground-truth points given; skipping the PNA map");
  } else {
    const auto pts = read_points(o.points);
    const Grid<Real> gt = pool_density(rasterize_density(pts, s.padded.height, s.padded.width, a.data.sigma_px), kLatentScale);
    const PnaMap pna = pna_map(gt, fused, static_cast<Real>(tau), static_cast<Real>(theta));
    // White positive, black negative, gray ambiguous.
    Grid<Real> shade(1, lh, lw);
    for (Eigen::Index i = 0; i < pna.labels.size(); ++i)
      shade.data(0, i) = pna.labels(i) == PnaMap::kPositive ? 1.0 : pna.labels(i) == PnaMap::kNegative ? 0.0 : 0.5;
    write_image((out / "pna.png").string(),
                crop_to(gray_image(shade, s.padded.height, s.padded.width), image.height, image.width));
    summary["positives"] = pna.count(PnaMap::kPositive);
    summary["negatives"] = pna.count(PnaMap::kNegative);
    summary["ambiguous"] = pna.count(PnaMap::kAmbiguous);
  }
  std::ofstream(out / "inspect.json") << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_make_synth(const Options& o) {
  const json c = effective_config(o);
  const AppConfig a = parse_config(c);
  const auto images = synth_images(a.synth);
  write_synth_corpus(o.out, images);
  std::cout << "wrote " << images.size() << " images to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-prompted object counting"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--set", o.set, "key=value override (repeatable)")->take_all();
    sub->add_option("--out", o.out, "output directory");
  };
  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_flag("--resume", o.resume, "continue from <out>/last.ckpt");

  auto* eval = app.add_subcommand("eval", "evaluate on a benchmark");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  eval->add_option("--dataset", o.dataset, "synth, synth-s, fsc147, fsc147s or carpk");
  eval->add_option("--split", o.split, "train, val or test");
  eval->add_flag("--oracle", o.oracle, "use ground-truth densities instead of a model");

  auto* predict = app.add_subcommand("predict", "count one image");
  common(predict);
  predict->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  predict->add_option("--image", o.image, "image file")->required();
  predict->add_option("--prompt", o.prompt, "class name")->required();

  auto* inspect = app.add_subcommand("inspect", "render attention, pseudo-background and PNA maps");
  common(inspect);
  inspect->add_option("--checkpoint", o.checkpoint, "checkpoint file (else an untrained model from --config)");
  inspect->add_option("--image", o.image, "image file")->required();
  inspect->add_option("--prompt", o.prompt, "class name")->required();
  inspect->add_option("--points", o.points, "JSON array of [x, y] ground-truth points");
  inspect->add_option("--tau", o.tau, "density threshold");
  inspect->add_option("--theta", o.theta, "attention threshold");

  auto* synth = app.add_subcommand("make-synth", "write the synthetic corpus to --out");
  common(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*predict) return cmd_predict(o);
    if (*inspect) return cmd_inspect(o);
    if (*synth) return cmd_make_synth(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
