#include "t2icount/config.hpp"

#include <fstream>

#include "t2icount/hash.hpp"

using nlohmann::json;

namespace t2i {

json default_config() {
  return {
      {"backbone",
       {{"kind", "tiny"},
        {"timestep", 1},
        {"seed", 0},
        {"latent_channels", 16},
        {"text_dim", 32},
        {"text_vocab", 4096},
        {"max_tokens", 16},
        {"widths", {32, 32, 48, 64}},
        {"attn_heads", 4}}},
      {"hscm", {{"embed_dim", 256}, {"heads", 8}, {"enabled", true}}},
      {"counter", {{"attn_heads", 8}, {"hidden_channels", 128}}},
      {"loss",
       {{"lambda", 2.0},
        {"gamma", 0.01},
        {"tau", "auto"},
        {"theta", 0.3},
        {"fusion_weights", {0.6, 0.3, 0.1}},
        {"reg_kind", "sse_count"}}},
      {"train",
       {{"base_lr", 5e-5},
        {"unet_lr_scale", 0.1},
        {"weight_decay", 1e-4},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"adam_eps", 1e-8},
        {"grad_clip", 1.0},
        {"batch_size", 16},
        {"epochs", 400},
        {"max_steps", 0},
        {"log_every", 10},
        {"seed", 0},
        {"init_seed", 0},
        {"variant", "full"}}},
      {"data",
       {{"dataset", "synth"},
        {"root", ""},
        {"minority_file", ""},
        {"sigma_px", 4.0},
        {"augment",
         {{"enabled", true},
          {"scale_min", 1.0},
          {"scale_max", 2.0},
          {"crop", 384},
          {"flip_prob", 0.5},
          {"brightness", 0.2},
          {"contrast", 0.2},
          {"saturation", 0.2}}}}},
      {"synth",
       {{"image_size", 128},
        {"train_images", 400},
        {"val_images", 50},
        {"test_images", 50},
        {"majority", {15, 45}},
        {"minority", {1, 5}},
        {"object_radius", 4.0},
        {"seed", 0}}},
      {"eval", {{"window", 384}, {"split", "test"}}},
  };
}

void merge_config(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " section " + prefix) + " must be an object");
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object())
      merge_config(slot, it.value(), key);
    else
      slot = it.value();
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  json value = json::parse(text, nullptr, false);
  *node = value.is_discarded() ? json(text) : value;
}

json load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json config = default_config();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config " + file.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + file.string() + " is not valid JSON");
    merge_config(config, doc);
  }
  for (const auto& o : overrides) apply_override(config, o);
  return config;
}

namespace {

template <typename T>
T get(const json& section, const char* key, const std::string& path) {
  try {
    return section.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + path + "." + key + "' has the wrong type");
  }
}

}  // namespace

AppConfig parse_config(const json& c) {
  AppConfig a;
  const auto& b = c.at("backbone");
  a.model.backbone.kind = parse_backbone_kind(get<std::string>(b, "kind", "backbone"));
  a.model.backbone.timestep = get<int>(b, "timestep", "backbone");
  a.model.backbone.seed = get<std::uint64_t>(b, "seed", "backbone");
  a.model.backbone.latent_channels = get<int>(b, "latent_channels", "backbone");
  a.model.backbone.text_dim = get<int>(b, "text_dim", "backbone");
  a.model.backbone.text_vocab = get<int>(b, "text_vocab", "backbone");
  a.model.backbone.max_tokens = get<int>(b, "max_tokens", "backbone");
  const auto widths = get<std::vector<int>>(b, "widths", "backbone");
  if (widths.size() != kPyramidLevels) throw ConfigError("backbone.widths needs 4 entries");
  std::copy(widths.begin(), widths.end(), a.model.backbone.widths.begin());
  a.model.backbone.attn_heads = get<int>(b, "attn_heads", "backbone");
  if (a.model.backbone.max_tokens < 3) throw ConfigError("backbone.max_tokens must be at least 3");

  const auto& h = c.at("hscm");
  a.model.hscm.embed_dim = get<int>(h, "embed_dim", "hscm");
  a.model.hscm.heads = get<int>(h, "heads", "hscm");
  a.model.hscm.enabled = get<bool>(h, "enabled", "hscm");

  const auto& k = c.at("counter");
  a.model.counter.attn_heads = get<int>(k, "attn_heads", "counter");
  a.model.counter.hidden_channels = get<int>(k, "hidden_channels", "counter");
  if (a.model.counter.hidden_channels < 2) throw ConfigError("counter.hidden_channels must be at least 2");

  const auto& d = c.at("data");
  a.data.dataset = get<std::string>(d, "dataset", "data");
  a.data.root = get<std::string>(d, "root", "data");
  a.data.minority_file = get<std::string>(d, "minority_file", "data");
  a.data.sigma_px = get<double>(d, "sigma_px", "data");
  const auto& g = d.at("augment");
  a.data.augment.enabled = get<bool>(g, "enabled", "data.augment");
  a.data.augment.scale_min = get<double>(g, "scale_min", "data.augment");
  a.data.augment.scale_max = get<double>(g, "scale_max", "data.augment");
  a.data.augment.crop = get<int>(g, "crop", "data.augment");
  a.data.augment.flip_prob = get<double>(g, "flip_prob", "data.augment");
  a.data.augment.brightness = get<double>(g, "brightness", "data.augment");
  a.data.augment.contrast = get<double>(g, "contrast", "data.augment");
  a.data.augment.saturation = get<double>(g, "saturation", "data.augment");

  const auto& l = c.at("loss");
  a.loss.lambda = get<double>(l, "lambda", "loss");
  a.loss.gamma = get<double>(l, "gamma", "loss");
  if (l.at("tau").is_string() && l.at("tau") == "auto")
    a.loss.tau = default_tau(a.data.sigma_px);
  else
    a.loss.tau = get<double>(l, "tau", "loss");
  a.loss.theta = get<double>(l, "theta", "loss");
  a.loss.validate();
  a.fusion_weights = get<std::vector<Real>>(l, "fusion_weights", "loss");
  if (a.fusion_weights.size() != 3) throw ConfigError("loss.fusion_weights needs one weight per attention map (3)");
  a.reg_kind = get<std::string>(l, "reg_kind", "loss");
  make_regression_loss(a.reg_kind);

  const auto& t = c.at("train");
  a.train.base_lr = get<double>(t, "base_lr", "train");
  a.train.unet_lr_scale = get<double>(t, "unet_lr_scale", "train");
  a.train.weight_decay = get<double>(t, "weight_decay", "train");
  a.train.beta1 = get<double>(t, "beta1", "train");
  a.train.beta2 = get<double>(t, "beta2", "train");
  a.train.adam_eps = get<double>(t, "adam_eps", "train");
  a.train.grad_clip = get<double>(t, "grad_clip", "train");
  a.train.batch_size = get<int>(t, "batch_size", "train");
  a.train.epochs = get<int>(t, "epochs", "train");
  a.train.max_steps = get<int>(t, "max_steps", "train");
  a.train.log_every = get<int>(t, "log_every", "train");
  a.train.seed = get<std::uint64_t>(t, "seed", "train");
  a.train.variant = parse_variant(get<std::string>(t, "variant", "train"));
  a.model.init_seed = get<std::uint64_t>(t, "init_seed", "train");
  a.model.variant = a.train.variant;
  if (!(a.train.base_lr > 0) || !(a.train.unet_lr_scale > 0)) throw ConfigError("train: learning rates must be positive");
  if (a.train.weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (a.train.batch_size < 1 || a.train.epochs < 1) throw ConfigError("train: batch_size and epochs must be positive");

  const auto& s = c.at("synth");
  a.synth.image_size = get<int>(s, "image_size", "synth");
  a.synth.train_images = get<int>(s, "train_images", "synth");
  a.synth.val_images = get<int>(s, "val_images", "synth");
  a.synth.test_images = get<int>(s, "test_images", "synth");
  const auto maj = get<std::vector<int>>(s, "majority", "synth");
  const auto mino = get<std::vector<int>>(s, "minority", "synth");
  if (maj.size() != 2 || mino.size() != 2) throw ConfigError("synth count ranges are [lo, hi] pairs");
  a.synth.majority = {maj[0], maj[1]};
  a.synth.minority = {mino[0], mino[1]};
  a.synth.object_radius = get<double>(s, "object_radius", "synth");
  a.synth.seed = get<std::uint64_t>(s, "seed", "synth");

  const auto& e = c.at("eval");
  a.eval.window = get<int>(e, "window", "eval");
  a.eval.split = get<std::string>(e, "split", "eval");
  parse_split(a.eval.split);
  if (a.eval.window <= 0 || a.eval.window % kLatentScale != 0)
    throw ConfigError("eval.window must be a positive multiple of 8");
  return a;
}

std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

}  // namespace t2i
