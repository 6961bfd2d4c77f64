#pragma once

// Hierarchical JSON configuration: built-in defaults, an optional file merged
// on top, then key=value overrides. Unknown keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2icount/data.hpp"
#include "t2icount/model.hpp"
#include "t2icount/supervision.hpp"

namespace t2i {

struct TrainConfig {
  double base_lr = 5e-5;
  double unet_lr_scale = 0.1;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  int batch_size = 16;
  int epochs = 400;
  int max_steps = 0;  // 0: no cap
  int log_every = 10;
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;
};

struct DataConfig {
  std::string dataset = "synth";  // synth, fsc147, fsc147s, carpk
  std::string root;
  std::string minority_file;  // FSC-147-S records; defaults to <root>/minority.json
  double sigma_px = 4.0;
  AugmentConfig augment;
};

struct EvalConfig {
  int window = 384;
  std::string split = "test";
};

struct AppConfig {
  ModelConfig model;
  LossWeights loss;
  std::vector<Real> fusion_weights;
  std::string reg_kind = "sse_count";
  TrainConfig train;
  DataConfig data;
  SynthConfig synth;
  EvalConfig eval;
};

nlohmann::json default_config();

// Merges `overlay` into `base`; every key in overlay must already exist.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "");

// "a.b.c=value"; value parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

nlohmann::json load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

AppConfig parse_config(const nlohmann::json& config);

std::string config_hash(const nlohmann::json& config);

}  // namespace t2i
