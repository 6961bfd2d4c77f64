#pragma once

// Parameter groups, AdamW, the training step and the epoch loop.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2icount/checkpoint.hpp"
#include "t2icount/config.hpp"
#include "t2icount/data.hpp"
#include "t2icount/model.hpp"

namespace t2i {

struct ParamGroupLr {
  std::string name;
  double lr = 0;
  std::vector<std::size_t> members;  // indices into ParameterStore::all()
};

// denoiser at base_lr * unet_lr_scale, head at base_lr, frozen encoders nowhere.
std::vector<ParamGroupLr> build_param_groups(const nn::ParameterStore<Real>& store, const TrainConfig& config);

class AdamW {
 public:
  AdamW(const TrainConfig& config, std::vector<ParamGroupLr> groups, const nn::ParameterStore<Real>& store);

  // Decoupled weight decay, bias-corrected moments. Parameters without a
  // gradient this step are left alone.
  void step(nn::ParameterStore<Real>& store);

  const std::vector<ParamGroupLr>& groups() const { return groups_; }
  long steps_taken() const { return t_; }

  void save_state(Checkpoint& ckpt, const nn::ParameterStore<Real>& store) const;
  void load_state(const Checkpoint& ckpt, const nn::ParameterStore<Real>& store);

 private:
  TrainConfig config_;
  std::vector<ParamGroupLr> groups_;
  std::vector<Mat<Real>> m_, v_;
  long t_ = 0;
};

struct StepDiagnostics {
  long step = 0;
  int epoch = 0;
  double loss = 0;
  double regression = 0;
  double rrc = 0;
  double grad_norm = 0;  // before clipping
  std::map<std::string, double> group_grad_norm;
  double positives = 0, negatives = 0, ambiguous = 0;  // PNA fractions over the batch
  bool aborted = false;
  std::string message;
};

// Training sample: augmented image and its sum-pooled ground truth.
struct TrainExample {
  Grid<Real> image;
  Grid<Real> density;  // latent resolution
  std::string prompt;
};

TrainExample prepare_example(const CountingSample& sample, const DataConfig& data, std::mt19937_64& rng);

struct FitResult {
  std::vector<double> val_mae;  // per epoch
  int best_epoch = -1;
  double best_val_mae = 0;
  long steps = 0;
  std::vector<double> step_losses;  // every step, in order
};

class Trainer {
 public:
  // `config_json` is the effective configuration echoed into checkpoints.
  Trainer(const nlohmann::json& config_json, T2ICountModel& model);

  StepDiagnostics train_step(const std::vector<CountingSample>& batch, int epoch, long step);

  // Epoch loop with validation, best/last checkpoints under out_dir and a
  // metrics.jsonl log. With resume set, continues from out_dir/last.ckpt.
  FitResult fit(const std::vector<CountingSample>& train, const std::vector<CountingSample>& val,
                const std::filesystem::path& out_dir, bool resume = false,
                const std::function<void(const StepDiagnostics&)>& on_step = {});

  double validate(const std::vector<CountingSample>& val) const;

  const AdamW& optimizer() const { return optimizer_; }
  const AppConfig& config() const { return config_; }

  void save(const std::filesystem::path& path, const nlohmann::json& state) const;

 private:
  nlohmann::json config_json_;
  AppConfig config_;
  T2ICountModel& model_;
  std::unique_ptr<RegressionLoss> regression_;
  AdamW optimizer_;
};

// Builds the model from a checkpoint's stored config and loads its parameters.
std::unique_ptr<T2ICountModel> model_from_checkpoint(const Checkpoint& ckpt);

// Digest of all frozen-encoder parameter values.
std::uint64_t frozen_digest(const nn::ParameterStore<Real>& store);

}  // namespace t2i
