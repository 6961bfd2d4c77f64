#include "t2icount/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "t2icount/evalrunner.hpp"
#include "t2icount/hash.hpp"
#include "t2icount/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t2i {

std::vector<ParamGroupLr> build_param_groups(const nn::ParameterStore<Real>& store, const TrainConfig& config) {
  ParamGroupLr denoiser{"denoiser", config.base_lr * config.unet_lr_scale, {}};
  ParamGroupLr head{"head", config.base_lr, {}};
  std::set<const void*> seen;
  const auto& params = store.all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen.insert(params[i].var.node()).second)
      throw ConfigError("parameter " + params[i].name + " is registered in two groups");
    switch (params[i].group) {
      case nn::ParamGroup::FrozenEncoder:
        break;
      case nn::ParamGroup::Denoiser:
        denoiser.members.push_back(i);
        break;
      case nn::ParamGroup::Head:
        head.members.push_back(i);
        break;
    }
  }
  std::vector<ParamGroupLr> groups;
  if (!denoiser.members.empty()) groups.push_back(std::move(denoiser));
  groups.push_back(std::move(head));
  return groups;
}

AdamW::AdamW(const TrainConfig& config, std::vector<ParamGroupLr> groups, const nn::ParameterStore<Real>& store)
    : config_(config), groups_(std::move(groups)) {
  for (const auto& p : store.all()) {
    m_.push_back(Mat<Real>::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Mat<Real>::Zero(p.var.rows(), p.var.cols()));
  }
}

void AdamW::step(nn::ParameterStore<Real>& store) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
  auto& params = store.all();
  for (const auto& g : groups_) {
    for (std::size_t i : g.members) {
      auto& p = params[i].var;
      if (!p.has_grad()) continue;
      const Mat<Real>& grad = p.grad();
      m_[i] = b1 * m_[i] + (1 - b1) * grad;
      v_[i] = b2 * v_[i] + (1 - b2) * grad.cwiseProduct(grad);
      Mat<Real>& w = p.mutable_value();
      w *= 1 - g.lr * config_.weight_decay;
      w.array() -= g.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.adam_eps);
    }
  }
}

void AdamW::save_state(Checkpoint& ckpt, const nn::ParameterStore<Real>& store) const {
  const auto& params = store.all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].group == nn::ParamGroup::FrozenEncoder) continue;
    ckpt.tensors.push_back({"adam_m/" + params[i].name, m_[i]});
    ckpt.tensors.push_back({"adam_v/" + params[i].name, v_[i]});
  }
  ckpt.state["adam_step"] = t_;
}

void AdamW::load_state(const Checkpoint& ckpt, const nn::ParameterStore<Real>& store) {
  const auto& params = store.all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].group == nn::ParamGroup::FrozenEncoder) continue;
    const auto* m = ckpt.find("adam_m/" + params[i].name);
    const auto* v = ckpt.find("adam_v/" + params[i].name);
    if (!m || !v) throw CheckpointError("checkpoint lacks optimizer state for " + params[i].name);
    if (m->value.rows() != m_[i].rows() || m->value.cols() != m_[i].cols())
      throw CheckpointError("optimizer state for " + params[i].name + " has a different shape");
    m_[i] = m->value;
    v_[i] = v->value;
  }
  t_ = ckpt.state.value("adam_step", 0L);
}

TrainExample prepare_example(const CountingSample& sample, const DataConfig& data, std::mt19937_64& rng) {
  const LoadedSample s = load(sample);
  AugmentedSample a = augment(s.image, s.points, data.augment, rng);
  const int f = kLatentScale;
  const int h = (a.image.height + f - 1) / f * f, w = (a.image.width + f - 1) / f * f;
  if (h != a.image.height || w != a.image.width) a.image = reflect_pad(a.image, h, w);
  return {std::move(a.image), pool_density(rasterize_density(a.points, h, w, data.sigma_px), f), s.class_name};
}

Trainer::Trainer(const json& config_json, T2ICountModel& model)
    : config_json_(config_json),
      config_(parse_config(config_json)),
      model_(model),
      regression_(make_regression_loss(config_.reg_kind)),
      optimizer_(config_.train, build_param_groups(model.parameters(), config_.train), model.parameters()) {}

StepDiagnostics Trainer::train_step(const std::vector<CountingSample>& batch, int epoch, long step) {
  StepDiagnostics d;
  d.step = step;
  d.epoch = epoch;
  auto& store = model_.parameters();
  store.zero_grad();
  const double weight = 1.0 / static_cast<double>(batch.size());
  double pixels = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::mt19937_64 rng(mix_seed({config_.train.seed, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(step), i}));
    const TrainExample ex = prepare_example(batch[i], config_.data, rng);
    const Prediction pred = model_.forward(ex.image, ex.prompt, rng);
    const TotalLoss loss = model_.loss(pred, ex.density, config_.loss, config_.fusion_weights, *regression_);
    if (!std::isfinite(loss.parts.total)) {
      d.aborted = true;
      d.message = batch[i].id + ": non-finite loss (regression " + std::to_string(loss.parts.regression) +
                  ", rrc " + std::to_string(loss.parts.rrc_sum()) + ")";
      store.zero_grad();
      return d;
    }
    ad::backward(loss.value, weight);
    d.loss += weight * loss.parts.total;
    d.regression += weight * loss.parts.regression;
    d.rrc += weight * loss.parts.rrc_sum();
    d.positives += static_cast<double>(loss.parts.positives);
    d.negatives += static_cast<double>(loss.parts.negatives);
    d.ambiguous += static_cast<double>(loss.parts.ambiguous);
    pixels += static_cast<double>(loss.pna.labels.size());
  }
  d.positives /= pixels;
  d.negatives /= pixels;
  d.ambiguous /= pixels;

  double total_sq = 0;
  for (const auto& g : optimizer_.groups()) {
    double sq = 0;
    for (std::size_t i : g.members)
      if (store.all()[i].var.has_grad()) sq += store.all()[i].var.grad().squaredNorm();
    d.group_grad_norm[g.name] = std::sqrt(sq);
    total_sq += sq;
  }
  d.grad_norm = std::sqrt(total_sq);
  if (!std::isfinite(d.grad_norm)) {
    d.aborted = true;
    d.message = "non-finite gradient norm";
    store.zero_grad();
    return d;
  }
  if (config_.train.grad_clip > 0 && d.grad_norm > config_.train.grad_clip) {
    const double s = config_.train.grad_clip / d.grad_norm;
    for (auto& p : store.all())
      if (p.var.has_grad()) p.var.node()->grad *= s;
  }
  optimizer_.step(store);
  return d;
}

double Trainer::validate(const std::vector<CountingSample>& val) const {
  if (val.empty()) return std::nan("");
  const auto r = run_benchmark(val, model_density(model_, config_.eval.window), config_.data.dataset, "class");
  if (r.failures) throw NumericError(std::to_string(r.failures) + " validation image(s) failed");
  return r.metrics.mae;
}

void Trainer::save(const fs::path& path, const json& state) const {
  Checkpoint ckpt;
  ckpt.config = config_json_;
  ckpt.state = state;
  add_parameters(ckpt, model_.parameters());
  optimizer_.save_state(ckpt, model_.parameters());
  save_checkpoint(path, ckpt);
}

FitResult Trainer::fit(const std::vector<CountingSample>& train, const std::vector<CountingSample>& val,
                       const fs::path& out_dir, bool resume,
                       const std::function<void(const StepDiagnostics&)>& on_step) {
  if (train.empty()) throw InputError("fit: empty training set");
  fs::create_directories(out_dir);
  FitResult result;
  int start_epoch = 0;
  std::size_t start_batch = 0;
  double best = std::numeric_limits<double>::infinity();

  if (resume) {
    const Checkpoint ckpt = load_checkpoint(out_dir / "last.ckpt");
    if (config_hash(ckpt.config) != config_hash(config_json_))
      warn("resuming with a configuration that differs from the checkpoint's");
    restore_parameters(ckpt, model_.parameters());
    optimizer_.load_state(ckpt, model_.parameters());
    start_epoch = ckpt.state.at("epoch").get<int>();
    start_batch = ckpt.state.at("batch_in_epoch").get<std::size_t>();
    result.steps = ckpt.state.at("step").get<long>();
    result.val_mae = ckpt.state.at("val_mae").get<std::vector<double>>();
    result.best_epoch = ckpt.state.at("best_epoch").get<int>();
    if (result.best_epoch >= 0) best = result.best_val_mae = ckpt.state.at("best_val_mae").get<double>();
  }

  std::ofstream log(out_dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  const std::size_t batch_size = static_cast<std::size_t>(config_.train.batch_size);
  const std::size_t batches = (train.size() + batch_size - 1) / batch_size;
  const long max_steps = config_.train.max_steps;
  int consecutive_aborts = 0;

  auto state = [&](int epoch, std::size_t batch_in_epoch) {
    return json{{"epoch", epoch},
                {"batch_in_epoch", batch_in_epoch},
                {"step", result.steps},
                {"val_mae", result.val_mae},
                {"best_epoch", result.best_epoch},
                {"best_val_mae", result.best_epoch >= 0 ? result.best_val_mae : 0.0}};
  };

  for (int epoch = start_epoch; epoch < config_.train.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(mix_seed({config_.train.seed, static_cast<std::uint64_t>(epoch), 0x5348554646ULL}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::size_t b = epoch == start_epoch ? start_batch : 0;
    for (; b < batches; ++b) {
      if (max_steps > 0 && result.steps >= max_steps) break;
      std::vector<CountingSample> batch;
      for (std::size_t k = b * batch_size; k < std::min(train.size(), (b + 1) * batch_size); ++k)
        batch.push_back(train[order[k]]);
      const auto d = train_step(batch, epoch, result.steps);
      ++result.steps;
      result.step_losses.push_back(d.loss);
      if (on_step) on_step(d);
      if (d.aborted) {
        warn("step " + std::to_string(d.step) + " aborted: " + d.message);
        if (++consecutive_aborts >= 10) throw NumericError("ten consecutive training steps had non-finite loss");
      } else {
        consecutive_aborts = 0;
      }
      if (config_.train.log_every > 0 && (d.step % config_.train.log_every == 0 || d.aborted)) {
        json j = {{"kind", "step"},         {"step", d.step},       {"epoch", d.epoch},
                  {"loss", d.loss},         {"reg", d.regression},  {"rrc", d.rrc},
                  {"grad_norm", d.grad_norm}, {"group_grad_norm", d.group_grad_norm},
                  {"pna_pos", d.positives}, {"pna_neg", d.negatives}, {"pna_amb", d.ambiguous}};
        if (d.aborted) j["aborted"] = d.message;
        log << j.dump() << "\n" << std::flush;
      }
    }
    const bool complete = b == batches;
    if (!complete && b == (epoch == start_epoch ? start_batch : 0)) break;  // cap hit before any work this epoch

    const double mae = validate(val);
    if (!val.empty()) result.val_mae.push_back(mae);
    log << json{{"kind", "epoch"}, {"epoch", epoch}, {"steps", result.steps}, {"val_mae", val.empty() ? json(nullptr) : json(mae)}, {"complete", complete}}.dump()
        << "\n"
        << std::flush;
    if (std::isfinite(mae) && mae < best) {
      best = mae;
      result.best_val_mae = mae;
      result.best_epoch = epoch;
      save(out_dir / "best.ckpt", state(complete ? epoch + 1 : epoch, complete ? 0 : b));
    }
    save(out_dir / "last.ckpt", state(complete ? epoch + 1 : epoch, complete ? 0 : b));
    if (!complete) break;
  }
  return result;
}

std::unique_ptr<T2ICountModel> model_from_checkpoint(const Checkpoint& ckpt) {
  const AppConfig cfg = parse_config(ckpt.config);
  auto model = std::make_unique<T2ICountModel>(cfg.model);
  restore_parameters(ckpt, model->parameters());
  return model;
}

std::uint64_t frozen_digest(const nn::ParameterStore<Real>& store) {
  std::uint64_t h = fnv1a("frozen");
  for (const auto& p : store.all())
    if (p.group == nn::ParamGroup::FrozenEncoder)
      h = fnv1a(p.var.value().data(), sizeof(Real) * static_cast<std::size_t>(p.var.value().size()), h);
  return h;
}

}  // namespace t2i
