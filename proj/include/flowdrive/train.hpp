#pragma once

// Training loop: weighted batch sampling, augmentation, rectified-flow loss,
// AdamW with cosine warmup, EMA weights, checkpoints and key=value configs.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowdrive/balancing.hpp"
#include "flowdrive/error.hpp"
#include "flowdrive/flow.hpp"
#include "flowdrive/model.hpp"
#include "flowdrive/scene.hpp"

namespace flowdrive::train {

/// Raised when the loss exceeds the divergence threshold.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  std::size_t batch = 64;
  double lr = 3e-4;
  double warmup_epochs = 3.0;
  std::size_t epochs = 50;
  /// Overrides epochs * steps_per_epoch when non-zero.
  std::size_t max_steps = 0;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_power = 0.99;
  double grad_clip = 1.0;  ///< global-norm clip; 0 disables
  std::size_t accumulate = 1;
  balancing::Strategy strategy = balancing::Strategy::Cluster;
  double balance_eps = balancing::kDefaultEpsilon;
  bool augment = true;
  double augment_prob = 0.5;
  scene::AugmentConfig augment_cfg;
  flow::FlowConfig flow;
  model::ModelConfig model;
  std::uint64_t seed = 0;
  double divergence_factor = 1e3;
  std::size_t log_every = 50;
  /// Run the validator every this many epochs (0 = never).
  std::size_t val_every = 0;

  bool operator==(const TrainConfig&) const = default;
};

/// Sets one documented key; throws on unknown keys or malformed values.
void set_option(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Parses `key = value` lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);
TrainConfig config_from_text(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});
/// Every key with its current value; round-trips through config_from_text.
std::string config_to_text(const TrainConfig& cfg);

std::string lane_aux_name(model::LaneAux v);
std::string cond_mode_name(model::CondMode v);
std::string action_space_name(model::ActionSpace v);

/// Linear warmup to `peak` over warmup_steps, then cosine decay to 0 at
/// total_steps.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

struct AdamState {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
  std::uint64_t t = 0;

  bool operator==(const AdamState&) const = default;
};

/// Decoupled weight decay Adam step using each parameter's grad.
void adamw_step(nn::ParamStore& params, AdamState& state, double lr, const TrainConfig& cfg);

/// ema <- p * ema + (1 - p) * raw, elementwise.
void ema_update(nn::ParamStore& ema, const nn::ParamStore& raw, double power);

/// Scales gradients to global norm <= max_norm; returns the norm before clipping.
double clip_grad_norm(nn::ParamStore& params, double max_norm);

struct Checkpoint {
  TrainConfig config;
  scene::SceneDims dims;
  nn::ParamStore params;  ///< raw weights at the end of training
  nn::ParamStore ema;     ///< EMA weights (validation-selected when a validator ran)
  AdamState adam;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t selected_step = 0;
  double selected_score = 0.0;
  scene::NormStats stats;
  std::string cluster_path;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  /// Model carrying the EMA weights, or the raw ones when use_ema is false.
  model::FlowModel model(bool use_ema = true) const;
};

struct LossRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// Higher is better; receives the current EMA model.
using Validator = std::function<double(const model::FlowModel&, const scene::NormStats&)>;
using ProgressFn = std::function<void(const LossRecord&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

TrainResult train(const TrainConfig& cfg, const scene::Dataset& data,
                  const balancing::ClusterModel* clusters = nullptr,
                  const Validator& validate = {}, const ProgressFn& progress = {});

/// Deterministic rf loss of `m` over the dataset with `draws` (z, t) samples
/// per episode.
double dataset_loss(model::FlowModel& m, const scene::Dataset& data, const scene::NormStats& stats,
                    const flow::FlowConfig& flow, std::uint64_t seed, std::size_t draws = 4);

/// Loss of the zero velocity field on the same draws: mean (x - z)^2.
double zero_field_loss(const scene::Dataset& data, const model::ModelConfig& mcfg,
                       const flow::FlowConfig& flow, std::uint64_t seed, std::size_t draws = 4);

std::string loss_log_csv(const std::vector<LossRecord>& log);

}  // namespace flowdrive::train
