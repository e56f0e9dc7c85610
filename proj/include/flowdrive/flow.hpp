#pragma once

// Rectified-flow path, target velocity, time samplers, loss and the Euler
// probability-flow sampler.

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowdrive/autodiff.hpp"

namespace flowdrive::flow {

using ad::Tensor;
using ad::Var;

enum class TimeSampler { Uniform, LogNormal };

std::string sampler_name(TimeSampler s);
TimeSampler parse_sampler(const std::string& name);

struct FlowConfig {
  std::size_t train_steps = 2000;
  std::size_t infer_steps = 8;
  TimeSampler sampler = TimeSampler::Uniform;
  /// Snap inference times to the nearest training-grid time.
  bool snap_inference = true;

  bool operator==(const FlowConfig&) const = default;
};

void validate(const FlowConfig& cfg);

/// x_t = z + t (x - z); returns z at t = 0 and x at t = 1 exactly.
Tensor rf_path(const Tensor& z, const Tensor& x, double t);
/// Batched path with one time per leading-axis row.
Tensor rf_path(const Tensor& z, const Tensor& x, std::span<const double> t);
/// x - z.
Tensor target_velocity(const Tensor& z, const Tensor& x);

/// Nearest point of the grid {k / steps}.
double snap_time(double t, std::size_t steps);
/// Training time on the grid {0, 1/S, ..., (S-1)/S}. LogNormal draws
/// sigmoid(N(0,1)) before snapping.
double sample_time(TimeSampler mode, std::mt19937_64& rng, std::size_t train_steps);

/// Left endpoints of the Euler steps, t_k = k / S_infer for k < S_infer.
std::vector<double> inference_times(const FlowConfig& cfg);

Tensor standard_normal(const ad::Shape& shape, std::mt19937_64& rng);

/// Mean squared error between predicted and target velocity, averaged over
/// every element (batch, horizon, action). Throws NonFiniteError on NaN.
Var rf_loss(Var predicted, const Tensor& target);

/// Velocity field evaluated on a batch state at flow time t.
using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;
/// Called on the state at every grid time t_k (k = 0..S, so t = 1 is
/// included) before the next field evaluation.
using GuidanceHook = std::function<void(Tensor& x, double t)>;

/// Explicit Euler from t = 0 to 1 in S_infer steps.
Tensor integrate(const VelocityFn& field, Tensor z, const FlowConfig& cfg,
                 const GuidanceHook& hook = {});

}  // namespace flowdrive::flow
