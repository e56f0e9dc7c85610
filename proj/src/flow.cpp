#include "flowdrive/flow.hpp"

#include <algorithm>
#include <cmath>

#include "flowdrive/error.hpp"

namespace flowdrive::flow {

std::string sampler_name(TimeSampler s) {
  return s == TimeSampler::Uniform ? "uniform" : "lognorm";
}

TimeSampler parse_sampler(const std::string& name) {
  if (name == "uniform") return TimeSampler::Uniform;
  if (name == "lognorm") return TimeSampler::LogNormal;
  throw Error(fmt::format("unknown time sampler '{}' (expected uniform or lognorm)", name));
}

void validate(const FlowConfig& cfg) {
  FD_CHECK(cfg.infer_steps >= 1, "flow: infer_steps must be >= 1");
  FD_CHECK(cfg.train_steps >= cfg.infer_steps, "flow: train_steps {} < infer_steps {}",
           cfg.train_steps, cfg.infer_steps);
}

Tensor rf_path(const Tensor& z, const Tensor& x, double t) {
  FD_CHECK(z.shape == x.shape, "rf_path: shapes differ {} vs {}", ad::shape_str(z.shape),
           ad::shape_str(x.shape));
  if (t == 0.0) return z;
  if (t == 1.0) return x;
  Tensor out(z.shape);
  for (std::size_t i = 0; i < z.numel(); ++i) out.data[i] = z.data[i] + t * (x.data[i] - z.data[i]);
  return out;
}

Tensor rf_path(const Tensor& z, const Tensor& x, std::span<const double> t) {
  FD_CHECK(z.shape == x.shape && z.rank() >= 1 && z.shape[0] == t.size(),
           "rf_path: shapes {} / {} with {} times", ad::shape_str(z.shape), ad::shape_str(x.shape),
           t.size());
  Tensor out(z.shape);
  const std::size_t row = t.empty() ? 0 : z.numel() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) {
      out.data[i] = t[b] == 1.0 ? x.data[i] : z.data[i] + t[b] * (x.data[i] - z.data[i]);
    }
  }
  return out;
}

Tensor target_velocity(const Tensor& z, const Tensor& x) {
  FD_CHECK(z.shape == x.shape, "target_velocity: shapes differ {} vs {}", ad::shape_str(z.shape),
           ad::shape_str(x.shape));
  Tensor out(z.shape);
  for (std::size_t i = 0; i < z.numel(); ++i) out.data[i] = x.data[i] - z.data[i];
  return out;
}

double snap_time(double t, std::size_t steps) {
  const double s = static_cast<double>(steps);
  return std::clamp(std::round(t * s), 0.0, s) / s;
}

double sample_time(TimeSampler mode, std::mt19937_64& rng, std::size_t train_steps) {
  FD_CHECK(train_steps >= 1, "sample_time: train_steps must be >= 1");
  const double s = static_cast<double>(train_steps);
  if (mode == TimeSampler::Uniform) {
    std::uniform_int_distribution<std::size_t> idx(0, train_steps - 1);
    return static_cast<double>(idx(rng)) / s;
  }
  std::normal_distribution<double> n(0.0, 1.0);
  const double t = 1.0 / (1.0 + std::exp(-n(rng)));
  return std::min(std::round(t * s), s - 1.0) / s;
}

std::vector<double> inference_times(const FlowConfig& cfg) {
  validate(cfg);
  std::vector<double> ts(cfg.infer_steps);
  for (std::size_t k = 0; k < cfg.infer_steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(cfg.infer_steps);
    ts[k] = cfg.snap_inference ? snap_time(t, cfg.train_steps) : t;
  }
  return ts;
}

Tensor standard_normal(const ad::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor out(shape);
  for (double& v : out.data) v = n(rng);
  return out;
}

Var rf_loss(Var predicted, const Tensor& target) {
  FD_CHECK(predicted.shape() == target.shape, "rf_loss: prediction {} vs target {}",
           ad::shape_str(predicted.shape()), ad::shape_str(target.shape));
  Var diff = ad::sub(predicted, predicted.tape()->constant(target));
  Var loss = ad::mean_all(ad::mul(diff, diff));
  if (!std::isfinite(loss.value()[0])) {
    throw NonFiniteError("rf_loss: non-finite loss");
  }
  return loss;
}

Tensor integrate(const VelocityFn& field, Tensor z, const FlowConfig& cfg,
                 const GuidanceHook& hook) {
  const std::vector<double> ts = inference_times(cfg);
  const double h = 1.0 / static_cast<double>(cfg.infer_steps);
  Tensor x = std::move(z);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (hook) hook(x, static_cast<double>(k) * h);
    const Tensor v = field(x, ts[k]);
    FD_CHECK(v.shape == x.shape, "integrate: field returned {} for state {}",
             ad::shape_str(v.shape), ad::shape_str(x.shape));
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += h * v.data[i];
    if (!x.all_finite()) {
      throw NonFiniteError(fmt::format("integrate: non-finite state after step {} of {}", k + 1,
                                       cfg.infer_steps));
    }
  }
  if (hook) hook(x, 1.0);
  return x;
}

}  // namespace flowdrive::flow
