#include "flowdrive/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "flowdrive/error.hpp"

namespace flowdrive::guidance {

TangentNormal tangent_normal(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {{c, s}, {-s, c}};
}

double alpha(double t, std::span<const double> times) {
  for (double g : times) {
    if (std::abs(t - g) <= 1e-9) return 1.0;
  }
  return 0.0;
}

double beta(std::size_t h, std::size_t horizon) {
  return static_cast<double>(h) / static_cast<double>(horizon);
}

Tensor moderated_update(const Tensor& x, double t, const GuidanceSpec& spec, double pos_scale,
                        bool delta_actions) {
  FD_CHECK(x.rank() >= 2 && x.dim(-1) >= 2, "moderated_update: bad state shape {}",
           ad::shape_str(x.shape));
  FD_CHECK(pos_scale > 0.0, "moderated_update: pos_scale must be positive");
  if (alpha(t, spec.times) == 0.0 || (spec.lat == 0.0 && spec.lon == 0.0)) return x;
  const TangentNormal f = tangent_normal(spec.theta);
  const Vec2 d = (f.normal * spec.lat + f.tangent * spec.lon) * (1.0 / pos_scale);
  const std::size_t A = x.dim(-1), H = x.dim(-2), rows = x.numel() / (A * H);
  Tensor out = x;
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t h = 1; h <= H; ++h) {
      const double w = delta_actions ? beta(h, H) - beta(h - 1, H) : beta(h, H);
      double* p = &out.data[(b * H + h - 1) * A];
      p[0] += w * d.x;
      p[1] += w * d.y;
    }
  }
  return out;
}

std::vector<GuidanceSpec> candidate_grid(std::span<const double> lat, std::span<const double> lon,
                                         std::span<const double> times, double theta) {
  FD_CHECK(!lat.empty(), "candidate_grid: empty lateral offsets");
  FD_CHECK(!lon.empty(), "candidate_grid: empty longitudinal offsets");
  std::vector<GuidanceSpec> specs;
  specs.reserve(lat.size() * lon.size());
  for (double a : lat) {
    for (double b : lon) {
      specs.push_back({std::vector<double>(times.begin(), times.end()), a, b, theta});
    }
  }
  return specs;
}

std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return v;
}

double lane_heading(const scene::SceneContext& raw) {
  const std::size_t P = raw.lane_mask.size();
  if (P == 0) return 0.0;
  const std::size_t V = raw.lanes.shape[1], F = raw.lanes.shape[2];
  for (std::size_t i = 0; i < P; ++i) {
    if (raw.lane_mask[i] == 0.0 || raw.lane_on_route[i] == 0) continue;
    double c = 0.0, s = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      c += raw.lanes.data[(i * V + v) * F + 2];
      s += raw.lanes.data[(i * V + v) * F + 3];
    }
    return std::atan2(s, c);
  }
  return 0.0;
}

Tensor guided_sample(model::FlowModel& m, const scene::SceneContext& normalized,
                     std::span<const GuidanceSpec> specs, const flow::FlowConfig& cfg,
                     const Tensor& z) {
  FD_CHECK(!specs.empty(), "guided_sample: no guidance specs");
  const std::size_t H = m.dims().horizon, A = scene::kActionDim, B = specs.size();
  FD_CHECK(z.shape == ad::Shape({H, A}), "guided_sample: noise must be [{}, {}], got {}", H, A,
           ad::shape_str(z.shape));
  ad::Tape tape(false);
  const model::ContextBatch one = model::make_batch(std::span<const scene::SceneContext>(&normalized, 1));
  const model::TokenSet context = model::repeat(m.encode(tape, one), B);
  const std::size_t E = one.ego.numel();
  Tensor ego({B, E});
  Tensor x0({B, H, A});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(one.ego.data.begin(), one.ego.data.end(), ego.data.begin() + b * E);
    std::copy(z.data.begin(), z.data.end(), x0.data.begin() + b * H * A);
  }
  const double pos_scale = m.config().pos_scale;
  const bool delta = m.config().action == model::ActionSpace::Velocity;
  auto hook = [&](Tensor& x, double t) {
    for (std::size_t b = 0; b < B; ++b) {
      if (alpha(t, specs[b].times) == 0.0) continue;
      Tensor row({H, A});
      std::copy_n(x.data.begin() + b * H * A, H * A, row.data.begin());
      row = moderated_update(row, t, specs[b], pos_scale, delta);
      std::copy(row.data.begin(), row.data.end(), x.data.begin() + b * H * A);
    }
  };
  auto field = [&](const Tensor& x, double t) { return m.velocity_value(tape, context, x, t, ego); };
  return flow::integrate(field, std::move(x0), cfg, hook);
}

std::vector<scene::Trajectory> sample_trajectories(model::FlowModel& m,
                                                   const scene::SceneContext& normalized,
                                                   std::span<const GuidanceSpec> specs,
                                                   const flow::FlowConfig& cfg, const Tensor& z) {
  const Tensor x = guided_sample(m, normalized, specs, cfg, z);
  const std::size_t H = x.shape[1], A = x.shape[2];
  std::vector<scene::Trajectory> out;
  out.reserve(specs.size());
  for (std::size_t b = 0; b < specs.size(); ++b) {
    Tensor row({H, A});
    std::copy_n(x.data.begin() + b * H * A, H * A, row.data.begin());
    out.push_back(model::decode_trajectory(row, m.config()));
  }
  return out;
}

}  // namespace flowdrive::guidance
