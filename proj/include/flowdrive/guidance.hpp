#pragma once

// Moderated in-the-loop guidance: scheduled, horizon-weighted position
// offsets injected into the flow state between Euler steps.

#include <cstddef>
#include <span>
#include <vector>

#include "flowdrive/autodiff.hpp"
#include "flowdrive/flow.hpp"
#include "flowdrive/geometry.hpp"
#include "flowdrive/model.hpp"
#include "flowdrive/scene.hpp"

namespace flowdrive::guidance {

using ad::Tensor;

struct GuidanceSpec {
  std::vector<double> times{0.5};  ///< injection flow times
  double lat = 0.0;                ///< meters along the left normal
  double lon = 0.0;                ///< meters along the tangent
  double theta = 0.0;              ///< reference heading in the ego frame

  bool operator==(const GuidanceSpec&) const = default;
};

struct TangentNormal {
  Vec2 tangent;
  Vec2 normal;  ///< tangent rotated +90 degrees
};

TangentNormal tangent_normal(double theta);

/// 1 if t matches an injection time within 1e-9, else 0.
double alpha(double t, std::span<const double> times);
/// h / H for h = 1..H.
double beta(std::size_t h, std::size_t horizon);

/// Shifts the (x, y) channels of x[..., H, A] by
/// alpha(t) beta(h) (lat n + lon tau) / pos_scale. Orientation channels are
/// untouched. With `delta_actions` the state holds per-step displacements,
/// so each step receives the increment of the cumulative offset.
Tensor moderated_update(const Tensor& x, double t, const GuidanceSpec& spec,
                        double pos_scale = 1.0, bool delta_actions = false);

/// Cartesian product lat x lon, every spec sharing `times` and `theta`.
std::vector<GuidanceSpec> candidate_grid(std::span<const double> lat, std::span<const double> lon,
                                         std::span<const double> times, double theta = 0.0);

/// n evenly spaced values on [a, b] (n = 1 gives a).
std::vector<double> linspace(double a, double b, std::size_t n);

/// Average tangent heading of the nearest on-route lane segment of a raw
/// context, or 0 when none is visible.
double lane_heading(const scene::SceneContext& raw);

/// Integrates one scene from the shared noise z [H, A]; row b of the batch
/// follows specs[b]. `normalized` is the model-ready context. Returns the
/// final flow states [B, H, A].
Tensor guided_sample(model::FlowModel& m, const scene::SceneContext& normalized,
                     std::span<const GuidanceSpec> specs, const flow::FlowConfig& cfg,
                     const Tensor& z);

/// guided_sample decoded to ego-frame trajectories, one per spec.
std::vector<scene::Trajectory> sample_trajectories(model::FlowModel& m,
                                                   const scene::SceneContext& normalized,
                                                   std::span<const GuidanceSpec> specs,
                                                   const flow::FlowConfig& cfg, const Tensor& z);

}  // namespace flowdrive::guidance
