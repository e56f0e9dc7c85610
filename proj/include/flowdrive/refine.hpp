#pragma once

// Candidate post-processing: smoothing, speed-limit projection, a rule-based
// scorer (hard multipliers times weighted soft terms) and best-candidate
// selection.

#include <span>
#include <string>
#include <vector>

#include "flowdrive/scene.hpp"
#include "flowdrive/world.hpp"

namespace flowdrive::refine {

/// Mean norm of the third difference of positions; 0 for fewer than 4 points.
double jerk_metric(const scene::Trajectory& traj);

/// Window-3 moving average of interior positions, `passes` times. The first
/// and last waypoints never move; a pass that would raise the jerk metric is
/// discarded.
scene::Trajectory smooth(const scene::Trajectory& traj, std::size_t passes = 1);

/// Re-times the path (starting at the local origin) so no segment exceeds
/// `limit` m/s at step `dt`, pulling points back along the original polyline.
scene::Trajectory enforce_speed_limit(const scene::Trajectory& traj, double limit, double dt);

struct ComfortBounds {
  double accel = 2.4;     ///< m/s^2
  double jerk = 4.13;     ///< m/s^3
  double yaw_rate = 0.95; ///< rad/s
};

struct ScoreWeights {
  double progress = 5.0;
  double ttc = 5.0;
  double comfort = 2.0;
};

struct ScoreConfig {
  ScoreWeights weights;
  ComfortBounds comfort;
  double dt = 0.5;             ///< seconds between waypoints
  std::size_t substeps = 5;    ///< collision checks per waypoint interval
  double ttc_horizon = 1.0;    ///< seconds of constant-velocity look-ahead
  double ttc_step = 0.25;
  double min_expert_progress = 1.0;  ///< below this the progress term is 1
  double drivable_margin = 0.3;
};

struct ScoreBreakdown {
  double no_collision = 1.0;
  double drivable_area = 1.0;
  double progress = 1.0;
  double ttc = 1.0;
  double comfort = 1.0;
  double total = 1.0;
};

/// Ground truth the scorer sees at planning time.
struct ScoreContext {
  const world::World* world = nullptr;
  world::VehicleState ego;
  double time = 0.0;
  std::vector<world::AgentState> agents;
  /// Route progress of the expert over the same horizon.
  double expert_progress = 0.0;
};

/// Context with agents taken from `agents` and the expert reference from a
/// scripted rollout of `horizon * dt` seconds.
ScoreContext make_context(const world::World& w, const world::VehicleState& ego, double time,
                          std::vector<world::AgentState> agents, std::size_t horizon, double dt);

/// Arc length gained along the route by a trajectory in the ego frame.
double route_progress(const world::World& w, const world::VehicleState& ego,
                      const scene::Trajectory& traj);

ScoreBreakdown score(const scene::Trajectory& traj, const ScoreContext& ctx,
                     const ScoreConfig& cfg = {});

struct Candidate {
  scene::Trajectory trajectory;
  double lat = 0.0;
  double lon = 0.0;
  ScoreBreakdown score;
};

/// Index of the highest total; ties go to smaller |lat|, then lower index.
std::size_t select_best(std::span<const Candidate> candidates);

std::string score_csv_header();
std::string score_csv_row(const ScoreBreakdown& s);

}  // namespace flowdrive::refine
