#pragma once

// Synthetic driving world: lanes, scripted agents, the kinematic bicycle and
// the IDM + pure-pursuit expert that produces demonstration trajectories.

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "flowdrive/geometry.hpp"

namespace flowdrive::world {

enum class ScenarioKind : std::uint8_t {
  Stationary,
  LaneFollow,
  LeadFollow,
  LeftTurn,
  RightTurn,
  LaneChange,
  StopRedLight,
  HighSpeed,
  LowSpeedZone,
};
inline constexpr std::size_t kNumScenarioKinds = 9;

std::string_view kind_name(ScenarioKind kind);
/// Throws flowdrive::Error on an unknown name.
ScenarioKind parse_kind(std::string_view name);
const std::array<ScenarioKind, kNumScenarioKinds>& all_kinds();
/// Long-tailed default mix (stationary dominant).
std::array<double, kNumScenarioKinds> default_kind_weights();

enum class AgentType : std::uint8_t { Vehicle, Pedestrian, Cyclist };
inline constexpr std::size_t kNumAgentTypes = 3;

enum class StaticType : std::uint8_t { Cone, ParkedVehicle };
inline constexpr std::size_t kNumStaticTypes = 2;

enum class Light : std::uint8_t { None, Green, Red };
inline constexpr std::size_t kNumLightStates = 3;

struct LightSchedule {
  bool present = false;
  double stop_s = 0.0;  ///< stop line as arc length along the lane
  double red_start = 0.0;
  double red_end = 0.0;

  Light at(double t) const {
    if (!present) return Light::None;
    return (t >= red_start && t < red_end) ? Light::Red : Light::Green;
  }
};

struct Lane {
  Polyline center;
  double width = 3.5;
  double speed_limit = 13.0;
  LightSchedule light;
};

struct AgentState {
  Pose pose;
  double speed = 0.0;
  double length = 4.6;
  double width = 1.9;
  AgentType type = AgentType::Vehicle;
};

/// Agent moving along a path with a piecewise-constant-acceleration speed
/// profile: v0 until t_change, then ramps toward v1 at |accel|.
struct AgentScript {
  AgentType type = AgentType::Vehicle;
  double length = 4.6;
  double width = 1.9;
  int lane = -1;  ///< lane index the path belongs to, -1 for off-road paths
  Polyline path;
  double lateral = 0.0;
  double s0 = 0.0;
  double v0 = 0.0;
  double t_change = std::numeric_limits<double>::infinity();
  double accel = 1.0;
  double v1 = 0.0;

  double s_at(double t) const;
  double v_at(double t) const;
  AgentState state_at(double t) const;
  /// State of an agent at arc length s moving at speed v along the path.
  AgentState state_on_path(double s, double v) const;
};

struct StaticObstacle {
  Pose pose;
  double length = 0.5;
  double width = 0.5;
  StaticType type = StaticType::Cone;
};

struct VehicleParams {
  double wheelbase = 2.8;
  double length = 4.6;
  double width = 1.9;
  double max_steer = 0.6;
  double max_accel = 3.0;
  double max_decel = 8.0;
};

struct VehicleState {
  Vec2 pos;
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  double yaw_rate = 0.0;

  Pose pose() const { return {pos, heading}; }
};

/// Kinematic bicycle step with trapezoidal speed integration; speed never
/// goes negative (the reported accel is the realized one).
VehicleState bicycle_step(const VehicleState& s, double accel, double steer, double dt,
                          const VehicleParams& p);

struct IdmParams {
  double desired_speed = 13.0;
  double time_headway = 1.5;
  double min_gap = 2.0;
  double max_accel = 1.5;
  double comfort_decel = 2.0;
  double exponent = 4.0;
  double max_brake = 8.0;
};

/// IDM acceleration for speed v, bumper gap `gap` (infinity when free) and
/// approach rate dv = v - v_lead. Above the desired speed the free-road term
/// switches to the bounded improved-IDM form. Clamped to [-max_brake, max_accel].
double idm_acceleration(const IdmParams& p, double v, double gap, double dv);

/// Bumper gap at which IDM acceleration is zero for a lead at equal speed v.
double idm_equilibrium_gap(const IdmParams& p, double v);

struct ExpertParams {
  IdmParams idm;
  double speed_factor = 0.95;  ///< fraction of the speed limit the expert targets
  double lateral_bias = 0.0;   ///< preferred offset from the route centerline, left positive
  double lookahead_base = 3.0;   ///< pure-pursuit lookahead = base + gain*v + quad*v^2
  double lookahead_gain = 0.3;
  double lookahead_quad = 0.02;
  double lat_accel_max = 1.5;
  // Lane change: offset of the tracked path relative to the route, easing
  // from `change_offset` to 0 over [change_start, change_start + change_duration].
  double change_offset = 0.0;
  double change_start = 0.0;
  double change_duration = 4.0;
};

struct World {
  std::uint64_t seed = 0;
  ScenarioKind kind = ScenarioKind::LaneFollow;
  std::vector<Lane> lanes;
  int route_lane = 0;
  std::vector<AgentScript> agents;
  std::vector<StaticObstacle> statics;
  std::vector<OrientedBox> junctions;  ///< drivable intersection boxes
  VehicleState ego_start;
  ExpertParams expert;
  VehicleParams vehicle;

  const Lane& route() const { return lanes.at(static_cast<std::size_t>(route_lane)); }
  /// True if p lies inside some lane corridor or junction box widened by `margin`.
  bool on_road(Vec2 p, double margin = 0.0) const;
};

/// Deterministic world for (seed, kind).
World generate_world(std::uint64_t seed, ScenarioKind kind);

std::vector<AgentState> scripted_states(const World& w, double t);

struct ExpertAction {
  double accel = 0.0;
  double steer = 0.0;
};

/// Lateral offset of the expert's tracked path from the route at time t.
double expert_path_offset(const ExpertParams& e, double t);

/// IDM along the route (leads, red lights, curve speed) with pure-pursuit
/// steering. An ego outside every lane corridor brakes to a stop.
ExpertAction expert_controller(const World& w, const VehicleState& ego,
                               std::span<const AgentState> agents, double t);

/// Expert rollout against scripted agents; returns the ego state at
/// t0 + k*dt for k = 0..steps.
std::vector<VehicleState> rollout_expert(const World& w, const VehicleState& start, double t0,
                                         std::size_t steps, double dt = 0.1);

OrientedBox footprint(const AgentState& a);
OrientedBox footprint(const VehicleState& s, const VehicleParams& p);

}  // namespace flowdrive::world
