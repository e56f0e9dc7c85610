#pragma once

// Ego-centric scene features, expert episodes, normalization, ego
// augmentation and the dataset file format.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowdrive/autodiff.hpp"
#include "flowdrive/world.hpp"

namespace flowdrive::io {
class Writer;
class Reader;
}  // namespace flowdrive::io

namespace flowdrive::scene {

using ad::Tensor;
using world::ScenarioKind;

inline constexpr std::size_t kNeighborFeatures = 11;  // x y cos sin vx vy length width + type one-hot
inline constexpr std::size_t kStaticFeatures = 8;     // x y cos sin length width + type one-hot
inline constexpr std::size_t kLaneFeatures = 4;       // x y tangent cos/sin
inline constexpr std::size_t kEgoFeatures = 5;        // vx vy ax ay yaw_rate
inline constexpr std::size_t kActionDim = 4;          // x y cos sin

struct SceneDims {
  std::size_t neighbors = 8;
  std::size_t history = 10;
  std::size_t statics = 3;
  std::size_t lanes = 12;
  std::size_t lane_points = 10;
  std::size_t horizon = 16;
  double history_dt = 0.2;
  double future_dt = 0.5;
  double lane_segment = 30.0;
  double range = 80.0;

  bool operator==(const SceneDims&) const = default;
};

struct Waypoint {
  double x = 0.0;
  double y = 0.0;
  double cos = 1.0;
  double sin = 0.0;

  double heading() const;
  bool operator==(const Waypoint&) const = default;
};
using Trajectory = std::vector<Waypoint>;

/// [H, 4] tensor view of a trajectory and back.
Tensor to_tensor(const Trajectory& t);
Trajectory from_tensor(const Tensor& t);

/// Context in the ego frame: origin at the ego position, x along its heading.
/// Masked slots are all-zero.
struct SceneContext {
  Tensor neighbors;  ///< [P_n, T_p, F_n], history oldest to newest
  Tensor statics;    ///< [P_s, F_s]
  Tensor lanes;      ///< [P_l, V, F_l]
  Tensor ego;        ///< [E]
  std::vector<double> neighbor_mask;
  std::vector<double> static_mask;
  std::vector<double> lane_mask;
  std::vector<int> neighbor_type;
  std::vector<int> lane_light;     ///< world::Light as int
  std::vector<int> lane_on_route;  ///< 0/1
  std::vector<double> lane_speed_limit;
  ScenarioKind kind = ScenarioKind::LaneFollow;

  bool operator==(const SceneContext&) const = default;
};

/// Agent history oldest to newest, sampled every history_dt up to "now".
struct AgentTrack {
  std::vector<world::AgentState> history;
};

std::vector<AgentTrack> scripted_tracks(const world::World& w, double t, const SceneDims& dims);

SceneContext featurize(const world::World& w, const world::VehicleState& ego,
                       std::span<const AgentTrack> tracks, double t, const SceneDims& dims);

/// Future ego states expressed as waypoints in the frame of `ego`.
Trajectory local_trajectory(const world::VehicleState& ego,
                            std::span<const world::VehicleState> future);

struct ExpertEpisode {
  std::uint64_t seed = 0;
  ScenarioKind kind = ScenarioKind::LaneFollow;
  SceneContext context;  ///< raw (unnormalized) features
  Trajectory future;     ///< H waypoints, future[0] one step after now

  bool operator==(const ExpertEpisode&) const = default;
};

/// Deterministic expert episode for (seed, kind). The world itself is
/// regenerated from the same pair with world::generate_world.
ExpertEpisode generate_scenario(std::uint64_t seed, ScenarioKind kind, const SceneDims& dims = {});

/// Episodes with kinds drawn from `kind_weights`; fully determined by seed.
std::vector<ExpertEpisode> generate_dataset(std::size_t count, std::uint64_t seed,
                                            std::span<const double> kind_weights,
                                            const SceneDims& dims = {});

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool operator==(const ChannelStats&) const = default;
};

struct NormStats {
  ChannelStats neighbors;
  ChannelStats statics;
  ChannelStats lanes;
  ChannelStats ego;
  ChannelStats speed_limit;

  bool operator==(const NormStats&) const = default;
};

/// Per-channel mean/std over valid entries. Channels with std below 1e-8 get
/// std 1.
NormStats compute_stats(std::span<const ExpertEpisode> episodes);
NormStats compute_stats(std::span<const SceneContext> contexts);

SceneContext normalize(const NormStats& stats, const SceneContext& raw);
SceneContext denormalize(const NormStats& stats, const SceneContext& normalized);

struct AugmentConfig {
  double max_shift = 0.5;
  double max_rotation = 0.1;
  double max_speed = 0.5;

  bool operator==(const AugmentConfig&) const = default;
};

struct EgoPerturbation {
  double dx = 0.0;
  double dy = 0.0;
  double dtheta = 0.0;
  double dv = 0.0;
};

/// Re-expresses a raw episode in the frame of a perturbed ego pose.
ExpertEpisode apply_perturbation(const ExpertEpisode& ep, const EgoPerturbation& p);
ExpertEpisode augment_ego(const ExpertEpisode& ep, std::mt19937_64& rng,
                          const AugmentConfig& cfg = {});

struct Dataset {
  SceneDims dims;
  std::vector<ExpertEpisode> episodes;
  std::optional<NormStats> stats;
};

void save_dataset(const std::string& path, const Dataset& ds);
void write_stats(io::Writer& w, const NormStats& stats);
NormStats read_stats(io::Reader& r);
Dataset load_dataset(const std::string& path);

}  // namespace flowdrive::scene
