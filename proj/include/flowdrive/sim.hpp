#pragma once

// Closed-loop simulation: replanning loop, plan tracking on the kinematic
// bicycle, scripted or IDM-reactive agents, an event log and the desk-scale
// driving score.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowdrive/flow.hpp"
#include "flowdrive/guidance.hpp"
#include "flowdrive/model.hpp"
#include "flowdrive/refine.hpp"
#include "flowdrive/scene.hpp"
#include "flowdrive/world.hpp"

namespace flowdrive::sim {

enum class Mode { NonReactive, Reactive };
std::string mode_name(Mode m);
Mode parse_mode(const std::string& name);

enum class PlannerKind { FlowDriveMinus, FlowDrive, FlowDriveStar, ExpertReplay };
std::string planner_name(PlannerKind k);
PlannerKind parse_planner(const std::string& name);

struct SimConfig {
  double dt = 0.1;
  double replan = 1.0;
  double duration = 15.0;
  /// IDM used by reactive agents; desired speed comes from each script.
  world::IdmParams agent_idm;
  /// Footprint corners may leave the drivable area by this much.
  double drivable_margin = 0.3;
  double ttc_threshold = 0.95;
  double ttc_step = 0.1;
};

/// Checks dt > 0 and that replan and duration are whole multiples of dt.
void validate(const SimConfig& cfg);

enum class EventType { Collision, OffRoad, RedLight, PlannerFailure };
std::string event_name(EventType e);

struct Event {
  double time = 0.0;
  EventType type = EventType::Collision;
  int object = -1;  ///< agent index, or -2 - static index; -1 when not applicable
  bool at_fault = true;
  std::string detail;
};

/// Executed plan: ego-frame waypoints anchored at the pose and time of planning.
struct Plan {
  world::VehicleState origin;
  double time = 0.0;
  double dt = 0.5;
  scene::Trajectory trajectory;
  double odometer = 0.0;  ///< ego odometer when the plan was made
};

struct SimState {
  const world::World* world = nullptr;
  double dt = 0.1;
  double clock = 0.0;
  std::uint64_t step = 0;
  world::VehicleState ego;
  std::vector<world::AgentState> agents;
  /// Arc length and speed of every agent along its script path.
  std::vector<double> agent_s;
  std::vector<double> agent_v;
  /// Agent states at every simulated step, index = step.
  std::vector<std::vector<world::AgentState>> agent_log;
  double odometer = 0.0;
  std::vector<Event> events;

  bool operator==(const SimState& o) const;
};

SimState initial_state(const world::World& w, double dt = 0.1);

/// Speed limit of the lane whose centerline is nearest to p.
double speed_limit_at(const world::World& w, Vec2 p);

/// Agent histories ending at the current clock, for featurize. Samples before
/// t = 0 come from the scripts.
std::vector<scene::AgentTrack> agent_tracks(const SimState& s, const scene::SceneDims& dims);

/// Raw scene context for the ego at the current clock.
scene::SceneContext observe(const SimState& s, const scene::SceneDims& dims);

/// Tracker command for the plan at the current clock: pure pursuit on the
/// plan polyline plus a PD on arc length and speed.
world::ExpertAction track(const Plan& plan, const SimState& s, const world::VehicleParams& vp);

/// Advances one dt. The ego applies `control`; agents replay scripts or run
/// IDM against the current traffic including the ego. Collisions, off-road
/// and red-light crossings are appended to the event log.
void step_world(SimState& s, const world::ExpertAction& control, Mode mode, const SimConfig& cfg);
/// Same with the tracker computing the control from `plan`.
void step_world(SimState& s, const Plan& plan, Mode mode, const SimConfig& cfg);

class Planner {
 public:
  virtual ~Planner() = default;
  virtual std::string name() const = 0;
  /// Called once before each scenario.
  virtual void reset(const world::World& w, std::uint64_t seed) = 0;
  /// Ego-frame trajectory from the current state.
  virtual scene::Trajectory plan(const SimState& s) = 0;
  /// Privileged planners may command the ego directly every step.
  virtual std::optional<world::ExpertAction> control(const SimState&) { return std::nullopt; }
  /// Seconds between the plan's waypoints.
  virtual double plan_dt() const = 0;
};

/// Expert policy replay: commands the ego with the expert controller against
/// the observed agents every step.
class ExpertPlanner : public Planner {
 public:
  explicit ExpertPlanner(std::size_t horizon = 16, double dt = 0.5) : horizon_(horizon), dt_(dt) {}
  std::string name() const override { return planner_name(PlannerKind::ExpertReplay); }
  void reset(const world::World&, std::uint64_t) override {}
  scene::Trajectory plan(const SimState& s) override;
  std::optional<world::ExpertAction> control(const SimState& s) override;
  double plan_dt() const override { return dt_; }

 private:
  std::size_t horizon_;
  double dt_;
};

struct FlowPlannerOptions {
  /// Guidance, candidate scoring and post-processing (the hybrid variant).
  bool hybrid = false;
  /// Lateral offsets in meters, one candidate each (times every lon offset).
  std::vector<double> lat = guidance::linspace(-1.0, 1.0, 30);
  std::vector<double> lon{0.0};
  std::vector<double> times{0.5};
  /// Reference heading from the route lane instead of the ego heading.
  bool lane_heading = false;
  std::size_t smooth_passes = 1;
  refine::ScoreConfig score;
  flow::FlowConfig flow;
};

/// Learned planner: one unguided sample, or guided candidates refined,
/// scored and selected.
class FlowPlanner : public Planner {
 public:
  FlowPlanner(std::string name, model::FlowModel model, scene::NormStats stats,
              FlowPlannerOptions opts);
  std::string name() const override { return name_; }
  void reset(const world::World& w, std::uint64_t seed) override;
  scene::Trajectory plan(const SimState& s) override;
  double plan_dt() const override { return model_.dims().future_dt; }

  /// Candidates of the last hybrid plan, in grid order.
  const std::vector<refine::Candidate>& last_candidates() const { return last_; }
  const FlowPlannerOptions& options() const { return opts_; }

 private:
  std::string name_;
  model::FlowModel model_;
  scene::NormStats stats_;
  FlowPlannerOptions opts_;
  std::mt19937_64 rng_;
  std::vector<refine::Candidate> last_;
};

struct ScoreWeights {
  double progress = 5.0;
  double ttc = 5.0;
  double speed = 4.0;
  double comfort = 2.0;
};

struct DrivingScore {
  double no_collision = 1.0;
  double drivable_area = 1.0;
  double progress = 1.0;
  double ttc = 1.0;
  double speed_limit = 1.0;
  double comfort = 1.0;
  double total = 100.0;  ///< in [0, 100]
  bool failed = false;
};

/// Per-step record of the executed ego motion.
struct TraceRow {
  double time = 0.0;
  world::VehicleState ego;
  double speed_limit = 0.0;
  double min_ttc = 0.0;  ///< infinity when nothing ahead closes in
};

struct EpisodeResult {
  world::ScenarioKind kind = world::ScenarioKind::LaneFollow;
  std::uint64_t seed = 0;
  std::string planner;
  Mode mode = Mode::NonReactive;
  DrivingScore score;
  std::vector<Event> events;
  std::vector<TraceRow> trace;
  std::vector<std::vector<world::AgentState>> agents;  ///< per step
  std::vector<Plan> plans;
  double expert_progress = 0.0;
  double ego_progress = 0.0;
};

/// Scores an executed run. Multipliers zero the total on any at-fault
/// collision or off-road event; the soft terms are weighted into [0, 100].
DrivingScore driving_score(std::span<const Event> events, std::span<const TraceRow> trace,
                           double ego_progress, double expert_progress, const SimConfig& cfg,
                           const ScoreWeights& w = {});

/// Replans every cfg.replan seconds and steps the world until cfg.duration.
/// A planner exception ends the run with a PlannerFailure event and score 0.
EpisodeResult run_closed_loop(Planner& planner, const world::World& w, Mode mode,
                              const SimConfig& cfg = {}, std::uint64_t planner_seed = 0);

/// Scenario suite: every (kind, seed) pair through a planner built by
/// `factory`; results in input order. Workers > 1 run scenarios on threads,
/// each with its own planner.
using PlannerFactory = std::function<std::unique_ptr<Planner>()>;
std::vector<EpisodeResult> run_suite(const PlannerFactory& factory,
                                     std::span<const world::ScenarioKind> kinds,
                                     std::span<const std::uint64_t> seeds, Mode mode,
                                     const SimConfig& cfg = {}, std::size_t workers = 1);

/// Arithmetic mean of the totals.
double aggregate(std::span<const EpisodeResult> results);

std::string report_csv_header();
std::string report_csv_row(const EpisodeResult& r);
/// Per-step dump: time,object,x,y,heading,speed with object "ego" or "agent<i>".
std::string trace_csv(const EpisodeResult& r);

}  // namespace flowdrive::sim
