#include "flowdrive/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "flowdrive/error.hpp"
#include "flowdrive/random.hpp"

namespace flowdrive::sim {

using scene::Trajectory;
using world::AgentState;
using world::VehicleState;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kStopped = 0.05;

bool same(const VehicleState& a, const VehicleState& b) {
  return a.pos == b.pos && a.heading == b.heading && a.speed == b.speed && a.accel == b.accel &&
         a.yaw_rate == b.yaw_rate;
}

bool same(const AgentState& a, const AgentState& b) {
  return a.pose.pos == b.pose.pos && a.pose.heading == b.pose.heading && a.speed == b.speed &&
         a.length == b.length && a.width == b.width && a.type == b.type;
}

bool same(std::span<const AgentState> a, std::span<const AgentState> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same(a[i], b[i])) return false;
  }
  return true;
}

bool is_multiple(double value, double dt) {
  const double k = value / dt;
  return k >= 1.0 - 1e-9 && std::abs(k - std::round(k)) < 1e-6;
}

std::size_t count_steps(double value, double dt) {
  return static_cast<std::size_t>(std::llround(value / dt));
}

Vec2 velocity(const AgentState& a) { return unit(a.pose.heading) * a.speed; }

// Nearest object ahead along an agent's path: bumper gap and its speed along
// the path. Mirrors the expert's lead search.
struct Lead {
  double gap = kInf;
  double speed = 0.0;
};

void consider(Lead& lead, const world::AgentScript& me, double my_s, Vec2 pos, double heading,
              double length, double width, double speed) {
  const Projection p = me.path.project(pos);
  const double ds = p.s - my_s;
  if (ds <= 0.0 || ds > 80.0) return;
  const double rel = wrap_angle(heading - me.path.heading_at(p.s));
  const double half_along = 0.5 * (length * std::abs(std::cos(rel)) + width * std::abs(std::sin(rel)));
  const double half_across = 0.5 * (length * std::abs(std::sin(rel)) + width * std::abs(std::cos(rel)));
  if (std::abs(p.lateral - me.lateral) > half_across + me.width / 2.0 + 0.3) return;
  const double g = ds - half_along - me.length / 2.0;
  if (g < lead.gap) {
    lead.gap = g;
    lead.speed = speed * std::cos(rel);
  }
}

// Plan polyline in world coordinates with cumulative arc length.
struct PlanPath {
  std::vector<Vec2> pts;
  std::vector<double> arc;
  double end_heading = 0.0;

  double length() const { return arc.back(); }

  Vec2 point_at(double s) const {
    if (s >= length()) return pts.back() + unit(end_heading) * (s - length());
    std::size_t i = 1;
    while (i + 1 < pts.size() && arc[i] < s) ++i;
    const double len = arc[i] - arc[i - 1];
    const double f = len > 0.0 ? std::clamp((s - arc[i - 1]) / len, 0.0, 1.0) : 0.0;
    return pts[i - 1] + (pts[i] - pts[i - 1]) * f;
  }

  double project(Vec2 p) const {
    double best = kInf, best_s = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const Vec2 ab = pts[i] - pts[i - 1];
      const double len2 = ab.dot(ab);
      const double f = len2 > 0.0 ? std::clamp((p - pts[i - 1]).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const double d = (p - (pts[i - 1] + ab * f)).norm();
      if (d < best) {
        best = d;
        best_s = arc[i - 1] + f * (arc[i] - arc[i - 1]);
      }
    }
    return best_s;
  }
};

PlanPath plan_path(const Plan& plan) {
  PlanPath p;
  p.pts.push_back(plan.origin.pos);
  p.arc.push_back(0.0);
  p.end_heading = plan.origin.heading;
  for (const scene::Waypoint& w : plan.trajectory) {
    const Vec2 q = to_world(plan.origin.pose(), Vec2{w.x, w.y});
    p.arc.push_back(p.arc.back() + (q - p.pts.back()).norm());
    p.pts.push_back(q);
    p.end_heading = plan.origin.heading + w.heading();
  }
  return p;
}

// Reference arc length at plan-relative time tau.
double reference_s(const PlanPath& p, double tau, double dt) {
  if (tau <= 0.0) return 0.0;
  const double k = tau / dt;
  const auto i = static_cast<std::size_t>(k);
  if (i + 1 >= p.arc.size()) return p.arc.back();
  return p.arc[i] + (k - static_cast<double>(i)) * (p.arc[i + 1] - p.arc[i]);
}

double min_ttc(const SimState& s, const SimConfig& cfg) {
  const world::World& w = *s.world;
  if (s.ego.speed < kStopped) return kInf;
  const OrientedBox ego = world::footprint(s.ego, w.vehicle);
  // Ego projected at constant speed and yaw rate; others at constant velocity.
  std::vector<OrientedBox> ahead;
  OrientedBox e = ego;
  for (double d = cfg.ttc_step; d <= cfg.ttc_threshold + 1e-9; d += cfg.ttc_step) {
    e.center += unit(e.heading + 0.5 * s.ego.yaw_rate * cfg.ttc_step) * (s.ego.speed * cfg.ttc_step);
    e.heading += s.ego.yaw_rate * cfg.ttc_step;
    ahead.push_back(e);
  }
  double best = kInf;
  auto check = [&](const OrientedBox& box, Vec2 v) {
    if (overlaps(ego, box) || to_local(s.ego.pose(), box.center).x <= 0.0) return;
    for (std::size_t k = 0; k < ahead.size(); ++k) {
      const double d = static_cast<double>(k + 1) * cfg.ttc_step;
      OrientedBox b = box;
      b.center += v * d;
      if (overlaps(ahead[k], b)) {
        best = std::min(best, d);
        return;
      }
    }
  };
  for (const AgentState& a : s.agents) check(world::footprint(a), velocity(a));
  for (const world::StaticObstacle& o : w.statics) check({o.pose.pos, o.pose.heading, o.length, o.width}, {});
  return best;
}

bool has_event(const SimState& s, EventType type, int object) {
  return std::any_of(s.events.begin(), s.events.end(),
                     [&](const Event& e) { return e.type == type && e.object == object; });
}

void record_events(SimState& s, const VehicleState& prev, const SimConfig& cfg) {
  const world::World& w = *s.world;
  const world::VehicleParams& vp = w.vehicle;
  const OrientedBox ego = world::footprint(s.ego, vp);
  // At fault unless the ego is stopped or the contact is at its rear.
  auto collide = [&](int object, Vec2 center, const std::string& what) {
    if (has_event(s, EventType::Collision, object)) return;
    const bool rear = to_local(s.ego.pose(), center).x < -vp.length / 4.0;
    const bool fault = s.ego.speed >= kStopped && !rear;
    s.events.push_back({s.clock, EventType::Collision, object, fault, what});
  };
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    if (overlaps(ego, world::footprint(s.agents[i]))) {
      collide(static_cast<int>(i), s.agents[i].pose.pos, fmt::format("agent {}", i));
    }
  }
  for (std::size_t i = 0; i < w.statics.size(); ++i) {
    const world::StaticObstacle& o = w.statics[i];
    if (overlaps(ego, {o.pose.pos, o.pose.heading, o.length, o.width})) {
      collide(-2 - static_cast<int>(i), o.pose.pos, fmt::format("static {}", i));
    }
  }
  if (!has_event(s, EventType::OffRoad, -1)) {
    for (const Vec2& c : ego.corners()) {
      if (!w.on_road(c, cfg.drivable_margin)) {
        s.events.push_back({s.clock, EventType::OffRoad, -1, true,
                            fmt::format("corner ({:.2f}, {:.2f})", c.x, c.y)});
        break;
      }
    }
  }
  const world::Lane& route = w.route();
  if (route.light.present && route.light.at(s.clock) == world::Light::Red) {
    const Projection a = route.center.project(prev.pos), b = route.center.project(s.ego.pos);
    const double stop = route.light.stop_s - vp.length / 2.0;
    if (a.s < stop && b.s >= stop && std::abs(b.lateral) < route.width) {
      s.events.push_back({s.clock, EventType::RedLight, -1, true, "crossed stop line on red"});
    }
  }
}

void step_agents(SimState& s, Mode mode, const SimConfig& cfg) {
  const world::World& w = *s.world;
  const double t1 = s.clock + s.dt;
  std::vector<double> ns(s.agents.size()), nv(s.agents.size());
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    const world::AgentScript& sc = w.agents[i];
    if (mode == Mode::NonReactive || sc.type == world::AgentType::Pedestrian || sc.lane < 0) {
      ns[i] = sc.s_at(t1);
      nv[i] = sc.v_at(t1);
      continue;
    }
    const double v = s.agent_v[i];
    const double v_script = sc.v_at(t1);
    const double up = std::max(cfg.agent_idm.max_accel, sc.accel);
    double a = std::clamp((v_script - v) / s.dt, -cfg.agent_idm.max_brake, up);
    Lead lead;
    for (std::size_t j = 0; j < s.agents.size(); ++j) {
      if (j == i) continue;
      const AgentState& o = s.agents[j];
      consider(lead, sc, s.agent_s[i], o.pose.pos, o.pose.heading, o.length, o.width, o.speed);
    }
    consider(lead, sc, s.agent_s[i], s.ego.pos, s.ego.heading, w.vehicle.length, w.vehicle.width,
             s.ego.speed);
    if (std::isfinite(lead.gap)) {
      world::IdmParams idm = cfg.agent_idm;
      idm.desired_speed = std::max(v_script, 0.1);
      a = std::min(a, world::idm_acceleration(idm, v, lead.gap, v - lead.speed));
    }
    const double v1 = v + a * s.dt;
    if (v1 < 0.0) {
      ns[i] = s.agent_s[i] + (a < 0.0 ? v * v / (-2.0 * a) : 0.0);
      nv[i] = 0.0;
    } else {
      ns[i] = s.agent_s[i] + 0.5 * (v + v1) * s.dt;
      nv[i] = v1;
    }
  }
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    s.agent_s[i] = ns[i];
    s.agent_v[i] = nv[i];
    s.agents[i] = w.agents[i].state_on_path(ns[i], nv[i]);
  }
}

TraceRow trace_row(const SimState& s, const SimConfig& cfg) {
  return {s.clock, s.ego, speed_limit_at(*s.world, s.ego.pos), min_ttc(s, cfg)};
}

double decay(double x, double bound) {
  return x <= bound ? 1.0 : std::max(0.0, 1.0 - (x - bound) / bound);
}

double route_s(const world::World& w, Vec2 p) { return w.route().center.project(p).s; }

bool finite(const Trajectory& t) {
  return std::all_of(t.begin(), t.end(), [](const scene::Waypoint& w) {
    return std::isfinite(w.x) && std::isfinite(w.y) && std::isfinite(w.cos) && std::isfinite(w.sin);
  });
}

}  // namespace

std::string mode_name(Mode m) { return m == Mode::Reactive ? "reactive" : "non_reactive"; }

Mode parse_mode(const std::string& name) {
  if (name == "reactive") return Mode::Reactive;
  if (name == "non_reactive") return Mode::NonReactive;
  throw Error(fmt::format("unknown simulation mode '{}' (reactive, non_reactive)", name));
}

std::string planner_name(PlannerKind k) {
  switch (k) {
    case PlannerKind::FlowDriveMinus: return "flowdrive_minus";
    case PlannerKind::FlowDrive: return "flowdrive";
    case PlannerKind::FlowDriveStar: return "flowdrive_star";
    case PlannerKind::ExpertReplay: return "expert_replay";
  }
  return "unknown";
}

PlannerKind parse_planner(const std::string& name) {
  for (PlannerKind k : {PlannerKind::FlowDriveMinus, PlannerKind::FlowDrive,
                        PlannerKind::FlowDriveStar, PlannerKind::ExpertReplay}) {
    if (planner_name(k) == name) return k;
  }
  throw Error(fmt::format(
      "unknown planner '{}' (flowdrive_minus, flowdrive, flowdrive_star, expert_replay)", name));
}

std::string event_name(EventType e) {
  switch (e) {
    case EventType::Collision: return "collision";
    case EventType::OffRoad: return "off_road";
    case EventType::RedLight: return "red_light";
    case EventType::PlannerFailure: return "planner_failure";
  }
  return "unknown";
}

void validate(const SimConfig& cfg) {
  FD_CHECK(cfg.dt > 0.0, "sim: dt must be positive, got {}", cfg.dt);
  FD_CHECK(is_multiple(cfg.replan, cfg.dt), "sim: replan {} is not a multiple of dt {}", cfg.replan,
           cfg.dt);
  FD_CHECK(is_multiple(cfg.duration, cfg.dt), "sim: duration {} is not a multiple of dt {}",
           cfg.duration, cfg.dt);
}

bool SimState::operator==(const SimState& o) const {
  if (world != o.world || dt != o.dt || clock != o.clock || step != o.step || !same(ego, o.ego) ||
      !same(agents, o.agents) || agent_s != o.agent_s || agent_v != o.agent_v ||
      odometer != o.odometer || agent_log.size() != o.agent_log.size() ||
      events.size() != o.events.size()) {
    return false;
  }
  for (std::size_t i = 0; i < agent_log.size(); ++i) {
    if (!same(agent_log[i], o.agent_log[i])) return false;
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event &a = events[i], &b = o.events[i];
    if (a.time != b.time || a.type != b.type || a.object != b.object || a.at_fault != b.at_fault) {
      return false;
    }
  }
  return true;
}

SimState initial_state(const world::World& w, double dt) {
  FD_CHECK(dt > 0.0, "sim: dt must be positive");
  SimState s;
  s.world = &w;
  s.dt = dt;
  s.ego = w.ego_start;
  s.agents = world::scripted_states(w, 0.0);
  for (const world::AgentScript& a : w.agents) {
    s.agent_s.push_back(a.s_at(0.0));
    s.agent_v.push_back(a.v_at(0.0));
  }
  s.agent_log.push_back(s.agents);
  return s;
}

double speed_limit_at(const world::World& w, Vec2 p) {
  FD_CHECK(!w.lanes.empty(), "sim: world has no lanes");
  double best = kInf, limit = w.lanes.front().speed_limit;
  for (const world::Lane& l : w.lanes) {
    const double d = l.center.project(p).distance;
    if (d < best) {
      best = d;
      limit = l.speed_limit;
    }
  }
  return limit;
}

std::vector<scene::AgentTrack> agent_tracks(const SimState& s, const scene::SceneDims& dims) {
  const world::World& w = *s.world;
  std::vector<scene::AgentTrack> tracks(w.agents.size());
  for (std::size_t k = 0; k < dims.history; ++k) {
    const double tk = s.clock - static_cast<double>(dims.history - 1 - k) * dims.history_dt;
    const long idx = std::lround(tk / s.dt);
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
      if (tk < -1e-9) {
        tracks[i].history.push_back(w.agents[i].state_at(tk));
      } else {
        const auto j = std::min<std::size_t>(static_cast<std::size_t>(std::max(idx, 0L)),
                                             s.agent_log.size() - 1);
        tracks[i].history.push_back(s.agent_log[j][i]);
      }
    }
  }
  return tracks;
}

scene::SceneContext observe(const SimState& s, const scene::SceneDims& dims) {
  const auto tracks = agent_tracks(s, dims);
  return scene::featurize(*s.world, s.ego, tracks, s.clock, dims);
}

world::ExpertAction track(const Plan& plan, const SimState& s, const world::VehicleParams& vp) {
  if (plan.trajectory.empty()) return {s.ego.speed > 0.0 ? -vp.max_decel : 0.0, 0.0};
  const PlanPath path = plan_path(plan);
  const double tau = s.clock - plan.time;
  const double v = s.ego.speed;

  // Longitudinal: PD on odometer arc length and the look-ahead mean speed.
  const double s_ref = reference_s(path, tau, plan.dt);
  const double v_ref = (reference_s(path, tau + plan.dt, plan.dt) - s_ref) / plan.dt;
  const double s_ego = s.odometer - plan.odometer;
  const double accel = std::clamp(0.5 * (s_ref - s_ego) + 1.5 * (v_ref - v), -vp.max_decel, vp.max_accel);

  // Lateral: pure pursuit toward a speed-dependent look-ahead point.
  if (path.length() < 0.5) return {accel, 0.0};
  const double ld = std::clamp(3.0 + 0.3 * v + 0.02 * v * v, 4.0, 30.0);
  const Vec2 target = path.point_at(path.project(s.ego.pos) + ld);
  const Vec2 local = to_local(s.ego.pose(), target);
  const double dist = std::max(local.norm(), 1e-3);
  const double steer = std::atan2(2.0 * vp.wheelbase * std::sin(std::atan2(local.y, local.x)), dist);
  return {accel, std::clamp(steer, -vp.max_steer, vp.max_steer)};
}

void step_world(SimState& s, const world::ExpertAction& control, Mode mode, const SimConfig& cfg) {
  FD_CHECK(s.world != nullptr, "sim: state has no world");
  const VehicleState prev = s.ego;
  step_agents(s, mode, cfg);
  s.ego = world::bicycle_step(s.ego, control.accel, control.steer, s.dt, s.world->vehicle);
  FD_CHECK(std::isfinite(s.ego.pos.x) && std::isfinite(s.ego.pos.y) && std::isfinite(s.ego.speed),
           "sim: non-finite ego state at t={}", s.clock);
  s.odometer += (s.ego.pos - prev.pos).norm();
  ++s.step;
  s.clock = static_cast<double>(s.step) * s.dt;
  s.agent_log.push_back(s.agents);
  record_events(s, prev, cfg);
}

void step_world(SimState& s, const Plan& plan, Mode mode, const SimConfig& cfg) {
  step_world(s, track(plan, s, s.world->vehicle), mode, cfg);
}

// ---------------------------------------------------------------------------
// Planners

Trajectory ExpertPlanner::plan(const SimState& s) {
  const auto stride = static_cast<std::size_t>(std::llround(dt_ / 0.1));
  const auto roll = world::rollout_expert(*s.world, s.ego, s.clock, horizon_ * stride, 0.1);
  std::vector<VehicleState> fut;
  for (std::size_t h = 1; h <= horizon_; ++h) fut.push_back(roll[h * stride]);
  return scene::local_trajectory(s.ego, fut);
}

std::optional<world::ExpertAction> ExpertPlanner::control(const SimState& s) {
  return world::expert_controller(*s.world, s.ego, s.agents, s.clock);
}

FlowPlanner::FlowPlanner(std::string name, model::FlowModel model, scene::NormStats stats,
                         FlowPlannerOptions opts)
    : name_(std::move(name)), model_(std::move(model)), stats_(std::move(stats)), opts_(std::move(opts)) {
  FD_CHECK(!opts_.lat.empty() && !opts_.lon.empty(), "planner: empty guidance offsets");
  flow::validate(opts_.flow);
  opts_.score.dt = model_.dims().future_dt;
}

void FlowPlanner::reset(const world::World&, std::uint64_t seed) {
  rng_.seed(splitmix64(seed ^ 0x91a2));
  last_.clear();
}

Trajectory FlowPlanner::plan(const SimState& s) {
  const scene::SceneDims& dims = model_.dims();
  const scene::SceneContext raw = observe(s, dims);
  const scene::SceneContext norm = scene::normalize(stats_, raw);
  const ad::Tensor z = flow::standard_normal({dims.horizon, scene::kActionDim}, rng_);
  if (!opts_.hybrid) {
    const guidance::GuidanceSpec none{opts_.times, 0.0, 0.0, 0.0};
    return guidance::sample_trajectories(model_, norm, std::span(&none, 1), opts_.flow, z).front();
  }
  const double theta = opts_.lane_heading ? guidance::lane_heading(raw) : 0.0;
  const auto specs = guidance::candidate_grid(opts_.lat, opts_.lon, opts_.times, theta);
  const auto trajs = guidance::sample_trajectories(model_, norm, specs, opts_.flow, z);
  const double limit = speed_limit_at(*s.world, s.ego.pos);
  const refine::ScoreContext ctx =
      refine::make_context(*s.world, s.ego, s.clock, s.agents, dims.horizon, dims.future_dt);
  last_.clear();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    refine::Candidate c;
    c.trajectory = refine::enforce_speed_limit(refine::smooth(trajs[i], opts_.smooth_passes), limit,
                                               dims.future_dt);
    c.lat = specs[i].lat;
    c.lon = specs[i].lon;
    c.score = refine::score(c.trajectory, ctx, opts_.score);
    last_.push_back(std::move(c));
  }
  return last_[refine::select_best(last_)].trajectory;
}

// ---------------------------------------------------------------------------
// Scoring and the closed loop

DrivingScore driving_score(std::span<const Event> events, std::span<const TraceRow> trace,
                           double ego_progress, double expert_progress, const SimConfig& cfg,
                           const ScoreWeights& w) {
  DrivingScore d;
  for (const Event& e : events) {
    if (e.type == EventType::Collision && e.at_fault) d.no_collision = 0.0;
    if (e.type == EventType::OffRoad) d.drivable_area = 0.0;
    if (e.type == EventType::PlannerFailure) d.failed = true;
  }
  d.progress = expert_progress < 5.0 ? 1.0 : std::clamp(ego_progress / expert_progress, 0.0, 1.0);
  double overspeed = 0.0, comfort = 0.0;
  const refine::ComfortBounds bounds;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const TraceRow& r = trace[i];
    if (r.min_ttc < cfg.ttc_threshold) d.ttc = 0.0;
    overspeed += std::max(0.0, r.ego.speed - r.speed_limit);
    const double jerk = i == 0 ? 0.0 : std::abs(r.ego.accel - trace[i - 1].ego.accel) / cfg.dt;
    comfort += std::min({decay(std::abs(r.ego.accel), bounds.accel), decay(jerk, bounds.jerk),
                         decay(std::abs(r.ego.yaw_rate), bounds.yaw_rate)});
  }
  if (!trace.empty()) {
    const double n = static_cast<double>(trace.size());
    d.speed_limit = std::clamp(1.0 - overspeed / n / 2.23, 0.0, 1.0);
    d.comfort = comfort / n;
  }
  const double soft = (w.progress * d.progress + w.ttc * d.ttc + w.speed * d.speed_limit +
                       w.comfort * d.comfort) /
                      (w.progress + w.ttc + w.speed + w.comfort);
  d.total = d.failed ? 0.0 : 100.0 * d.no_collision * d.drivable_area * soft;
  return d;
}

EpisodeResult run_closed_loop(Planner& planner, const world::World& w, Mode mode,
                              const SimConfig& cfg, std::uint64_t planner_seed) {
  validate(cfg);
  FD_CHECK(!w.lanes.empty() && w.route_lane >= 0 &&
               static_cast<std::size_t>(w.route_lane) < w.lanes.size(),
           "sim: world has no route");
  EpisodeResult r;
  r.kind = w.kind;
  r.seed = w.seed;
  r.planner = planner.name();
  r.mode = mode;
  SimState s = initial_state(w, cfg.dt);
  planner.reset(w, planner_seed);
  const std::size_t steps = count_steps(cfg.duration, cfg.dt);
  const std::size_t every = count_steps(cfg.replan, cfg.dt);
  r.trace.push_back(trace_row(s, cfg));
  Plan plan;
  bool failed = false;
  for (std::size_t k = 0; k < steps && !failed; ++k) {
    std::optional<world::ExpertAction> direct;
    try {
      if (k % every == 0) {
        Trajectory traj = planner.plan(s);
        FD_CHECK(!traj.empty() && finite(traj), "planner returned an empty or non-finite trajectory");
        plan = {s.ego, s.clock, planner.plan_dt(), std::move(traj), s.odometer};
        r.plans.push_back(plan);
      }
      direct = planner.control(s);
    } catch (const std::exception& e) {
      s.events.push_back({s.clock, EventType::PlannerFailure, -1, true, e.what()});
      failed = true;
      break;
    }
    if (direct) {
      step_world(s, *direct, mode, cfg);
    } else {
      step_world(s, plan, mode, cfg);
    }
    r.trace.push_back(trace_row(s, cfg));
  }
  r.events = s.events;
  r.agents = std::move(s.agent_log);
  r.ego_progress = route_s(w, s.ego.pos) - route_s(w, w.ego_start.pos);
  const auto roll = world::rollout_expert(w, w.ego_start, 0.0, steps, cfg.dt);
  r.expert_progress = route_s(w, roll.back().pos) - route_s(w, w.ego_start.pos);
  r.score = driving_score(r.events, r.trace, r.ego_progress, r.expert_progress, cfg);
  return r;
}

std::vector<EpisodeResult> run_suite(const PlannerFactory& factory,
                                     std::span<const world::ScenarioKind> kinds,
                                     std::span<const std::uint64_t> seeds, Mode mode,
                                     const SimConfig& cfg, std::size_t workers) {
  validate(cfg);
  std::vector<std::pair<world::ScenarioKind, std::uint64_t>> jobs;
  for (world::ScenarioKind k : kinds) {
    for (std::uint64_t seed : seeds) jobs.emplace_back(k, seed);
  }
  std::vector<EpisodeResult> out(jobs.size());
  std::size_t next = 0;
  std::mutex mu;
  auto work = [&] {
    const std::unique_ptr<Planner> planner = factory();
    for (;;) {
      std::size_t j;
      {
        const std::lock_guard lock(mu);
        if (next >= jobs.size()) return;
        j = next++;
      }
      const world::World w = world::generate_world(jobs[j].second, jobs[j].first);
      out[j] = run_closed_loop(*planner, w, mode, cfg, jobs[j].second);
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(jobs.size(), 1));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
  }
  return out;
}

double aggregate(std::span<const EpisodeResult> results) {
  FD_CHECK(!results.empty(), "aggregate: no results");
  double sum = 0.0;
  for (const EpisodeResult& r : results) sum += r.score.total;
  return sum / static_cast<double>(results.size());
}

std::string report_csv_header() {
  return "scenario,seed,planner,mode,total,no_collision,drivable_area,progress,ttc,speed_limit,"
         "comfort,failed";
}

std::string report_csv_row(const EpisodeResult& r) {
  const DrivingScore& d = r.score;
  return fmt::format("{},{},{},{},{:.4f},{},{},{:.6f},{},{:.6f},{:.6f},{}", world::kind_name(r.kind),
                     r.seed, r.planner, mode_name(r.mode), d.total, d.no_collision, d.drivable_area,
                     d.progress, d.ttc, d.speed_limit, d.comfort, d.failed ? 1 : 0);
}

std::string trace_csv(const EpisodeResult& r) {
  std::string out = "time,object,x,y,heading,speed\n";
  for (std::size_t k = 0; k < r.trace.size(); ++k) {
    const TraceRow& t = r.trace[k];
    out += fmt::format("{:.2f},ego,{:.4f},{:.4f},{:.5f},{:.4f}\n", t.time, t.ego.pos.x, t.ego.pos.y,
                       t.ego.heading, t.ego.speed);
    if (k < r.agents.size()) {
      for (std::size_t i = 0; i < r.agents[k].size(); ++i) {
        const AgentState& a = r.agents[k][i];
        out += fmt::format("{:.2f},agent{},{:.4f},{:.4f},{:.5f},{:.4f}\n", t.time, i, a.pose.pos.x,
                           a.pose.pos.y, a.pose.heading, a.speed);
      }
    }
  }
  return out;
}

}  // namespace flowdrive::sim
