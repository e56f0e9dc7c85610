#include "flowdrive/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowdrive/error.hpp"

namespace flowdrive::refine {

namespace {

using scene::Trajectory;
using scene::Waypoint;
using world::AgentState;

constexpr double kRedLightDecel = 4.5;  // same dilemma-zone rule as the expert

Waypoint normalized(double x, double y, double c, double s) {
  const double n = std::hypot(c, s);
  if (n < 1e-12) return {x, y, 1.0, 0.0};
  return {x, y, c / n, s / n};
}

double decay(double value, double bound) {
  if (value <= bound) return 1.0;
  return std::max(0.0, 1.0 - (value - bound) / bound);
}

struct TimedPose {
  Pose pose;
  Vec2 velocity;
};

// World-frame ego poses at every substep, including the current one.
std::vector<TimedPose> ego_timeline(const Trajectory& traj, const world::VehicleState& ego,
                                    const ScoreConfig& cfg) {
  std::vector<Pose> knots{ego.pose()};
  for (const Waypoint& w : traj) {
    knots.push_back({to_world(ego.pose(), Vec2{w.x, w.y}), ego.heading + std::atan2(w.sin, w.cos)});
  }
  std::vector<TimedPose> out;
  const std::size_t sub = std::max<std::size_t>(cfg.substeps, 1);
  for (std::size_t h = 0; h + 1 < knots.size(); ++h) {
    const Pose& a = knots[h];
    const Pose& b = knots[h + 1];
    const Vec2 vel = (b.pos - a.pos) * (1.0 / cfg.dt);
    const double dh = wrap_angle(b.heading - a.heading);
    for (std::size_t k = 0; k < sub; ++k) {
      const double f = static_cast<double>(k) / static_cast<double>(sub);
      out.push_back({{a.pos + (b.pos - a.pos) * f, a.heading + dh * f}, vel});
    }
  }
  out.push_back({knots.back(), out.empty() ? Vec2{} : out.back().velocity});
  return out;
}

struct Obstacle {
  OrientedBox box;
  Vec2 velocity;
};

std::vector<Obstacle> obstacles_at(const ScoreContext& ctx, double tau) {
  std::vector<Obstacle> out;
  for (const AgentState& a : ctx.agents) {
    const Vec2 v = unit(a.pose.heading) * a.speed;
    OrientedBox b = world::footprint(a);
    b.center += v * tau;
    out.push_back({b, v});
  }
  for (const world::StaticObstacle& s : ctx.world->statics) {
    out.push_back({{s.pose.pos, s.pose.heading, s.length, s.width}, {}});
  }
  return out;
}

// Stop line of a red route light as a thin virtual wall, when the ego can
// still stop before it.
bool red_wall(const ScoreContext& ctx, double tau, OrientedBox& wall) {
  const world::Lane& route = ctx.world->route();
  if (route.light.at(ctx.time + tau) != world::Light::Red) return false;
  const double me = route.center.project(ctx.ego.pos).s;
  const double g = route.light.stop_s - me - ctx.world->vehicle.length / 2.0;
  const double v = ctx.ego.speed;
  if (g <= -0.5 || v * v > 2.0 * kRedLightDecel * std::max(g, 0.1)) return false;
  const double s = route.light.stop_s + 1.0;
  wall = {route.center.point_at(s), route.center.heading_at(s), 2.0, route.width};
  return true;
}

}  // namespace

double jerk_metric(const Trajectory& traj) {
  if (traj.size() < 4) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 3; i < traj.size(); ++i) {
    const double jx = traj[i].x - 3 * traj[i - 1].x + 3 * traj[i - 2].x - traj[i - 3].x;
    const double jy = traj[i].y - 3 * traj[i - 1].y + 3 * traj[i - 2].y - traj[i - 3].y;
    sum += std::hypot(jx, jy);
  }
  return sum / static_cast<double>(traj.size() - 3);
}

Trajectory smooth(const Trajectory& traj, std::size_t passes) {
  Trajectory cur = traj;
  if (traj.size() < 3) return cur;
  for (std::size_t p = 0; p < passes; ++p) {
    Trajectory next = cur;
    for (std::size_t i = 1; i + 1 < cur.size(); ++i) {
      const Waypoint &a = cur[i - 1], &b = cur[i], &c = cur[i + 1];
      next[i] = normalized((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0, a.cos + b.cos + c.cos,
                           a.sin + b.sin + c.sin);
    }
    if (jerk_metric(next) > jerk_metric(cur)) break;
    cur = std::move(next);
  }
  return cur;
}

Trajectory enforce_speed_limit(const Trajectory& traj, double limit, double dt) {
  FD_CHECK(limit > 0.0 && dt > 0.0, "enforce_speed_limit: limit {} and dt {} must be positive",
           limit, dt);
  if (traj.empty()) return traj;
  // Original polyline from the origin through every waypoint.
  std::vector<Waypoint> pts{Waypoint{}};
  pts.insert(pts.end(), traj.begin(), traj.end());
  std::vector<double> arc(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    arc[i] = arc[i - 1] + std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
  }
  const double step = limit * dt;
  Trajectory out = traj;
  double prev = 0.0;
  std::size_t seg = 1;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (arc[i] - prev <= step) {
      prev = arc[i];
      out[i - 1] = pts[i];
      continue;
    }
    const double s = prev + step;
    seg = std::max<std::size_t>(seg, 1);
    while (seg + 1 < pts.size() && arc[seg] < s) ++seg;
    const double len = arc[seg] - arc[seg - 1];
    const double f = len > 0.0 ? std::clamp((s - arc[seg - 1]) / len, 0.0, 1.0) : 1.0;
    const Waypoint &a = pts[seg - 1], &b = pts[seg];
    out[i - 1] = normalized(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y),
                            a.cos + f * (b.cos - a.cos), a.sin + f * (b.sin - a.sin));
    prev = s;
  }
  return out;
}

double route_progress(const world::World& w, const world::VehicleState& ego, const Trajectory& traj) {
  if (traj.empty()) return 0.0;
  const Polyline& route = w.route().center;
  const Vec2 end = to_world(ego.pose(), Vec2{traj.back().x, traj.back().y});
  return route.project(end).s - route.project(ego.pos).s;
}

ScoreContext make_context(const world::World& w, const world::VehicleState& ego, double time,
                          std::vector<AgentState> agents, std::size_t horizon, double dt) {
  FD_CHECK(!w.lanes.empty() && w.route_lane >= 0 &&
               static_cast<std::size_t>(w.route_lane) < w.lanes.size() && !w.route().center.empty(),
           "scorer: world has no route");
  ScoreContext ctx;
  ctx.world = &w;
  ctx.ego = ego;
  ctx.time = time;
  ctx.agents = std::move(agents);
  const auto steps = static_cast<std::size_t>(std::lround(static_cast<double>(horizon) * dt / 0.1));
  const auto roll = world::rollout_expert(w, ego, time, steps, 0.1);
  const Polyline& route = w.route().center;
  ctx.expert_progress = route.project(roll.back().pos).s - route.project(ego.pos).s;
  return ctx;
}

ScoreBreakdown score(const Trajectory& traj, const ScoreContext& ctx, const ScoreConfig& cfg) {
  FD_CHECK(ctx.world != nullptr, "scorer: no world");
  const world::World& w = *ctx.world;
  FD_CHECK(!w.lanes.empty() && w.route_lane >= 0 &&
               static_cast<std::size_t>(w.route_lane) < w.lanes.size() && !w.route().center.empty(),
           "scorer: world has no route");
  FD_CHECK(!traj.empty(), "scorer: empty trajectory");
  ScoreBreakdown s;
  const auto timeline = ego_timeline(traj, ctx.ego, cfg);
  const double sub_dt = cfg.dt / static_cast<double>(std::max<std::size_t>(cfg.substeps, 1));
  const world::VehicleParams& vp = w.vehicle;

  double min_ttc = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < timeline.size(); ++k) {
    const double tau = static_cast<double>(k) * sub_dt;
    const TimedPose& tp = timeline[k];
    const OrientedBox ego_box{tp.pose.pos, tp.pose.heading, vp.length, vp.width};
    for (const Vec2& c : ego_box.corners()) {
      if (!w.on_road(c, cfg.drivable_margin)) s.drivable_area = 0.0;
    }
    const auto obs = obstacles_at(ctx, tau);
    for (const Obstacle& o : obs) {
      if (overlaps(ego_box, o.box)) {
        s.no_collision = 0.0;
        continue;
      }
      if (to_local(tp.pose, o.box.center).x <= 0.0) continue;
      for (double d = cfg.ttc_step; d <= cfg.ttc_horizon + 1e-9; d += cfg.ttc_step) {
        OrientedBox e = ego_box, a = o.box;
        e.center += tp.velocity * d;
        a.center += o.velocity * d;
        if (overlaps(e, a)) {
          min_ttc = std::min(min_ttc, d);
          break;
        }
      }
    }
    OrientedBox wall;
    if (red_wall(ctx, tau, wall) && overlaps(ego_box, wall)) s.no_collision = 0.0;
  }
  s.ttc = std::isfinite(min_ttc) ? std::min(1.0, min_ttc / cfg.ttc_horizon) : 1.0;

  const double progress = route_progress(w, ctx.ego, traj);
  s.progress = ctx.expert_progress < cfg.min_expert_progress
                   ? 1.0
                   : std::clamp(progress / ctx.expert_progress, 0.0, 1.0);

  // Finite-difference comfort metrics, starting from the current pose.
  std::vector<double> speed, heading{0.0};
  double px = 0.0, py = 0.0;
  for (const Waypoint& wp : traj) {
    speed.push_back(std::hypot(wp.x - px, wp.y - py) / cfg.dt);
    heading.push_back(std::atan2(wp.sin, wp.cos));
    px = wp.x;
    py = wp.y;
  }
  double max_a = 0.0, max_j = 0.0, max_yaw = 0.0;
  std::vector<double> acc;
  for (std::size_t i = 1; i < speed.size(); ++i) acc.push_back((speed[i] - speed[i - 1]) / cfg.dt);
  for (double a : acc) max_a = std::max(max_a, std::abs(a));
  for (std::size_t i = 1; i < acc.size(); ++i) max_j = std::max(max_j, std::abs(acc[i] - acc[i - 1]) / cfg.dt);
  for (std::size_t i = 1; i < heading.size(); ++i) {
    max_yaw = std::max(max_yaw, std::abs(wrap_angle(heading[i] - heading[i - 1])) / cfg.dt);
  }
  s.comfort = std::min({decay(max_a, cfg.comfort.accel), decay(max_j, cfg.comfort.jerk),
                        decay(max_yaw, cfg.comfort.yaw_rate)});

  const ScoreWeights& wt = cfg.weights;
  const double soft = (wt.progress * s.progress + wt.ttc * s.ttc + wt.comfort * s.comfort) /
                      (wt.progress + wt.ttc + wt.comfort);
  s.total = s.no_collision * s.drivable_area * soft;
  return s;
}

std::size_t select_best(std::span<const Candidate> candidates) {
  FD_CHECK(!candidates.empty(), "select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const Candidate &c = candidates[i], &b = candidates[best];
    if (c.score.total > b.score.total ||
        (c.score.total == b.score.total && std::abs(c.lat) < std::abs(b.lat))) {
      best = i;
    }
  }
  return best;
}

std::string score_csv_header() { return "no_collision,drivable_area,progress,ttc,comfort,total"; }

std::string score_csv_row(const ScoreBreakdown& s) {
  return fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f}", s.no_collision, s.drivable_area,
                     s.progress, s.ttc, s.comfort, s.total);
}

}  // namespace flowdrive::refine
