#include "flowdrive/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "flowdrive/error.hpp"
#include "flowdrive/random.hpp"

namespace flowdrive::world {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLaneWidth = 3.5;
constexpr double kRoadStart = -120.0;
constexpr double kRoadLength = 760.0;
constexpr double kForever = 1e6;

constexpr std::array<ScenarioKind, kNumScenarioKinds> kKinds{
    ScenarioKind::Stationary,   ScenarioKind::LaneFollow, ScenarioKind::LeadFollow,
    ScenarioKind::LeftTurn,     ScenarioKind::RightTurn,  ScenarioKind::LaneChange,
    ScenarioKind::StopRedLight, ScenarioKind::HighSpeed,  ScenarioKind::LowSpeedZone,
};

constexpr std::array<std::string_view, kNumScenarioKinds> kKindNames{
    "stationary", "lane_follow",    "lead_follow", "left_turn",      "right_turn",
    "lane_change", "stop_red_light", "high_speed", "low_speed_zone",
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(gen_); }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  double sign() { return chance(0.5) ? 1.0 : -1.0; }

 private:
  std::mt19937_64 gen_;
};

std::vector<Vec2> offset_points(const std::vector<Vec2>& pts, double offset) {
  std::vector<Vec2> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Vec2 a = pts[i == 0 ? 0 : i - 1];
    const Vec2 b = pts[i + 1 == pts.size() ? i : i + 1];
    const Vec2 d = b - a;
    const double n = d.norm();
    out[i] = pts[i] + Vec2{-d.y / n, d.x / n} * offset;
  }
  return out;
}

std::vector<Vec2> reversed(std::vector<Vec2> pts) {
  std::reverse(pts.begin(), pts.end());
  return pts;
}

Lane make_lane(std::vector<Vec2> pts, double limit) {
  Lane l;
  l.center = Polyline(std::move(pts));
  l.width = kLaneWidth;
  l.speed_limit = limit;
  return l;
}

/// Road reference line through the canonical origin heading +x, optionally
/// bending ahead of the ego.
std::vector<Vec2> road_reference(Rng& rng, double curve_prob, double r_min, double r_max) {
  if (!rng.chance(curve_prob)) return straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  const double start = rng.uniform(15.0, 70.0);
  const double radius = rng.uniform(r_min, r_max);
  const double sweep = rng.sign() * std::min(rng.uniform(0.3, 0.9), 150.0 / radius);
  auto a = straight_points({kRoadStart, 0.0}, 0.0, start - kRoadStart);
  auto b = arc_points(a.back(), 0.0, radius, sweep);
  auto c = straight_points(b.back(), sweep, 600.0);
  return join_points({a, b, c});
}

struct Builder {
  Rng rng;
  World w;

  explicit Builder(std::uint64_t seed, ScenarioKind kind)
      : rng(splitmix64(seed * kNumScenarioKinds + static_cast<std::uint64_t>(kind))) {
    w.seed = seed;
    w.kind = kind;
  }

  int add_lane(Lane l) {
    w.lanes.push_back(std::move(l));
    return static_cast<int>(w.lanes.size()) - 1;
  }

  double s_of(int lane, Vec2 p) const { return w.lanes[std::size_t(lane)].center.project(p).s; }

  AgentScript& add_agent(AgentType type, int lane, const Polyline& path, double s0, double v0) {
    AgentScript a;
    a.type = type;
    switch (type) {
      case AgentType::Vehicle:
        a.length = rng.uniform(4.2, 5.0);
        a.width = rng.uniform(1.75, 2.0);
        break;
      case AgentType::Pedestrian:
        a.length = 0.6;
        a.width = 0.6;
        break;
      case AgentType::Cyclist:
        a.length = 1.8;
        a.width = 0.6;
        break;
    }
    a.lane = lane;
    a.path = path;
    a.s0 = s0;
    a.v0 = v0;
    a.v1 = v0;
    w.agents.push_back(std::move(a));
    return w.agents.back();
  }

  AgentScript& add_vehicle(int lane, double s0, double v0) {
    return add_agent(AgentType::Vehicle, lane, w.lanes[std::size_t(lane)].center, s0, v0);
  }

  /// Vehicles spread along a lane with at least `spacing` between centers,
  /// avoiding the window [avoid_lo, avoid_hi] of arc length.
  void add_traffic(int lane, int count, double s_lo, double s_hi, double v_lo, double v_hi,
                   double spacing, double avoid_lo = 1.0, double avoid_hi = 0.0) {
    std::vector<double> placed;
    for (int i = 0; i < count; ++i) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        const double s = rng.uniform(s_lo, s_hi);
        if (s >= avoid_lo && s <= avoid_hi) continue;
        bool ok = true;
        for (double q : placed) ok = ok && std::abs(q - s) >= spacing;
        if (!ok) continue;
        placed.push_back(s);
        add_vehicle(lane, s, rng.uniform(v_lo, v_hi));
        break;
      }
    }
  }

  /// Pedestrians, cyclists and roadside objects beyond the right edge of the
  /// reference line (offset `edge` is the right road boundary, negative).
  void add_roadside(const std::vector<Vec2>& ref, double edge, double left_edge, int peds,
                    int objects, bool cyclist) {
    const Polyline right_walk(offset_points(ref, edge - 2.5));
    const Polyline left_walk(offset_points(ref, left_edge + 2.5));
    for (int i = 0; i < peds; ++i) {
      const bool right = rng.chance(0.6);
      const Polyline& base = right ? right_walk : left_walk;
      Polyline path = rng.chance(0.5) ? base : Polyline(reversed(base.points()));
      const double s = rng.uniform(80.0, 220.0);
      add_agent(AgentType::Pedestrian, -1, path, s, rng.uniform(0.8, 1.5));
    }
    if (cyclist) {
      const Polyline path(offset_points(ref, edge - 1.0));
      add_agent(AgentType::Cyclist, -1, path, rng.uniform(110.0, 170.0), rng.uniform(3.0, 5.5));
    }
    const Polyline shoulder(offset_points(ref, edge - 1.4));
    for (int i = 0; i < objects; ++i) {
      StaticObstacle o;
      const double s = rng.uniform(100.0, 220.0);
      o.pose = {shoulder.point_at(s), shoulder.heading_at(s)};
      if (rng.chance(0.5)) {
        o.type = StaticType::ParkedVehicle;
        o.length = rng.uniform(4.2, 5.0);
        o.width = 1.8;
        o.pose.pos = o.pose.pos + rotate({0.0, -0.6}, o.pose.heading);
      } else {
        o.type = StaticType::Cone;
        o.length = 0.4;
        o.width = 0.4;
      }
      w.statics.push_back(o);
    }
  }

  void place_ego(double speed) {
    const Lane& start = w.lanes[0];
    const double s = start.center.project({0.0, 0.0}).s;
    const double offset = rng.uniform(-0.3, 0.3);
    const double heading = start.center.heading_at(s);
    w.ego_start.pos = start.center.point_at(s) + unit(heading + kPi / 2.0) * offset;
    w.ego_start.heading = wrap_angle(heading + rng.uniform(-0.02, 0.02));
    w.ego_start.speed = speed;
  }

  void init_expert() {
    w.expert.speed_factor = rng.uniform(0.8, 1.0);
    w.expert.lateral_bias = rng.uniform(-0.4, 0.4);
  }
};

void transform_world(World& w, const Pose& frame) {
  auto move_line = [&](const Polyline& p) {
    std::vector<Vec2> pts;
    pts.reserve(p.points().size());
    for (const Vec2& q : p.points()) pts.push_back(to_world(frame, q));
    return Polyline(std::move(pts));
  };
  for (Lane& l : w.lanes) l.center = move_line(l.center);
  for (AgentScript& a : w.agents) a.path = move_line(a.path);
  for (StaticObstacle& o : w.statics) o.pose = to_world(frame, o.pose);
  for (OrientedBox& j : w.junctions) {
    const Pose p = to_world(frame, Pose{j.center, j.heading});
    j.center = p.pos;
    j.heading = p.heading;
  }
  const Pose ego = to_world(frame, w.ego_start.pose());
  w.ego_start.pos = ego.pos;
  w.ego_start.heading = ego.heading;
}

/// Bumper gap to a slower lead that the expert closes with moderate braking.
double comfortable_gap(Builder& b, const IdmParams& p, double v, double lead_v) {
  const double s_star =
      p.min_gap + v * p.time_headway + v * (v - lead_v) / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
  return std::max(10.0, s_star * b.rng.uniform(0.8, 1.3));
}

void build_stationary(Builder& b) {
  const double limit = b.rng.uniform(8.0, 14.0);
  const auto ref = straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  const int east = b.add_lane(make_lane(ref, limit));
  const int west = b.add_lane(make_lane(reversed(offset_points(ref, kLaneWidth)), limit));
  b.place_ego(0.0);
  const double gap = b.rng.uniform(0.8, 1.6);
  const double ego_front = b.w.vehicle.length / 2.0;
  AgentScript& lead = b.add_vehicle(east, 0.0, 0.0);
  lead.s0 = b.s_of(east, {ego_front + gap + lead.length / 2.0, 0.0});
  Lane& lane = b.w.lanes[std::size_t(east)];
  lane.light.present = true;
  lane.light.stop_s = lead.s0 + lead.length / 2.0 + b.rng.uniform(0.5, 2.0);
  lane.light.red_start = -kForever;
  lane.light.red_end = kForever;
  if (b.rng.chance(0.5)) {
    AgentScript& behind = b.add_vehicle(east, 0.0, 0.0);
    behind.s0 = b.s_of(east, {-ego_front - b.rng.uniform(1.5, 5.0) - behind.length / 2.0, 0.0});
  }
  b.add_traffic(west, b.rng.integer(0, 2), 60.0, 400.0, 6.0, 12.0, 25.0);
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(0, 3), b.rng.integer(0, 2),
                 false);
}

void build_lane_follow(Builder& b) {
  const double limit = b.rng.uniform(9.0, 15.0);
  const auto ref = road_reference(b.rng, 0.6, 120.0, 400.0);
  const int east = b.add_lane(make_lane(ref, limit));
  const int west = b.add_lane(make_lane(reversed(offset_points(ref, kLaneWidth)), limit));
  const double v = limit * b.rng.uniform(0.75, 1.0);
  b.place_ego(v);
  if (b.rng.chance(0.4)) b.add_vehicle(east, b.s_of(east, {0, 0}) + b.rng.uniform(80.0, 140.0), v * 1.1);
  b.add_traffic(west, b.rng.integer(0, 3), 40.0, 420.0, 0.7 * limit, limit, 30.0);
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(0, 2), b.rng.integer(0, 2),
                 b.rng.chance(0.3));
}

void build_lead_follow(Builder& b) {
  const double limit = b.rng.uniform(10.0, 15.0);
  const auto ref = road_reference(b.rng, 0.4, 150.0, 400.0);
  const int east = b.add_lane(make_lane(ref, limit));
  const int west = b.add_lane(make_lane(reversed(offset_points(ref, kLaneWidth)), limit));
  const double v = limit * b.rng.uniform(0.6, 0.95);
  b.place_ego(v);
  const double ego_s = b.s_of(east, {0, 0});
  AgentScript& lead = b.add_vehicle(east, 0.0, v * b.rng.uniform(0.3, 0.8));
  lead.s0 = ego_s + b.w.vehicle.length / 2.0 + lead.length / 2.0 +
            comfortable_gap(b, b.w.expert.idm, v, lead.v0);
  if (b.rng.chance(0.5)) {
    lead.t_change = b.rng.uniform(0.5, 3.0);
    lead.accel = b.rng.uniform(0.5, 1.5);
    lead.v1 = b.rng.chance(0.3) ? 0.0 : lead.v0 * b.rng.uniform(0.2, 0.7);
  }
  b.add_traffic(west, b.rng.integer(0, 3), 40.0, 420.0, 0.7 * limit, limit, 30.0);
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(0, 2), b.rng.integer(0, 2),
                 false);
}

/// Four-way intersection centered at (xc, lane_width/2). Lane order: route,
/// eastbound through, westbound, northbound, southbound.
struct Intersection {
  double xc = 40.0;
  int route = 0, east = 1, west = 2, north = 3, south = 4;
};

Intersection build_intersection(Builder& b, double xc, double limit, std::vector<Vec2> route) {
  Intersection x;
  x.xc = xc;
  const auto ref = straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  const double cross_limit = b.rng.uniform(8.0, 12.0);
  x.route = b.add_lane(make_lane(std::move(route), limit));
  x.east = b.add_lane(make_lane(ref, limit));
  x.west = b.add_lane(make_lane(reversed(offset_points(ref, kLaneWidth)), limit));
  const double cy = kLaneWidth / 2.0;
  x.north = b.add_lane(
      make_lane(straight_points({xc + cy, -150.0}, kPi / 2.0, 300.0), cross_limit));
  x.south = b.add_lane(
      make_lane(straight_points({xc - cy, 150.0}, -kPi / 2.0, 300.0), cross_limit));
  b.w.junctions.push_back({{xc, cy}, 0.0, 2.0 * kLaneWidth, 2.0 * kLaneWidth});
  // Stop lines one meter before the crossing road's edge.
  const double east_stop = xc - kLaneWidth - 1.0 - kRoadStart;
  for (int id : {x.route, x.east}) {
    LightSchedule& l = b.w.lanes[std::size_t(id)].light;
    l.present = true;
    l.stop_s = east_stop;
  }
  {
    LightSchedule& l = b.w.lanes[std::size_t(x.west)].light;
    l.present = true;
    l.stop_s = kRoadStart + kRoadLength - (xc + kLaneWidth + 1.0);
  }
  for (int id : {x.north, x.south}) {
    LightSchedule& l = b.w.lanes[std::size_t(id)].light;
    l.present = true;
    l.stop_s = 150.0 - cy - kLaneWidth - 1.0;
  }
  return x;
}

void set_red(World& w, int lane, double start, double end) {
  LightSchedule& l = w.lanes[std::size_t(lane)].light;
  l.red_start = start;
  l.red_end = end;
}

/// Queue of stopped vehicles behind a lane's stop line.
void add_queue(Builder& b, int lane, int count) {
  const double stop = b.w.lanes[std::size_t(lane)].light.stop_s;
  double front = stop - b.rng.uniform(0.5, 2.0);
  for (int i = 0; i < count; ++i) {
    AgentScript& a = b.add_vehicle(lane, 0.0, 0.0);
    a.s0 = front - a.length / 2.0;
    front = a.s0 - a.length / 2.0 - b.rng.uniform(1.5, 3.0);
  }
}

void build_turn(Builder& b, bool left) {
  const double limit = b.rng.uniform(8.0, 12.0);
  const double xc = b.rng.uniform(30.0, 50.0);
  const double cy = kLaneWidth / 2.0;
  std::vector<Vec2> route;
  if (left) {
    const double r = b.rng.uniform(8.0, 11.0);
    const double xa = xc + cy - r;
    auto a = straight_points({kRoadStart, 0.0}, 0.0, xa - kRoadStart);
    auto arc = arc_points(a.back(), 0.0, r, kPi / 2.0);
    auto c = straight_points(arc.back(), kPi / 2.0, 200.0);
    route = join_points({a, arc, c});
  } else {
    const double r = b.rng.uniform(6.0, 9.0);
    const double xa = xc - cy - r;
    auto a = straight_points({kRoadStart, 0.0}, 0.0, xa - kRoadStart);
    auto arc = arc_points(a.back(), 0.0, r, -kPi / 2.0);
    auto c = straight_points(arc.back(), -kPi / 2.0, 200.0);
    route = join_points({a, arc, c});
  }
  const Intersection x = build_intersection(b, xc, limit, std::move(route));
  set_red(b.w, x.north, -kForever, kForever);
  set_red(b.w, x.south, -kForever, kForever);
  b.place_ego(b.rng.uniform(4.0, 8.0));
  add_queue(b, x.north, b.rng.integer(0, 2));
  add_queue(b, x.south, b.rng.integer(0, 2));
  // Oncoming traffic that has already cleared the intersection.
  const double west_len = b.w.lanes[std::size_t(x.west)].center.length();
  b.add_traffic(x.west, b.rng.integer(0, 2), west_len - (xc - 20.0 - kRoadStart),
                west_len - (xc - 20.0 - kRoadStart) + 80.0, 6.0, 10.0, 20.0);
  const auto ref = straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(0, 2), 0, false);
}

void build_lane_change(Builder& b) {
  const double limit = b.rng.uniform(10.0, 15.0);
  const double side = b.rng.sign();
  const auto ref = straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  const int ego_lane = b.add_lane(make_lane(ref, limit));
  const int target = b.add_lane(make_lane(offset_points(ref, side * kLaneWidth), limit));
  const double opp = side > 0 ? 2.0 * kLaneWidth : kLaneWidth;
  const int west = b.add_lane(make_lane(reversed(offset_points(ref, opp)), limit));
  b.w.route_lane = target;
  const double v = limit * b.rng.uniform(0.7, 0.95);
  b.place_ego(v);
  b.w.expert.change_offset = -side * kLaneWidth;
  b.w.expert.change_start = b.rng.uniform(0.0, 1.5);
  b.w.expert.change_duration = b.rng.uniform(3.0, 5.0);
  const double ego_s = -kRoadStart;
  if (b.rng.chance(0.5)) {
    const double lead_v = v * b.rng.uniform(0.3, 0.6);
    b.add_vehicle(ego_lane, ego_s + 5.0 + comfortable_gap(b, b.w.expert.idm, v, lead_v), lead_v);
  }
  // Target-lane traffic well ahead and faster, or behind and slower.
  if (b.rng.chance(0.5)) b.add_vehicle(target, ego_s + b.rng.uniform(45.0, 90.0), v * 1.15);
  if (b.rng.chance(0.5)) b.add_vehicle(target, ego_s - b.rng.uniform(30.0, 50.0), v * 0.8);
  b.add_traffic(west, b.rng.integer(0, 3), 40.0, 420.0, 0.7 * limit, limit, 30.0);
  const double right_edge = std::min(0.0, side * kLaneWidth) - kLaneWidth / 2.0;
  b.add_roadside(ref, right_edge, opp + kLaneWidth / 2.0, b.rng.integer(0, 2), b.rng.integer(0, 2),
                 false);
}

void build_stop_red_light(Builder& b) {
  const double limit = b.rng.uniform(10.0, 14.0);
  const double v = b.rng.uniform(6.0, 11.0);
  const double stop_dist = b.rng.uniform(std::max(25.0, v * v / 4.0), 50.0);
  const double xc = stop_dist + b.w.vehicle.length / 2.0 + kLaneWidth + 1.0;
  const auto ref = straight_points({kRoadStart, 0.0}, 0.0, kRoadLength);
  const Intersection x = build_intersection(b, xc, limit, ref);
  set_red(b.w, x.route, -kForever, kForever);
  set_red(b.w, x.east, -kForever, kForever);
  set_red(b.w, x.west, -kForever, kForever);
  b.place_ego(v);
  b.add_traffic(x.north, b.rng.integer(0, 2), 40.0, 260.0, 6.0, 10.0, 25.0);
  b.add_traffic(x.south, b.rng.integer(0, 2), 40.0, 260.0, 6.0, 10.0, 25.0);
  add_queue(b, x.west, b.rng.integer(0, 2));
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(0, 3), 0, false);
}

void build_high_speed(Builder& b) {
  const double limit = b.rng.uniform(22.0, 30.0);
  const auto ref = road_reference(b.rng, 0.4, 600.0, 1500.0);
  const int ego_lane = b.add_lane(make_lane(ref, limit));
  const int left = b.add_lane(make_lane(offset_points(ref, kLaneWidth), limit));
  const int right = b.add_lane(make_lane(offset_points(ref, -kLaneWidth), limit));
  b.w.expert.speed_factor = b.rng.uniform(0.85, 1.0);
  const double v = limit * b.rng.uniform(0.85, 1.0);
  b.place_ego(v);
  const double ego_s = -kRoadStart;
  if (b.rng.chance(0.6)) b.add_vehicle(ego_lane, ego_s + b.rng.uniform(70.0, 130.0), v * b.rng.uniform(0.95, 1.1));
  b.add_traffic(left, b.rng.integer(0, 3), ego_s - 60.0, ego_s + 120.0, 0.85 * limit, 1.05 * limit,
                20.0, ego_s - 8.0, ego_s + 8.0);
  b.add_traffic(right, b.rng.integer(0, 3), ego_s - 60.0, ego_s + 120.0, 0.8 * limit, limit, 20.0,
                ego_s - 8.0, ego_s + 8.0);
  b.add_roadside(ref, -1.5 * kLaneWidth, 1.5 * kLaneWidth, 0, b.rng.integer(0, 2), false);
}

void build_low_speed_zone(Builder& b) {
  const double limit = b.rng.uniform(4.0, 7.0);
  const auto ref = road_reference(b.rng, 0.4, 80.0, 200.0);
  b.add_lane(make_lane(ref, limit));
  const int west = b.add_lane(make_lane(reversed(offset_points(ref, kLaneWidth)), limit));
  b.place_ego(limit + b.rng.uniform(2.0, 4.0));
  b.add_traffic(west, b.rng.integer(0, 2), 80.0, 420.0, 0.7 * limit, limit, 20.0);
  b.add_roadside(ref, -kLaneWidth / 2.0, 1.5 * kLaneWidth, b.rng.integer(2, 5), b.rng.integer(1, 3),
                 b.rng.chance(0.5));
}

}  // namespace

std::string_view kind_name(ScenarioKind kind) { return kKindNames.at(static_cast<std::size_t>(kind)); }

ScenarioKind parse_kind(std::string_view name) {
  for (std::size_t i = 0; i < kNumScenarioKinds; ++i) {
    if (kKindNames[i] == name) return kKinds[i];
  }
  throw Error(fmt::format("unknown scenario kind '{}'", name));
}

const std::array<ScenarioKind, kNumScenarioKinds>& all_kinds() { return kKinds; }

std::array<double, kNumScenarioKinds> default_kind_weights() {
  return {0.45, 0.25, 0.12, 0.04, 0.04, 0.03, 0.03, 0.02, 0.02};
}

double AgentScript::v_at(double t) const {
  if (t <= t_change) return v0;
  const double ramp = std::abs(v1 - v0) / accel;
  if (t >= t_change + ramp) return v1;
  return v0 + std::copysign(accel, v1 - v0) * (t - t_change);
}

double AgentScript::s_at(double t) const {
  if (t <= t_change) return s0 + v0 * t;
  const double base = s0 + v0 * t_change;
  const double ramp = std::abs(v1 - v0) / accel;
  const double a = std::copysign(accel, v1 - v0);
  const double dt = std::min(t - t_change, ramp);
  const double s_ramp = v0 * dt + 0.5 * a * dt * dt;
  return base + s_ramp + v1 * std::max(0.0, t - t_change - ramp);
}

AgentState AgentScript::state_on_path(double s, double v) const {
  AgentState st;
  const double h = path.heading_at(s);
  st.pose.pos = path.point_at(s) + unit(h + kPi / 2.0) * lateral;
  st.pose.heading = h;
  st.speed = v;
  st.length = length;
  st.width = width;
  st.type = type;
  return st;
}

AgentState AgentScript::state_at(double t) const { return state_on_path(s_at(t), v_at(t)); }

bool World::on_road(Vec2 p, double margin) const {
  for (const OrientedBox& j : junctions) {
    const Vec2 q = to_local(Pose{j.center, j.heading}, p);
    if (std::abs(q.x) <= j.length / 2.0 + margin && std::abs(q.y) <= j.width / 2.0 + margin) {
      return true;
    }
  }
  for (const Lane& l : lanes) {
    const Projection pr = l.center.project(p);
    if (pr.s < 0.0 || pr.s > l.center.length()) continue;
    if (pr.distance <= l.width / 2.0 + margin) return true;
  }
  return false;
}

World generate_world(std::uint64_t seed, ScenarioKind kind) {
  Builder b(seed, kind);
  b.init_expert();
  switch (kind) {
    case ScenarioKind::Stationary: build_stationary(b); break;
    case ScenarioKind::LaneFollow: build_lane_follow(b); break;
    case ScenarioKind::LeadFollow: build_lead_follow(b); break;
    case ScenarioKind::LeftTurn: build_turn(b, true); break;
    case ScenarioKind::RightTurn: build_turn(b, false); break;
    case ScenarioKind::LaneChange: build_lane_change(b); break;
    case ScenarioKind::StopRedLight: build_stop_red_light(b); break;
    case ScenarioKind::HighSpeed: build_high_speed(b); break;
    case ScenarioKind::LowSpeedZone: build_low_speed_zone(b); break;
  }
  const Pose frame{{b.rng.uniform(-200.0, 200.0), b.rng.uniform(-200.0, 200.0)},
                   b.rng.uniform(-kPi, kPi)};
  transform_world(b.w, frame);

  World& w = b.w;
  const ExpertAction a0 = expert_controller(w, w.ego_start, scripted_states(w, 0.0), 0.0);
  const VehicleState next = bicycle_step(w.ego_start, a0.accel, a0.steer, 0.1, w.vehicle);
  w.ego_start.accel = next.accel;
  w.ego_start.yaw_rate = w.ego_start.speed * std::tan(std::clamp(a0.steer, -w.vehicle.max_steer,
                                                                 w.vehicle.max_steer)) /
                         w.vehicle.wheelbase;
  return std::move(b.w);
}

std::vector<AgentState> scripted_states(const World& w, double t) {
  std::vector<AgentState> out;
  out.reserve(w.agents.size());
  for (const AgentScript& a : w.agents) out.push_back(a.state_at(t));
  return out;
}

VehicleState bicycle_step(const VehicleState& s, double accel, double steer, double dt,
                          const VehicleParams& p) {
  accel = std::clamp(accel, -p.max_decel, p.max_accel);
  steer = std::clamp(steer, -p.max_steer, p.max_steer);
  VehicleState n = s;
  n.speed = std::max(0.0, s.speed + accel * dt);
  n.accel = (n.speed - s.speed) / dt;
  const double v_mid = 0.5 * (s.speed + n.speed);
  n.yaw_rate = v_mid * std::tan(steer) / p.wheelbase;
  const double dh = n.yaw_rate * dt;
  n.pos = s.pos + unit(s.heading + 0.5 * dh) * (v_mid * dt);
  n.heading = wrap_angle(s.heading + dh);
  return n;
}

double idm_acceleration(const IdmParams& p, double v, double gap, double dv) {
  const double v0 = std::max(p.desired_speed, 1e-3);
  double free_term;
  if (v <= v0) {
    free_term = p.max_accel * (1.0 - std::pow(v / v0, p.exponent));
  } else {
    free_term = -p.comfort_decel *
                (1.0 - std::pow(v0 / v, p.max_accel * p.exponent / p.comfort_decel));
  }
  double interaction = 0.0;
  if (std::isfinite(gap)) {
    const double s_star =
        p.min_gap + std::max(0.0, v * p.time_headway +
                                      v * dv / (2.0 * std::sqrt(p.max_accel * p.comfort_decel)));
    const double g = std::max(gap, 0.05);
    interaction = p.max_accel * (s_star / g) * (s_star / g);
  }
  if (p.desired_speed <= 0.0) free_term = v > 0.0 ? -p.comfort_decel : 0.0;
  return std::clamp(free_term - interaction, -p.max_brake, p.max_accel);
}

double idm_equilibrium_gap(const IdmParams& p, double v) {
  const double r = 1.0 - std::pow(v / p.desired_speed, p.exponent);
  FD_CHECK(r > 0.0, "no IDM equilibrium at or above the desired speed");
  return (p.min_gap + v * p.time_headway) / std::sqrt(r);
}

double expert_path_offset(const ExpertParams& e, double t) {
  double off = e.lateral_bias;
  if (e.change_offset != 0.0) {
    const double u = std::clamp((t - e.change_start) / e.change_duration, 0.0, 1.0);
    off += e.change_offset * (1.0 - u * u * (3.0 - 2.0 * u));
  }
  return off;
}

ExpertAction expert_controller(const World& w, const VehicleState& ego,
                               std::span<const AgentState> agents, double t) {
  const ExpertParams& e = w.expert;
  const VehicleParams& vp = w.vehicle;
  if (!w.on_road(ego.pos, 1.0)) {
    return {ego.speed > 0.0 ? -e.idm.comfort_decel : 0.0, 0.0};
  }
  const Lane& route = w.route();
  const Polyline& path = route.center;
  const Projection me = path.project(ego.pos);
  const double v = ego.speed;

  // Cruise at a fraction of the limit, capped by the curvature under the
  // ego; curves further ahead are anticipated with the constant deceleration
  // that reaches their cap on arrival.
  const double cruise = e.speed_factor * route.speed_limit;
  auto curve_cap = [&](double s) {
    const double k = path.curvature_at(s, 3.0);
    return std::min(cruise, std::sqrt(e.lat_accel_max / std::max(k, 1e-6)));
  };
  const double desired = curve_cap(me.s);
  double anticipate = std::numeric_limits<double>::infinity();
  const double reach = std::max(30.0, v * v / (2.0 * e.idm.comfort_decel) + 20.0);
  for (double ds = 2.0; ds <= reach; ds += 2.0) {
    const double cap = curve_cap(me.s + ds);
    const double vv = std::min(v, desired);
    if (vv > cap) anticipate = std::min(anticipate, -(vv * vv - cap * cap) / (2.0 * ds));
  }

  const double offset_now = expert_path_offset(e, t);
  double gap = std::numeric_limits<double>::infinity();
  double lead_speed = 0.0;
  for (const AgentState& a : agents) {
    const Projection pa = path.project(a.pose.pos);
    const double ds = pa.s - me.s;
    if (ds <= 0.0 || ds > 100.0) continue;
    const double rel = wrap_angle(a.pose.heading - path.heading_at(pa.s));
    const double half_along =
        0.5 * (a.length * std::abs(std::cos(rel)) + a.width * std::abs(std::sin(rel)));
    const double half_across =
        0.5 * (a.length * std::abs(std::sin(rel)) + a.width * std::abs(std::cos(rel)));
    if (std::abs(pa.lateral - offset_now) > half_across + vp.width / 2.0 + 0.3) continue;
    const double g = ds - half_along - vp.length / 2.0;
    if (g < gap) {
      gap = g;
      lead_speed = a.speed * std::cos(rel);
    }
  }
  if (route.light.at(t) == Light::Red) {
    const double g = route.light.stop_s - me.s - vp.length / 2.0;
    if (g > -0.5 && v * v <= 2.0 * 4.5 * std::max(g, 0.1) && g < gap) {
      gap = std::max(g, 0.01);
      lead_speed = 0.0;
    }
  }
  IdmParams idm = e.idm;
  idm.desired_speed = desired;
  double accel = idm_acceleration(idm, v, gap, v - lead_speed);
  if (anticipate < -0.3) accel = std::min(accel, std::max(anticipate, -idm.max_brake));

  const double ld =
      std::clamp(e.lookahead_base + e.lookahead_gain * v + e.lookahead_quad * v * v, 4.0, 30.0);
  const double s_t = me.s + ld;
  const double off = expert_path_offset(e, t + ld / std::max(v, 2.0));
  const Vec2 target = path.point_at(s_t) + unit(path.heading_at(s_t) + kPi / 2.0) * off;
  const Vec2 local = to_local(ego.pose(), target);
  const double dist = std::max(local.norm(), 1e-3);
  const double alpha = std::atan2(local.y, local.x);
  const double steer = std::atan2(2.0 * vp.wheelbase * std::sin(alpha), dist);
  return {accel, std::clamp(steer, -vp.max_steer, vp.max_steer)};
}

std::vector<VehicleState> rollout_expert(const World& w, const VehicleState& start, double t0,
                                         std::size_t steps, double dt) {
  std::vector<VehicleState> out;
  out.reserve(steps + 1);
  out.push_back(start);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = t0 + double(k) * dt;
    const auto agents = scripted_states(w, t);
    const ExpertAction a = expert_controller(w, out.back(), agents, t);
    out.push_back(bicycle_step(out.back(), a.accel, a.steer, dt, w.vehicle));
  }
  return out;
}

OrientedBox footprint(const AgentState& a) { return {a.pose.pos, a.pose.heading, a.length, a.width}; }

OrientedBox footprint(const VehicleState& s, const VehicleParams& p) {
  return {s.pos, s.heading, p.length, p.width};
}

}  // namespace flowdrive::world
