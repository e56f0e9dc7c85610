#include <cmath>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "flowdrive/error.hpp"
#include "flowdrive/geometry.hpp"
#include "flowdrive/world.hpp"

using namespace flowdrive;
using namespace flowdrive::world;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Straight single-lane world along +x with the ego at the origin.
World straight_world(double limit = 10.0) {
  World w;
  Lane l;
  l.center = Polyline(straight_points({-50.0, 0.0}, 0.0, 400.0));
  l.speed_limit = limit;
  w.lanes.push_back(l);
  w.route_lane = 0;
  w.expert.speed_factor = 1.0;
  w.ego_start.pos = {0.0, 0.0};
  return w;
}

}  // namespace

TEST_CASE("geometry: wrap_angle range and frame round trip") {
  CHECK(wrap_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(3.0 * std::numbers::pi / 2.0) == doctest::Approx(-std::numbers::pi / 2.0));
  const Pose frame{{3.0, -2.0}, 0.7};
  const Vec2 p{10.0, 4.0};
  const Vec2 back = to_world(frame, to_local(frame, p));
  CHECK(back.x == doctest::Approx(p.x).epsilon(1e-12));
  CHECK(back.y == doctest::Approx(p.y).epsilon(1e-12));
  const Vec2 origin = to_local(frame, frame.pos);
  CHECK(origin.x == 0.0);
  CHECK(origin.y == 0.0);
}

TEST_CASE("geometry: polyline projection gives signed lateral offsets") {
  const Polyline line(straight_points({0.0, 0.0}, 0.0, 100.0));
  const Projection left = line.project({40.0, 2.0});
  CHECK(left.s == doctest::Approx(40.0));
  CHECK(left.lateral == doctest::Approx(2.0));
  CHECK(line.project({40.0, -1.5}).lateral == doctest::Approx(-1.5));
  // Arc of radius 20: curvature 1/20.
  const Polyline arc(arc_points({0.0, 0.0}, 0.0, 20.0, std::numbers::pi / 2.0));
  CHECK(arc.curvature_at(arc.length() / 2.0) == doctest::Approx(0.05).epsilon(0.02));
}

TEST_CASE("geometry: box overlap") {
  const OrientedBox a{{0.0, 0.0}, 0.0, 4.0, 2.0};
  CHECK(overlaps(a, {{3.9, 0.0}, 0.0, 4.0, 2.0}));
  CHECK_FALSE(overlaps(a, {{4.1, 0.0}, 0.0, 4.0, 2.0}));
  // Rotated box whose AABB would overlap but which does not.
  CHECK_FALSE(overlaps(a, {{3.2, 2.2}, std::numbers::pi / 4.0, 2.0, 0.5}));
}

TEST_CASE("bicycle: straight motion integrates speed exactly and never reverses") {
  VehicleParams p;
  VehicleState s;
  s.speed = 5.0;
  for (int i = 0; i < 10; ++i) s = bicycle_step(s, 1.0, 0.0, 0.1, p);
  CHECK(s.speed == doctest::Approx(6.0));
  CHECK(s.pos.x == doctest::Approx(5.0 + 0.5 * 1.0 * 1.0));
  CHECK(s.pos.y == 0.0);
  VehicleState slow;
  slow.speed = 0.2;
  slow = bicycle_step(slow, -8.0, 0.0, 0.1, p);
  CHECK(slow.speed == 0.0);
  CHECK(slow.accel == doctest::Approx(-2.0));
}

TEST_CASE("idm: free road below desired speed accelerates") {
  IdmParams p;
  p.desired_speed = 12.0;
  CHECK(idm_acceleration(p, 5.0, kInf, 0.0) > 0.0);
  CHECK(idm_acceleration(p, 0.0, kInf, 0.0) == doctest::Approx(p.max_accel));
}

TEST_CASE("idm: equilibrium gap with an equal-speed lead gives zero acceleration") {
  IdmParams p;
  p.desired_speed = 15.0;
  const double v = 10.0;
  // Independent root solve of the IDM interaction balance by bisection.
  auto f = [&](double gap) {
    const double s_star = p.min_gap + v * p.time_headway;
    return 1.0 - std::pow(v / p.desired_speed, p.exponent) - (s_star / gap) * (s_star / gap);
  };
  double lo = 1.0, hi = 500.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  CHECK(idm_equilibrium_gap(p, v) == doctest::Approx(lo).epsilon(1e-9));
  CHECK(std::abs(idm_acceleration(p, v, lo, 0.0)) < 1e-9);
  // Closing the gap brakes harder.
  CHECK(idm_acceleration(p, v, 0.5 * lo, 0.0) < -0.5);
}

TEST_CASE("expert: free road accelerates toward the limit") {
  World w = straight_world(12.0);
  w.ego_start.speed = 5.0;
  const ExpertAction a = expert_controller(w, w.ego_start, {}, 0.0);
  CHECK(a.accel > 0.0);
  CHECK(std::abs(a.steer) < 1e-9);
}

TEST_CASE("expert: red light within the stopping envelope brakes") {
  World w = straight_world(12.0);
  w.lanes[0].light = {true, 50.0 + 25.0, -1e9, 1e9};
  w.ego_start.speed = 10.0;
  const ExpertAction a = expert_controller(w, w.ego_start, {}, 0.0);
  CHECK(a.accel <= 0.0);
  // The same light on green lets the expert continue.
  w.lanes[0].light.red_end = -1.0;
  CHECK(expert_controller(w, w.ego_start, {}, 0.0).accel > 0.0);
}

TEST_CASE("expert: red light brings the ego to a stop before the line") {
  World w = straight_world(12.0);
  const double stop_s = 50.0 + 40.0;
  w.lanes[0].light = {true, stop_s, -1e9, 1e9};
  w.ego_start.speed = 10.0;
  const auto roll = rollout_expert(w, w.ego_start, 0.0, 200);
  CHECK(roll.back().speed < 0.05);
  CHECK(roll.back().pos.x + w.vehicle.length / 2.0 < stop_s - 50.0);
}

TEST_CASE("expert: lead at the equilibrium gap and equal speed holds speed") {
  World w = straight_world(15.0);
  const double v = 10.0;
  w.ego_start.speed = v;
  IdmParams p = w.expert.idm;
  p.desired_speed = 15.0;
  const double gap = idm_equilibrium_gap(p, v);
  AgentState lead;
  lead.pose = {{w.vehicle.length / 2.0 + gap + lead.length / 2.0, 0.0}, 0.0};
  lead.speed = v;
  const std::vector<AgentState> agents{lead};
  CHECK(std::abs(expert_controller(w, w.ego_start, agents, 0.0).accel) < 1e-6);
}

TEST_CASE("expert: ego off every lane brakes to a stop") {
  World w = straight_world(12.0);
  w.ego_start.pos = {0.0, 30.0};
  w.ego_start.speed = 6.0;
  const ExpertAction a = expert_controller(w, w.ego_start, {}, 0.0);
  CHECK(a.accel < 0.0);
  CHECK(a.steer == 0.0);
  w.ego_start.speed = 0.0;
  CHECK(expert_controller(w, w.ego_start, {}, 0.0).accel == 0.0);
}

TEST_CASE("world: kinds parse by name and generation is deterministic") {
  for (ScenarioKind k : all_kinds()) {
    CHECK(parse_kind(kind_name(k)) == k);
    const World a = generate_world(11, k);
    const World b = generate_world(11, k);
    CHECK(a.ego_start.pos == b.ego_start.pos);
    CHECK(a.agents.size() == b.agents.size());
    CHECK(a.lanes.size() == b.lanes.size());
    CHECK(a.on_road(a.ego_start.pos));
    CHECK(a.ego_start.speed >= 0.0);
    CHECK(std::abs(a.ego_start.heading) <= std::numbers::pi);
  }
  CHECK_THROWS_AS(parse_kind("merge"), Error);
}

TEST_CASE("world: scripted agent speed profile integrates to its position") {
  AgentScript a;
  a.path = Polyline(straight_points({0.0, 0.0}, 0.0, 500.0));
  a.s0 = 10.0;
  a.v0 = 8.0;
  a.t_change = 1.0;
  a.accel = 2.0;
  a.v1 = 2.0;
  CHECK(a.v_at(0.5) == 8.0);
  CHECK(a.v_at(2.0) == doctest::Approx(6.0));
  CHECK(a.v_at(10.0) == 2.0);
  // Trapezoid rule on the piecewise-linear speed profile.
  double s = a.s0;
  const double dt = 1e-3;
  for (double t = 0.0; t < 6.0 - 1e-12; t += dt) s += 0.5 * (a.v_at(t) + a.v_at(t + dt)) * dt;
  CHECK(a.s_at(6.0) == doctest::Approx(s).epsilon(1e-6));
  CHECK(a.s_at(-1.0) == doctest::Approx(2.0));
}

TEST_CASE("world: expert rollouts stay on the road, collision free, within steering limits") {
  for (ScenarioKind k : all_kinds()) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const World w = generate_world(seed, k);
      const auto roll = rollout_expert(w, w.ego_start, 0.0, 150);
      const double kappa_max = std::tan(w.vehicle.max_steer) / w.vehicle.wheelbase;
      for (std::size_t i = 0; i < roll.size(); ++i) {
        const auto box = footprint(roll[i], w.vehicle);
        for (const Vec2& c : box.corners()) CHECK(w.on_road(c));
        for (const AgentState& a : scripted_states(w, 0.1 * double(i))) {
          CHECK_FALSE(overlaps(box, footprint(a)));
        }
        if (roll[i].speed > 0.5) {
          CHECK(std::abs(roll[i].yaw_rate) / roll[i].speed <= kappa_max * (1.0 + 1e-9));
        }
      }
    }
  }
}
