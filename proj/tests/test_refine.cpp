#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "flowdrive/error.hpp"
#include "flowdrive/refine.hpp"

using namespace flowdrive;
using namespace flowdrive::refine;
using scene::Trajectory;
using scene::Waypoint;

namespace {

Trajectory line(double speed, double dt, std::size_t h, double heading = 0.0) {
  Trajectory t;
  for (std::size_t i = 1; i <= h; ++i) {
    const double d = speed * dt * static_cast<double>(i);
    t.push_back({d * std::cos(heading), d * std::sin(heading), std::cos(heading), std::sin(heading)});
  }
  return t;
}

world::World straight_world(double ego_speed) {
  world::World w;
  world::Lane lane;
  lane.center = Polyline(straight_points({-50.0, 0.0}, 0.0, 400.0));
  lane.width = 3.5;
  lane.speed_limit = 13.0;
  w.lanes.push_back(lane);
  w.route_lane = 0;
  w.ego_start.pos = {0.0, 0.0};
  w.ego_start.speed = ego_speed;
  return w;
}

Trajectory expert_future(const world::World& w, std::size_t h = 16) {
  const auto roll = world::rollout_expert(w, w.ego_start, 0.0, 5 * h, 0.1);
  std::vector<world::VehicleState> fut;
  for (std::size_t i = 1; i <= h; ++i) fut.push_back(roll[5 * i]);
  return scene::local_trajectory(w.ego_start, fut);
}

double seg_speed(const Trajectory& t, std::size_t i, double dt) {
  const double px = i == 0 ? 0.0 : t[i - 1].x, py = i == 0 ? 0.0 : t[i - 1].y;
  return std::hypot(t[i].x - px, t[i].y - py) / dt;
}

double dist_to_polyline(const std::vector<Vec2>& pts, Vec2 p) {
  double best = 1e18;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const Vec2 a = pts[i - 1], b = pts[i], ab = b - a;
    const double f = std::clamp((p - a).dot(ab) / ab.dot(ab), 0.0, 1.0);
    best = std::min(best, (p - (a + ab * f)).norm());
  }
  return best;
}

}  // namespace

TEST_CASE("smooth: fixed points, endpoints and jerk reduction") {
  const Trajectory s = line(8.0, 0.5, 16, 0.3);
  const Trajectory out = smooth(s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(std::abs(out[i].x - s[i].x) < 1e-12);
    CHECK(std::abs(out[i].y - s[i].y) < 1e-12);
  }
  Trajectory zig = line(4.0, 0.5, 12);
  for (std::size_t i = 0; i < zig.size(); ++i) zig[i].y = i % 2 ? 0.1 : -0.1;
  const Trajectory zs = smooth(zig);
  CHECK(jerk_metric(zs) < jerk_metric(zig));
  CHECK(zs.front() == zig.front());
  CHECK(zs.back() == zig.back());
  const Trajectory multi = smooth(zig, 4);
  CHECK(jerk_metric(multi) <= jerk_metric(zs));
  CHECK(multi.front() == zig.front());
  CHECK(multi.back() == zig.back());

  Trajectory three{{0, 0, 1, 0}, {1, 1, 1, 0}, {2, 0, 1, 0}};
  const Trajectory t3 = smooth(three);
  CHECK(t3[0] == three[0]);
  CHECK(t3[2] == three[2]);
  CHECK(t3[1].y == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("enforce_speed_limit: identity, uniform rescale, path preservation, idempotence") {
  const Trajectory slow = line(5.0, 0.5, 10);
  CHECK(enforce_speed_limit(slow, 6.0, 0.5) == slow);

  const Trajectory fast = line(20.0, 0.5, 10, 0.7);
  const Trajectory lim = enforce_speed_limit(fast, 10.0, 0.5);
  for (std::size_t i = 0; i < lim.size(); ++i) CHECK(seg_speed(lim, i, 0.5) == doctest::Approx(10.0).epsilon(1e-12));

  // Curved path at 1.5x the limit.
  Trajectory curve;
  std::vector<Vec2> poly{{0.0, 0.0}};
  const double r = 30.0, v = 15.0, dt = 0.5;
  for (std::size_t i = 1; i <= 16; ++i) {
    const double a = v * dt * static_cast<double>(i) / r;
    curve.push_back({r * std::sin(a), r * (1 - std::cos(a)), std::cos(a), std::sin(a)});
    poly.push_back({curve.back().x, curve.back().y});
  }
  const Trajectory cl = enforce_speed_limit(curve, 10.0, dt);
  for (std::size_t i = 0; i < cl.size(); ++i) {
    CHECK(seg_speed(cl, i, dt) <= 10.0 + 1e-9);
    CHECK(dist_to_polyline(poly, {cl[i].x, cl[i].y}) < 1e-9);
  }
  const Trajectory twice = enforce_speed_limit(cl, 10.0, dt);
  for (std::size_t i = 0; i < cl.size(); ++i) {
    CHECK(std::abs(twice[i].x - cl[i].x) < 1e-9);
    CHECK(std::abs(twice[i].y - cl[i].y) < 1e-9);
  }
  CHECK_THROWS_AS(enforce_speed_limit(curve, 0.0, dt), Error);
}

TEST_CASE("score: expert on an empty straight road scores high") {
  const world::World w = straight_world(10.0);
  const Trajectory expert = expert_future(w);
  const ScoreContext ctx = make_context(w, w.ego_start, 0.0, {}, 16, 0.5);
  CHECK(ctx.expert_progress > 50.0);
  const ScoreBreakdown s = score(expert, ctx);
  CHECK(s.no_collision == 1.0);
  CHECK(s.drivable_area == 1.0);
  CHECK(s.progress == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(s.total >= 0.9);
  // Determinism.
  const ScoreBreakdown s2 = score(expert, ctx);
  CHECK(score_csv_row(s) == score_csv_row(s2));

  // Standing still: progress near zero drags the total below the expert.
  const Trajectory still(16, Waypoint{});
  const ScoreBreakdown st = score(still, ctx);
  CHECK(st.progress < 0.01);
  CHECK(st.total < s.total);
  // Weighted arithmetic: progress 0, ttc 1, comfort c -> (5*0 + 5 + 2c)/12.
  CHECK(st.total == doctest::Approx((5.0 + 2.0 * st.comfort) / 12.0).epsilon(1e-12));
}

TEST_CASE("score: obstacles, off-road and red lights zero the multipliers") {
  world::World w = straight_world(10.0);
  w.statics.push_back({{{30.0, 0.0}, 0.0}, 4.6, 1.9, world::StaticType::ParkedVehicle});
  const ScoreContext ctx = make_context(w, w.ego_start, 0.0, {}, 16, 0.5);
  const ScoreBreakdown ram = score(line(10.0, 0.5, 16), ctx);
  CHECK(ram.no_collision == 0.0);
  CHECK(ram.total == 0.0);

  const world::World open = straight_world(10.0);
  const ScoreContext oc = make_context(open, open.ego_start, 0.0, {}, 16, 0.5);
  const ScoreBreakdown off = score(line(10.0, 0.5, 16, 0.4), oc);
  CHECK(off.drivable_area == 0.0);
  CHECK(off.total == 0.0);

  // A lead car moving slower: constant-velocity TTC drops, no collision.
  world::AgentState lead;
  lead.pose = {{14.0, 0.0}, 0.0};
  lead.speed = 2.0;
  const ScoreContext lc = make_context(open, open.ego_start, 0.0, {lead}, 16, 0.5);
  const ScoreBreakdown close = score(line(10.0, 0.5, 2), lc);
  CHECK(close.no_collision == 1.0);
  CHECK(close.ttc < 1.0);
  // An agent behind the ego never lowers TTC.
  world::AgentState behind = lead;
  behind.pose.pos = {-9.0, 0.0};
  behind.speed = 15.0;
  const ScoreContext bc = make_context(open, open.ego_start, 0.0, {behind}, 16, 0.5);
  CHECK(score(line(10.0, 0.5, 1), bc).ttc == 1.0);

  world::World red = straight_world(8.0);
  red.lanes[0].light = {true, 60.0, 0.0, 100.0};
  const ScoreContext rc = make_context(red, red.ego_start, 0.0, {}, 16, 0.5);
  CHECK(score(line(8.0, 0.5, 16), rc).no_collision == 0.0);
  CHECK(score(expert_future(red), rc).no_collision == 1.0);

  world::World none = straight_world(1.0);
  none.lanes.clear();
  CHECK_THROWS_AS(make_context(none, none.ego_start, 0.0, {}, 16, 0.5), Error);
}

TEST_CASE("select_best: argmax with deterministic tie-breaks") {
  auto cand = [](double total, double lat) {
    Candidate c;
    c.lat = lat;
    c.score.total = total;
    return c;
  };
  CHECK(select_best(std::vector<Candidate>{cand(0.3, 1.0)}) == 0);
  const std::vector<Candidate> three{cand(0.2, 0.0), cand(0.9, 0.5), cand(0.5, -0.2)};
  CHECK(select_best(three) == 1);
  auto scaled = three;
  for (auto& c : scaled) c.score.total *= 0.37;
  CHECK(select_best(scaled) == 1);
  const std::vector<Candidate> zeros{cand(0.0, -0.5), cand(0.0, 0.25), cand(0.0, -0.25), cand(0.0, 0.75)};
  CHECK(select_best(zeros) == 1);
  CHECK_THROWS_AS(select_best(std::vector<Candidate>{}), Error);
  CHECK(score_csv_header() == "no_collision,drivable_area,progress,ttc,comfort,total");
}
