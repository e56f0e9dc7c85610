#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "flowdrive/error.hpp"
#include "flowdrive/sim.hpp"

using namespace flowdrive;
using namespace flowdrive::sim;
using scene::Trajectory;

namespace {

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

world::AgentScript lane_agent(const world::World& w, double s0, double v0) {
  world::AgentScript a;
  a.lane = 0;
  a.path = w.lanes[0].center;
  a.s0 = s0;
  a.v0 = v0;
  a.v1 = v0;
  return a;
}

Trajectory line(double speed, double dt, std::size_t h) {
  Trajectory t;
  for (std::size_t i = 1; i <= h; ++i) t.push_back({speed * dt * static_cast<double>(i), 0.0, 1.0, 0.0});
  return t;
}

class FixedPlanner : public Planner {
 public:
  explicit FixedPlanner(Trajectory t) : t_(std::move(t)) {}
  std::string name() const override { return "fixed"; }
  void reset(const world::World&, std::uint64_t) override {}
  Trajectory plan(const SimState&) override { return t_; }
  double plan_dt() const override { return 0.5; }

 private:
  Trajectory t_;
};

class FailingPlanner : public FixedPlanner {
 public:
  FailingPlanner() : FixedPlanner(line(5.0, 0.5, 16)) {}
  Trajectory plan(const SimState& s) override {
    if (s.clock > 2.5) throw std::runtime_error("boom");
    return FixedPlanner::plan(s);
  }
};

scene::SceneDims tiny_dims() {
  scene::SceneDims d;
  d.neighbors = 3;
  d.statics = 2;
  d.lanes = 4;
  d.history = 4;
  d.lane_points = 5;
  d.horizon = 6;
  return d;
}

}  // namespace

TEST_CASE("step_world: stationary plan in an empty world holds still") {
  const world::World w = straight_world(0.0);
  SimState s = initial_state(w);
  const Plan plan{w.ego_start, 0.0, 0.5, Trajectory(16, scene::Waypoint{}), 0.0};
  for (int k = 0; k < 50; ++k) {
    const Vec2 before = s.ego.pos;
    step_world(s, plan, Mode::Reactive, {});
    CHECK((s.ego.pos - before).norm() < 0.01);
  }
  CHECK(s.clock == doctest::Approx(5.0));
  CHECK(s.events.empty());
}

TEST_CASE("step_world: reactive lead decelerates by the IDM law after a cut-in") {
  world::World w = straight_world(5.0);
  w.agents.push_back(lane_agent(w, 40.0, 10.0));  // agent at x = -10
  const SimConfig cfg;
  // Ego cut in 10 m ahead of the agent's center, slower than it.
  const double gap = (0.0 - (-10.0)) - 0.5 * (4.6 + w.vehicle.length);
  world::IdmParams idm = cfg.agent_idm;
  idm.desired_speed = 10.0;
  const double a = world::idm_acceleration(idm, 10.0, gap, 10.0 - 5.0);
  CHECK(a < -1.0);

  SimState r = initial_state(w);
  step_world(r, world::ExpertAction{0.0, 0.0}, Mode::Reactive, cfg);
  const double v1 = 10.0 + a * 0.1;
  CHECK(r.agent_v[0] == doctest::Approx(v1).epsilon(1e-12));
  CHECK(r.agent_s[0] == doctest::Approx(40.0 + 0.5 * (10.0 + v1) * 0.1).epsilon(1e-12));
  CHECK(r.agents[0].speed < 10.0);

  SimState n = initial_state(w);
  step_world(n, world::ExpertAction{0.0, 0.0}, Mode::NonReactive, cfg);
  CHECK(n.agent_v[0] == 10.0);
  CHECK(n.agents[0].pose.pos.x == doctest::Approx(-9.0).epsilon(1e-12));

  // With nothing ahead a reactive agent follows its script exactly.
  world::World free = straight_world(5.0);
  free.ego_start.pos = {200.0, 0.0};
  free.agents.push_back(lane_agent(free, 40.0, 10.0));
  SimState f = initial_state(free);
  for (int k = 0; k < 10; ++k) step_world(f, world::ExpertAction{}, Mode::Reactive, cfg);
  CHECK(f.agent_s[0] == doctest::Approx(free.agents[0].s_at(1.0)).epsilon(1e-12));
}

TEST_CASE("step_world: identical inputs give identical state streams") {
  const world::World w = world::generate_world(7, world::ScenarioKind::LeadFollow);
  const Plan plan{w.ego_start, 0.0, 0.5, line(6.0, 0.5, 16), 0.0};
  for (Mode mode : {Mode::NonReactive, Mode::Reactive}) {
    SimState a = initial_state(w), b = initial_state(w);
    for (int k = 0; k < 40; ++k) {
      step_world(a, plan, mode, {});
      step_world(b, plan, mode, {});
      REQUIRE(a == b);
    }
  }
}

TEST_CASE("non-reactive agents replay scripts regardless of the ego") {
  const world::World w = world::generate_world(3, world::ScenarioKind::LaneChange);
  REQUIRE_FALSE(w.agents.empty());
  FixedPlanner still(Trajectory(16, scene::Waypoint{}));
  FixedPlanner fast(line(12.0, 0.5, 16));
  const EpisodeResult a = run_closed_loop(still, w, Mode::NonReactive);
  const EpisodeResult b = run_closed_loop(fast, w, Mode::NonReactive);
  REQUIRE(a.agents.size() == b.agents.size());
  for (std::size_t k = 0; k < a.agents.size(); ++k) {
    const auto script = world::scripted_states(w, static_cast<double>(k) * 0.1);
    for (std::size_t i = 0; i < script.size(); ++i) {
      CHECK(a.agents[k][i].pose.pos == b.agents[k][i].pose.pos);
      CHECK(a.agents[k][i].pose.pos.x == doctest::Approx(script[i].pose.pos.x).epsilon(1e-12));
      CHECK(a.agents[k][i].pose.pos.y == doctest::Approx(script[i].pose.pos.y).epsilon(1e-12));
    }
  }
  // Training features and closed-loop features agree at the start.
  const SimState s = initial_state(w);
  const auto dims = tiny_dims();
  CHECK(observe(s, dims) ==
        scene::featurize(w, w.ego_start, scene::scripted_tracks(w, 0.0, dims), 0.0, dims));
}

TEST_CASE("run_closed_loop: ramming a stopped lead scores zero") {
  world::World w = straight_world(10.0);
  w.agents.push_back(lane_agent(w, 80.0, 0.0));  // stopped car 30 m ahead
  FixedPlanner ram(line(10.0, 0.5, 16));
  const EpisodeResult r = run_closed_loop(ram, w, Mode::NonReactive);
  CHECK(r.score.no_collision == 0.0);
  CHECK(r.score.total == 0.0);
  bool fault = false;
  for (const Event& e : r.events) fault |= e.type == EventType::Collision && e.at_fault;
  CHECK(fault);

  ExpertPlanner expert;
  const EpisodeResult e = run_closed_loop(expert, w, Mode::NonReactive);
  CHECK(e.score.no_collision == 1.0);
  CHECK(e.score.total > 0.0);
}

TEST_CASE("run_closed_loop: expert replay scores at least 90 on generated scenarios") {
  for (world::ScenarioKind k : world::all_kinds()) {
    for (std::uint64_t seed : {0u, 1u}) {
      const world::World w = world::generate_world(seed, k);
      ExpertPlanner expert;
      const EpisodeResult r = run_closed_loop(expert, w, Mode::NonReactive);
      INFO(world::kind_name(k), " seed ", seed, " ", report_csv_row(r));
      CHECK(r.score.total >= 90.0);
      CHECK(r.score.progress == doctest::Approx(1.0));
      CHECK(r.trace.size() == 151);
    }
  }
}

TEST_CASE("driving_score: multipliers and weighted arithmetic") {
  const SimConfig cfg;
  std::vector<TraceRow> trace(11);
  for (std::size_t k = 0; k < trace.size(); ++k) {
    trace[k].time = 0.1 * static_cast<double>(k);
    trace[k].ego.speed = 8.0;
    trace[k].speed_limit = 13.0;
    trace[k].min_ttc = std::numeric_limits<double>::infinity();
  }
  const DrivingScore clean = driving_score({}, trace, 50.0, 100.0, cfg);
  CHECK(clean.progress == 0.5);
  CHECK(clean.total == doctest::Approx(100.0 * (5 * 0.5 + 5 + 4 + 2) / 16.0).epsilon(1e-12));

  const std::vector<Event> crash{{1.0, EventType::Collision, 0, true, ""}};
  CHECK(driving_score(crash, trace, 100.0, 100.0, cfg).total == 0.0);
  const std::vector<Event> hit{{1.0, EventType::Collision, 0, false, ""}};
  CHECK(driving_score(hit, trace, 100.0, 100.0, cfg).total == doctest::Approx(100.0));
  const std::vector<Event> off{{1.0, EventType::OffRoad, -1, true, ""}};
  CHECK(driving_score(off, trace, 100.0, 100.0, cfg).total == 0.0);
  const std::vector<Event> red{{1.0, EventType::RedLight, -1, true, ""}};
  CHECK(driving_score(red, trace, 100.0, 100.0, cfg).total == doctest::Approx(100.0));

  // Speeding by 2.23 m/s on every step zeroes the compliance term.
  auto fast = trace;
  for (auto& r : fast) r.ego.speed = 13.0 + 2.23;
  CHECK(driving_score({}, fast, 1.0, 1.0, cfg).speed_limit == doctest::Approx(0.0).epsilon(1e-12));
  auto close = trace;
  close[4].min_ttc = 0.5;
  CHECK(driving_score({}, close, 1.0, 1.0, cfg).ttc == 0.0);
  // Short expert progress counts as full progress.
  CHECK(driving_score({}, trace, 0.0, 2.0, cfg).progress == 1.0);
}

TEST_CASE("run_closed_loop: planner failure is scored zero and flagged") {
  const world::World w = straight_world(5.0);
  FailingPlanner p;
  const EpisodeResult r = run_closed_loop(p, w, Mode::NonReactive);
  CHECK(r.score.failed);
  CHECK(r.score.total == 0.0);
  REQUIRE_FALSE(r.events.empty());
  CHECK(r.events.back().type == EventType::PlannerFailure);
  CHECK(r.events.back().detail == "boom");
  CHECK(report_csv_row(r).ends_with(",1"));
}

TEST_CASE("config, names and report format") {
  SimConfig bad;
  bad.replan = 0.15;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = {};
  bad.duration = 0.0;
  CHECK_THROWS_AS(validate(bad), Error);
  CHECK_NOTHROW(validate(SimConfig{}));
  CHECK(parse_mode("reactive") == Mode::Reactive);
  CHECK(parse_mode(mode_name(Mode::NonReactive)) == Mode::NonReactive);
  CHECK_THROWS_AS(parse_mode("sometimes"), Error);
  for (PlannerKind k : {PlannerKind::FlowDriveMinus, PlannerKind::FlowDrive, PlannerKind::FlowDriveStar,
                        PlannerKind::ExpertReplay}) {
    CHECK(parse_planner(planner_name(k)) == k);
  }
  CHECK_THROWS_AS(parse_planner("pdm"), Error);
  CHECK(report_csv_header() ==
        "scenario,seed,planner,mode,total,no_collision,drivable_area,progress,ttc,speed_limit,comfort,failed");
}

TEST_CASE("flow planners: deterministic, hybrid selects the best scored candidate") {
  const auto dims = tiny_dims();
  model::ModelConfig mc;
  mc.dim = 8;
  mc.heads = 2;
  mc.fusion_layers = 1;
  mc.dit_layers = 1;
  const auto eps = scene::generate_dataset(6, 2, world::default_kind_weights(), dims);
  const auto stats = scene::compute_stats(std::span<const scene::ExpertEpisode>(eps));
  FlowPlannerOptions opts;
  opts.flow.infer_steps = 4;
  opts.lat = guidance::linspace(-1.0, 1.0, 5);
  opts.hybrid = true;
  SimConfig cfg;
  cfg.duration = 3.0;
  const world::World w = world::generate_world(5, world::ScenarioKind::LaneFollow);

  FlowPlanner a("flowdrive_star", model::FlowModel::create(mc, dims, 1), stats, opts);
  FlowPlanner b("flowdrive_star", model::FlowModel::create(mc, dims, 1), stats, opts);
  const EpisodeResult ra = run_closed_loop(a, w, Mode::Reactive, cfg, 9);
  const EpisodeResult rb = run_closed_loop(b, w, Mode::Reactive, cfg, 9);
  CHECK(report_csv_row(ra) == report_csv_row(rb));
  CHECK(trace_csv(ra) == trace_csv(rb));
  CHECK(ra.plans.size() == 3);
  REQUIRE(a.last_candidates().size() == 5);
  const auto& c = a.last_candidates();
  CHECK(c.front().lat == -1.0);
  CHECK(c.back().lat == 1.0);
  const std::size_t best = refine::select_best(c);
  CHECK(c[best].trajectory == ra.plans.back().trajectory);

  opts.hybrid = false;
  FlowPlanner plain("flowdrive", model::FlowModel::create(mc, dims, 1), stats, opts);
  const EpisodeResult rp = run_closed_loop(plain, w, Mode::Reactive, cfg, 9);
  CHECK(rp.plans.size() == 3);
  CHECK_FALSE(rp.score.failed);
}

TEST_CASE("run_suite: input order and worker count do not change results") {
  const std::vector<world::ScenarioKind> kinds{world::ScenarioKind::LeadFollow,
                                               world::ScenarioKind::StopRedLight};
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  SimConfig cfg;
  cfg.duration = 5.0;
  auto factory = [] { return std::make_unique<ExpertPlanner>(); };
  const auto one = run_suite(factory, kinds, seeds, Mode::Reactive, cfg, 1);
  const auto two = run_suite(factory, kinds, seeds, Mode::Reactive, cfg, 2);
  REQUIRE(one.size() == 6);
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].kind == kinds[i / 3]);
    CHECK(one[i].seed == seeds[i % 3]);
    CHECK(report_csv_row(one[i]) == report_csv_row(two[i]));
  }
  double mean = 0.0;
  for (const auto& r : one) mean += r.score.total;
  CHECK(aggregate(one) == doctest::Approx(mean / 6.0).epsilon(1e-15));
}
