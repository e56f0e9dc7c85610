#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "flowdrive/error.hpp"
#include "flowdrive/scene.hpp"

using namespace flowdrive;
using namespace flowdrive::scene;
using world::ScenarioKind;

namespace {

double path_length(const Trajectory& t) {
  double len = 0.0, px = 0.0, py = 0.0;
  for (const Waypoint& w : t) {
    len += std::hypot(w.x - px, w.y - py);
    px = w.x;
    py = w.y;
  }
  return len;
}

std::vector<Vec2> valid_lane_points(const SceneContext& c) {
  std::vector<Vec2> out;
  const std::size_t v = c.lanes.shape[1];
  for (std::size_t i = 0; i < c.lane_mask.size(); ++i) {
    if (c.lane_mask[i] == 0.0) continue;
    for (std::size_t k = 0; k < v; ++k) {
      out.push_back({c.lanes[(i * v + k) * kLaneFeatures], c.lanes[(i * v + k) * kLaneFeatures + 1]});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("scenario: stationary future does not move") {
  const ExpertEpisode ep = generate_scenario(0, ScenarioKind::Stationary);
  REQUIRE(ep.future.size() == 16);
  for (const Waypoint& w : ep.future) CHECK(std::hypot(w.x, w.y) < 0.01);
}

TEST_CASE("scenario: lane_follow arc length matches the free-road speed profile") {
  const ExpertEpisode ep = generate_scenario(7, ScenarioKind::LaneFollow);
  const world::World w = world::generate_world(7, ScenarioKind::LaneFollow);
  const double v0 = w.ego_start.speed;
  const double horizon = 16 * 0.5;
  CHECK(path_length(ep.future) == doctest::Approx(v0 * horizon).epsilon(0.10));

  // Independent RK4 integration of the free-road speed law toward the cruise
  // speed (improved-IDM form above it, IDM below).
  const world::IdmParams& p = w.expert.idm;
  const double cruise = w.expert.speed_factor * w.route().speed_limit;
  auto dv = [&](double v) {
    if (v <= cruise) return p.max_accel * (1.0 - std::pow(v / cruise, p.exponent));
    return -p.comfort_decel * (1.0 - std::pow(cruise / v, p.max_accel * p.exponent / p.comfort_decel));
  };
  double v = v0, s = 0.0;
  const double h = 1e-3;
  for (int i = 0; i < static_cast<int>(horizon / h); ++i) {
    const double k1 = dv(v), k2 = dv(v + 0.5 * h * k1), k3 = dv(v + 0.5 * h * k2), k4 = dv(v + h * k3);
    const double vn = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    s += 0.5 * (v + vn) * h;
    v = vn;
  }
  CHECK(path_length(ep.future) == doctest::Approx(s).epsilon(0.03));
}

TEST_CASE("scenario: same (seed, kind) gives bit-identical episodes") {
  for (ScenarioKind k : world::all_kinds()) {
    CHECK(generate_scenario(3, k) == generate_scenario(3, k));
  }
  CHECK_FALSE(generate_scenario(3, ScenarioKind::LaneFollow) ==
              generate_scenario(4, ScenarioKind::LaneFollow));
}

TEST_CASE("scenario: episode invariants hold for every kind") {
  const SceneDims dims;
  for (ScenarioKind k : world::all_kinds()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ExpertEpisode ep = generate_scenario(seed, k, dims);
      CHECK(ep.kind == k);
      CHECK(ep.context.kind == k);
      REQUIRE(ep.future.size() == dims.horizon);
      for (const Waypoint& w : ep.future) {
        CHECK(std::abs(w.cos * w.cos + w.sin * w.sin - 1.0) < 1e-9);
      }
      CHECK(ep.context.neighbors.shape == ad::Shape{8, 10, kNeighborFeatures});
      CHECK(ep.context.statics.shape == ad::Shape{3, kStaticFeatures});
      CHECK(ep.context.lanes.shape == ad::Shape{12, 10, kLaneFeatures});
      CHECK(ep.context.neighbors.all_finite());
      CHECK(ep.context.lanes.all_finite());
      for (std::size_t i = 0; i < 8; ++i) {
        if (ep.context.neighbor_mask[i] != 0.0) continue;
        for (std::size_t j = 0; j < 10 * kNeighborFeatures; ++j) {
          CHECK(ep.context.neighbors[i * 10 * kNeighborFeatures + j] == 0.0);
        }
      }
      bool route_seen = false;
      for (std::size_t i = 0; i < 12; ++i) {
        if (ep.context.lane_mask[i] == 0.0) continue;
        route_seen = route_seen || ep.context.lane_on_route[i] == 1;
        CHECK(ep.context.lane_speed_limit[i] > 0.0);
      }
      CHECK(route_seen);
      // future[0] is one future step ahead: displacement consistent with speed.
      const double v = ep.context.ego[0];
      CHECK(std::hypot(ep.future[0].x, ep.future[0].y) <= v * 0.5 + 0.5 * 3.0 * 0.25 + 1e-9);
    }
  }
}

TEST_CASE("scenario: the ego frame puts the ego at the origin with zero heading") {
  const world::World w = world::generate_world(5, ScenarioKind::LeftTurn);
  const std::vector<world::VehicleState> now{w.ego_start};
  const Trajectory self = local_trajectory(w.ego_start, now);
  CHECK(self[0].x == 0.0);
  CHECK(self[0].y == 0.0);
  CHECK(self[0].cos == 1.0);
  CHECK(self[0].sin == 0.0);
}

TEST_CASE("scenario: futures respect the bicycle curvature limit") {
  const world::VehicleParams vp;
  const double kappa_max = std::tan(vp.max_steer) / vp.wheelbase;
  for (ScenarioKind k : world::all_kinds()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ExpertEpisode ep = generate_scenario(seed, k);
      Waypoint prev;
      for (const Waypoint& w : ep.future) {
        const double ds = std::hypot(w.x - prev.x, w.y - prev.y);
        if (ds > 0.5) {
          const double dh = std::abs(std::remainder(w.heading() - prev.heading(), 2.0 * M_PI));
          CHECK(dh / ds <= kappa_max);
        }
        prev = w;
      }
    }
  }
}

TEST_CASE("normalize: constant channel maps to zero with std clamped to 1") {
  SceneContext c = generate_scenario(1, ScenarioKind::LaneFollow).context;
  std::vector<SceneContext> set(4, c);
  for (auto& s : set) s.ego[1] = 5.0;
  const NormStats st = compute_stats(std::span<const SceneContext>(set));
  CHECK(st.ego.std[1] == 1.0);
  CHECK(st.ego.mean[1] == 5.0);
  CHECK(normalize(st, set[0]).ego[1] == 0.0);
}

TEST_CASE("normalize: sampled N(3, 2^2) channel has near-zero mean afterwards") {
  const SceneContext base = generate_scenario(1, ScenarioKind::LaneFollow).context;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(3.0, 2.0);
  std::vector<SceneContext> set(2000, base);
  for (auto& s : set) s.ego[2] = n(rng);
  const NormStats st = compute_stats(std::span<const SceneContext>(set));
  double m = 0.0, m2 = 0.0;
  for (const auto& s : set) {
    const double z = normalize(st, s).ego[2];
    m += z;
    m2 += z * z;
  }
  m /= double(set.size());
  CHECK(std::abs(m) < 0.1);
  CHECK(std::abs(std::sqrt(m2 / double(set.size()) - m * m) - 1.0) < 0.1);
}

TEST_CASE("normalize: denormalize inverts and masked entries stay zero") {
  const auto eps = generate_dataset(40, 5, world::default_kind_weights());
  const NormStats st = compute_stats(std::span<const ExpertEpisode>(eps));
  for (const auto& ep : eps) {
    const SceneContext z = normalize(st, ep.context);
    const SceneContext back = denormalize(st, z);
    for (std::size_t i = 0; i < back.lanes.numel(); ++i) {
      CHECK(std::abs(back.lanes[i] - ep.context.lanes[i]) < 1e-9);
    }
    for (std::size_t i = 0; i < back.neighbors.numel(); ++i) {
      CHECK(std::abs(back.neighbors[i] - ep.context.neighbors[i]) < 1e-9);
    }
    for (std::size_t i = 0; i < z.neighbor_mask.size(); ++i) {
      if (z.neighbor_mask[i] != 0.0) continue;
      for (std::size_t j = 0; j < 10 * kNeighborFeatures; ++j) {
        CHECK(z.neighbors[i * 10 * kNeighborFeatures + j] == 0.0);
      }
    }
  }
}

TEST_CASE("normalize: normalized training set has per-channel moments near (0, 1)") {
  const auto eps = generate_dataset(200, 2, world::default_kind_weights());
  const NormStats st = compute_stats(std::span<const ExpertEpisode>(eps));
  std::vector<SceneContext> z;
  for (const auto& ep : eps) z.push_back(normalize(st, ep.context));
  const NormStats after = compute_stats(std::span<const SceneContext>(z));
  for (const ChannelStats* c :
       {&after.neighbors, &after.statics, &after.lanes, &after.ego, &after.speed_limit}) {
    for (std::size_t i = 0; i < c->mean.size(); ++i) {
      CHECK(std::abs(c->mean[i]) < 0.1);
      CHECK(std::abs(c->std[i] - 1.0) < 0.1);
    }
  }
}

TEST_CASE("augment: zero perturbation is the identity") {
  const ExpertEpisode ep = generate_scenario(2, ScenarioKind::LaneChange);
  CHECK(apply_perturbation(ep, {}) == ep);
  std::mt19937_64 rng(1);
  CHECK(augment_ego(ep, rng, {0.0, 0.0, 0.0}) == ep);
}

TEST_CASE("augment: pure rotation rotates lane points by -dtheta") {
  const ExpertEpisode ep = generate_scenario(2, ScenarioKind::LeadFollow);
  const double th = 0.08;
  const ExpertEpisode r = apply_perturbation(ep, {0.0, 0.0, th, 0.0});
  const auto a = valid_lane_points(ep.context);
  const auto b = valid_lane_points(r.context);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i].x == doctest::Approx(std::cos(th) * a[i].x + std::sin(th) * a[i].y).epsilon(1e-12));
    CHECK(b[i].y == doctest::Approx(-std::sin(th) * a[i].x + std::cos(th) * a[i].y).epsilon(1e-12));
  }
}

TEST_CASE("augment: rigid re-expression preserves distances") {
  const ExpertEpisode ep = generate_scenario(4, ScenarioKind::LaneFollow);
  std::mt19937_64 rng(3);
  const AugmentConfig cfg;
  const ExpertEpisode aug = augment_ego(ep, rng, cfg);
  const auto a = valid_lane_points(ep.context);
  const auto b = valid_lane_points(aug.context);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i + 7 < a.size(); i += 7) {
    CHECK(std::abs((a[i] - a[i + 7]).norm() - (b[i] - b[i + 7]).norm()) < 1e-9);
  }
  // Distance from the new ego origin to each lane point equals the distance
  // from the perturbed ego position in the old frame.
  std::mt19937_64 rng2(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = cfg.max_shift * std::sqrt(u(rng2));
  const double phi = 2.0 * M_PI * u(rng2);
  const Vec2 shift{r * std::cos(phi), r * std::sin(phi)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs((a[i] - shift).norm() - b[i].norm()) < 1e-9);
  }
  for (std::size_t h = 0; h < ep.future.size(); ++h) {
    const Vec2 p{ep.future[h].x, ep.future[h].y}, q{aug.future[h].x, aug.future[h].y};
    CHECK(std::abs((p - shift).norm() - q.norm()) < 1e-9);
  }
  CHECK(std::abs(aug.context.ego[0] - ep.context.ego[0]) <= cfg.max_speed + 1e-12);
}

TEST_CASE("dataset: round trip is exact and versioned") {
  Dataset ds;
  ds.episodes = generate_dataset(12, 8, world::default_kind_weights());
  ds.stats = compute_stats(std::span<const ExpertEpisode>(ds.episodes));
  const auto path = (std::filesystem::temp_directory_path() / "fd_test_dataset.bin").string();
  save_dataset(path, ds);
  const Dataset back = load_dataset(path);
  CHECK(back.dims == ds.dims);
  CHECK(back.episodes == ds.episodes);
  REQUIRE(back.stats.has_value());
  CHECK(*back.stats == *ds.stats);
  {
    std::FILE* f = std::fopen(path.c_str(), "r+b");
    std::fseek(f, 4, SEEK_SET);
    const std::uint32_t bad = 99;
    std::fwrite(&bad, sizeof bad, 1, f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_dataset(path), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_dataset(path), Error);
}

TEST_CASE("dataset: generation is deterministic and follows the kind weights") {
  const auto w = world::default_kind_weights();
  const auto a = generate_dataset(300, 17, w);
  CHECK(a == generate_dataset(300, 17, w));
  std::size_t stationary = 0;
  for (const auto& e : a) stationary += e.kind == ScenarioKind::Stationary;
  CHECK(double(stationary) / 300.0 == doctest::Approx(w[0]).epsilon(0.25));
}
