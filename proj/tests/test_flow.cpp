#include <cmath>
#include <numbers>
#include <limits>
#include <random>

#include "doctest.h"
#include "flowdrive/error.hpp"
#include "flowdrive/flow.hpp"
#include "flowdrive/guidance.hpp"

using namespace flowdrive;
using namespace flowdrive::flow;
using ad::Tensor;

namespace {

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t = standard_normal(shape, rng);
  for (double& v : t.data) v *= sd;
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("rf_path: endpoints and midpoint") {
  std::mt19937_64 rng(1);
  const Tensor z = random_tensor({3, 4}, rng), x = random_tensor({3, 4}, rng);
  CHECK(rf_path(z, x, 0.0) == z);
  CHECK(rf_path(z, x, 1.0) == x);
  const Tensor mid = rf_path(Tensor({2}, 0.0), Tensor({2}, {2.0, 4.0}), 0.5);
  CHECK(mid == Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(rf_path(z, Tensor({4, 3}), 0.5), Error);
}

TEST_CASE("target_velocity: difference of endpoints, consistent with the path") {
  std::mt19937_64 rng(2);
  const Tensor z = random_tensor({16, 4}, rng), x = random_tensor({16, 4}, rng);
  CHECK(max_abs_diff(target_velocity(z, z), Tensor({16, 4}, 0.0)) == 0.0);
  CHECK(target_velocity(Tensor({2}, 0.0), Tensor({2}, {3.0, -1.0})) == Tensor({2}, {3.0, -1.0}));
  const Tensor v = target_velocity(z, x);
  std::uniform_real_distribution<double> u(0.0, 0.9);
  for (int k = 0; k < 50; ++k) {
    const double t = u(rng), dt = 0.1 * u(rng);
    const Tensor a = rf_path(z, x, t), b = rf_path(z, x, t + dt);
    for (std::size_t i = 0; i < v.numel(); ++i) {
      CHECK(b.data[i] - a.data[i] == doctest::Approx(dt * v.data[i]).epsilon(1e-9).scale(1.0));
      // Path consistency: z + t v, computed independently.
      CHECK(a.data[i] == z.data[i] + t * v.data[i]);
    }
  }
}

TEST_CASE("rf_path: batched times act per row") {
  std::mt19937_64 rng(3);
  const Tensor z = random_tensor({3, 2, 4}, rng), x = random_tensor({3, 2, 4}, rng);
  const std::vector<double> ts{0.0, 0.25, 1.0};
  const Tensor p = rf_path(z, x, std::span<const double>(ts));
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 8; ++i) {
      const double expect = ts[b] == 1.0 ? x.data[b * 8 + i]
                                         : z.data[b * 8 + i] + ts[b] * (x.data[b * 8 + i] - z.data[b * 8 + i]);
      CHECK(p.data[b * 8 + i] == expect);
    }
  }
}

TEST_CASE("sample_time: uniform and logit-normal draws on the training grid") {
  std::mt19937_64 rng(4);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = sample_time(TimeSampler::Uniform, rng, 2000);
    REQUIRE(t >= 0.0);
    REQUIRE(t <= 1.0);
    REQUIRE(std::abs(t * 2000.0 - std::round(t * 2000.0)) < 1e-9);
    sum += t;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.01);
  int mid = 0, low = 0;
  for (int i = 0; i < n; ++i) {
    const double t = sample_time(TimeSampler::LogNormal, rng, 2000);
    REQUIRE(t >= 0.0);
    REQUIRE(t <= 1.0);
    REQUIRE(std::abs(t * 2000.0 - std::round(t * 2000.0)) < 1e-9);
    if (t > 0.4 && t < 0.6) ++mid;
    if (t > 0.0 && t < 0.2) ++low;
  }
  // Densities per unit of t: both windows have width 0.2.
  CHECK(mid > low);
  CHECK(parse_sampler("lognorm") == TimeSampler::LogNormal);
  CHECK_THROWS_AS(parse_sampler("beta"), Error);
}

TEST_CASE("flow time grid: index reproduces time and inference snaps") {
  for (std::size_t i = 0; i <= 2000; i += 7) {
    const double t = static_cast<double>(i) / 2000.0;
    CHECK(std::abs(snap_time(t, 2000) * 2000.0 - static_cast<double>(i)) < 1e-12);
  }
  FlowConfig cfg;
  cfg.infer_steps = 8;
  const auto ts = inference_times(cfg);
  REQUIRE(ts.size() == 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(ts[k] == static_cast<double>(k) / 8.0);
  cfg.infer_steps = 3;
  const auto snapped = inference_times(cfg);
  CHECK(snapped[1] == std::round(2000.0 / 3.0) / 2000.0);
  cfg.snap_inference = false;
  CHECK(inference_times(cfg)[1] == 1.0 / 3.0);
  cfg.infer_steps = 0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg.infer_steps = 4000;
  CHECK_THROWS_AS(validate(cfg), Error);
}

TEST_CASE("rf_loss: perfect field, zero field and gradient") {
  std::mt19937_64 rng(5);
  const Tensor z = random_tensor({4, 16, 4}, rng), x = random_tensor({4, 16, 4}, rng);
  const Tensor target = target_velocity(z, x);
  {
    ad::Tape tape;
    CHECK(rf_loss(tape.constant(target), target).value()[0] == 0.0);
  }
  {
    ad::Tape tape;
    double expect = 0.0;
    for (double v : target.data) expect += v * v;
    expect /= static_cast<double>(target.numel());
    CHECK(rf_loss(tape.constant(Tensor(target.shape, 0.0)), target).value()[0] ==
          doctest::Approx(expect).epsilon(1e-12));
  }
  const Tensor point = random_tensor(target.shape, rng);
  const double err = ad::grad_check([&](ad::Tape&, ad::Var p) { return rf_loss(p, target); },
                                    point, 1e-4);
  CHECK(err < 1e-4);
  ad::Tape tape;
  Tensor bad = target;
  bad.data[0] = std::nan("");
  tape.set_check_finite(false);
  CHECK_THROWS_AS(rf_loss(tape.constant(bad), target), NonFiniteError);
}

TEST_CASE("integrate: constant oracle field is exact for any step count") {
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor({5, 16, 4}, rng), x = random_tensor({5, 16, 4}, rng, 3.0);
  const Tensor v = target_velocity(z, x);
  for (std::size_t steps : {1, 2, 8, 64}) {
    FlowConfig cfg;
    cfg.infer_steps = steps;
    const Tensor out = integrate([&](const Tensor&, double) { return v; }, z, cfg);
    CHECK(max_abs_diff(out, x) < 1e-13);
    if (steps == 1) CHECK(out == [&] {
      Tensor e = z;
      for (std::size_t i = 0; i < e.numel(); ++i) e.data[i] += v.data[i];
      return e;
    }());
  }
}

TEST_CASE("integrate: zero field returns z and the hook sees every grid time") {
  std::mt19937_64 rng(7);
  const Tensor z = random_tensor({2, 16, 4}, rng);
  for (std::size_t steps : {1, 5, 8}) {
    FlowConfig cfg;
    cfg.infer_steps = steps;
    std::vector<double> seen;
    const Tensor out = integrate([&](const Tensor& s, double) { return Tensor(s.shape, 0.0); }, z,
                                 cfg, [&](Tensor&, double t) { seen.push_back(t); });
    CHECK(out == z);
    REQUIRE(seen.size() == steps + 1);
    CHECK(seen.front() == 0.0);
    CHECK(seen.back() == 1.0);
  }
  FlowConfig cfg;
  const auto blowup = [](const Tensor& s, double) {
    return Tensor(s.shape, std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(integrate(blowup, z, cfg), NonFiniteError);
}

TEST_CASE("guidance: tangent and normal frame") {
  auto f = guidance::tangent_normal(0.0);
  CHECK(f.tangent == Vec2{1.0, 0.0});
  CHECK(f.normal.x == 0.0);
  CHECK(f.normal.y == 1.0);
  f = guidance::tangent_normal(std::numbers::pi / 2.0);
  CHECK(f.tangent.x == doctest::Approx(0.0).scale(1.0));
  CHECK(f.tangent.y == doctest::Approx(1.0));
  CHECK(f.normal.x == doctest::Approx(-1.0));
  CHECK(f.normal.y == doctest::Approx(0.0).scale(1.0));
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int i = 0; i < 100; ++i) {
    const auto g = guidance::tangent_normal(u(rng));
    CHECK(g.tangent.norm() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(g.normal.norm() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(g.tangent.dot(g.normal)) < 1e-15);
    CHECK(g.tangent.cross(g.normal) == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("guidance: schedules and the moderated update arithmetic") {
  CHECK(guidance::beta(4, 4) == 1.0);
  for (std::size_t h = 1; h < 16; ++h) CHECK(guidance::beta(h, 16) < guidance::beta(h + 1, 16));
  const std::vector<double> times{0.5};
  CHECK(guidance::alpha(0.5, times) == 1.0);
  CHECK(guidance::alpha(0.375, times) == 0.0);

  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({4, 4}, rng);
  guidance::GuidanceSpec spec{{0.5}, 1.0, 0.0, 0.0};
  CHECK(guidance::moderated_update(x, 0.25, spec) == x);
  const Tensor y = guidance::moderated_update(x, 0.5, spec);
  const double expect[] = {0.25, 0.5, 0.75, 1.0};
  for (std::size_t h = 0; h < 4; ++h) {
    CHECK(y.data[h * 4 + 0] - x.data[h * 4 + 0] == 0.0);
    CHECK(y.data[h * 4 + 1] == x.data[h * 4 + 1] + expect[h]);
    CHECK(y.data[h * 4 + 2] == x.data[h * 4 + 2]);
    CHECK(y.data[h * 4 + 3] == x.data[h * 4 + 3]);
  }
  // Scaled positions: one meter is 1 / pos_scale flow units.
  const Tensor s = guidance::moderated_update(Tensor({4, 4}, 0.0), 0.5, spec, 20.0);
  CHECK(s.data[3 * 4 + 1] == doctest::Approx(0.05));
  // Undoing the offset recovers the state to rounding.
  guidance::GuidanceSpec neg = spec;
  neg.lat = -1.0;
  const Tensor back = guidance::moderated_update(y, 0.5, neg);
  CHECK(max_abs_diff(back, x) < 1e-15);
  // Tangent offsets follow the reference heading.
  guidance::GuidanceSpec lon{{0.5}, 0.0, 2.0, std::numbers::pi / 2.0};
  const Tensor l = guidance::moderated_update(Tensor({4, 4}, 0.0), 0.5, lon);
  CHECK(l.data[3 * 4 + 0] == doctest::Approx(0.0).scale(1.0));
  CHECK(l.data[3 * 4 + 1] == doctest::Approx(2.0));
}

TEST_CASE("guidance: displacement actions receive the cumulative offset increments") {
  std::mt19937_64 rng(10);
  const Tensor pos = random_tensor({2, 8, 4}, rng);
  Tensor deltas = pos;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t h = 7; h >= 1; --h) {
      for (std::size_t c = 0; c < 2; ++c) {
        deltas.data[(b * 8 + h) * 4 + c] -= pos.data[(b * 8 + h - 1) * 4 + c];
      }
    }
  }
  const guidance::GuidanceSpec spec{{0.5}, 0.7, -0.3, 0.4};
  const Tensor p2 = guidance::moderated_update(pos, 0.5, spec);
  Tensor d2 = guidance::moderated_update(deltas, 0.5, spec, 1.0, true);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t h = 1; h < 8; ++h) {
      for (std::size_t c = 0; c < 2; ++c) {
        d2.data[(b * 8 + h) * 4 + c] += d2.data[(b * 8 + h - 1) * 4 + c];
      }
    }
  }
  CHECK(max_abs_diff(p2, d2) < 1e-12);
}

TEST_CASE("guidance: candidate grid enumerates the offset product") {
  const std::vector<double> lat{-0.5, 0.0, 0.5}, lon{0.0}, times{0.5};
  const auto specs = guidance::candidate_grid(lat, lon, times);
  REQUIRE(specs.size() == 3);
  CHECK(specs[0].lat == -0.5);
  CHECK(specs[2].lat == 0.5);
  CHECK(specs[1].times == times);
  const auto thirty = guidance::linspace(-1.0, 1.0, 30);
  CHECK(guidance::candidate_grid(thirty, lon, times).size() == 30);
  CHECK(thirty.front() == -1.0);
  CHECK(thirty.back() == 1.0);
  CHECK_THROWS_AS(guidance::candidate_grid(lat, std::vector<double>{}, times), Error);
  CHECK_THROWS_AS(guidance::candidate_grid(std::vector<double>{}, lon, times), Error);
}

TEST_CASE("guidance: zero offsets leave a guided integration bit-identical") {
  std::mt19937_64 rng(11);
  const Tensor z = random_tensor({3, 16, 4}, rng);
  const Tensor w = random_tensor({16, 4}, rng);
  // A nonlinear field so any perturbation would propagate.
  const VelocityFn field = [&](const Tensor& x, double t) {
    Tensor v(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) v.data[i] = std::sin(x.data[i] * w.data[i % 64]) + t;
    return v;
  };
  FlowConfig cfg;
  const Tensor plain = integrate(field, z, cfg);
  const guidance::GuidanceSpec zero{{0.0, 0.5, 1.0}, 0.0, 0.0, 0.3};
  const Tensor guided = integrate(field, z, cfg, [&](Tensor& x, double t) {
    x = guidance::moderated_update(x, t, zero, 20.0);
  });
  CHECK(guided == plain);
  const guidance::GuidanceSpec one{{0.5}, 1.0, 0.0, 0.0};
  const Tensor moved = integrate(field, z, cfg, [&](Tensor& x, double t) {
    x = guidance::moderated_update(x, t, one, 20.0);
  });
  CHECK_FALSE(moved == plain);
}
