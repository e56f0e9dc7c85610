#include "flowdrive/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "flowdrive/error.hpp"
#include "flowdrive/io.hpp"
#include "flowdrive/random.hpp"

namespace flowdrive::scene {

namespace {

constexpr double kSimDt = 0.1;
constexpr char kDatasetMagic[] = "FDDS";
constexpr std::uint32_t kDatasetVersion = 1;

/// Rotates a (cos, sin) or vector pair by -angle in place.
void rotate_back(double& a, double& b, double c, double s) {
  const double x = c * a + s * b;
  const double y = -s * a + c * b;
  a = x;
  b = y;
}

struct Moments {
  std::vector<double> sum, sq;
  std::size_t n = 0;
  explicit Moments(std::size_t ch) : sum(ch, 0.0), sq(ch, 0.0) {}
  void add(const double* row) {
    for (std::size_t c = 0; c < sum.size(); ++c) {
      sum[c] += row[c];
      sq[c] += row[c] * row[c];
    }
    ++n;
  }
  ChannelStats finish() const {
    ChannelStats s;
    s.mean.resize(sum.size());
    s.std.resize(sum.size());
    for (std::size_t c = 0; c < sum.size(); ++c) {
      const double m = n ? sum[c] / double(n) : 0.0;
      const double var = n ? std::max(0.0, sq[c] / double(n) - m * m) : 0.0;
      s.mean[c] = m;
      s.std[c] = std::sqrt(var) < 1e-8 ? 1.0 : std::sqrt(var);
    }
    return s;
  }
};

template <bool Forward>
void affine_rows(const ChannelStats& s, double* row) {
  for (std::size_t c = 0; c < s.mean.size(); ++c) {
    row[c] = Forward ? (row[c] - s.mean[c]) / s.std[c] : row[c] * s.std[c] + s.mean[c];
  }
}

template <bool Forward>
SceneContext transform(const NormStats& st, const SceneContext& in) {
  SceneContext out = in;
  const std::size_t pn = in.neighbor_mask.size();
  const std::size_t tp = pn ? in.neighbors.numel() / (pn * kNeighborFeatures) : 0;
  for (std::size_t i = 0; i < pn; ++i) {
    if (in.neighbor_mask[i] == 0.0) continue;
    for (std::size_t k = 0; k < tp; ++k) {
      affine_rows<Forward>(st.neighbors, &out.neighbors[(i * tp + k) * kNeighborFeatures]);
    }
  }
  for (std::size_t i = 0; i < in.static_mask.size(); ++i) {
    if (in.static_mask[i] != 0.0) affine_rows<Forward>(st.statics, &out.statics[i * kStaticFeatures]);
  }
  const std::size_t pl = in.lane_mask.size();
  const std::size_t v = pl ? in.lanes.numel() / (pl * kLaneFeatures) : 0;
  for (std::size_t i = 0; i < pl; ++i) {
    if (in.lane_mask[i] == 0.0) continue;
    for (std::size_t k = 0; k < v; ++k) {
      affine_rows<Forward>(st.lanes, &out.lanes[(i * v + k) * kLaneFeatures]);
    }
    affine_rows<Forward>(st.speed_limit, &out.lane_speed_limit[i]);
  }
  affine_rows<Forward>(st.ego, out.ego.data.data());
  return out;
}

}  // namespace

double Waypoint::heading() const { return std::atan2(sin, cos); }

Tensor to_tensor(const Trajectory& t) {
  Tensor out({t.size(), kActionDim});
  for (std::size_t h = 0; h < t.size(); ++h) {
    out[h * 4 + 0] = t[h].x;
    out[h * 4 + 1] = t[h].y;
    out[h * 4 + 2] = t[h].cos;
    out[h * 4 + 3] = t[h].sin;
  }
  return out;
}

Trajectory from_tensor(const Tensor& t) {
  FD_CHECK(t.rank() == 2 && t.shape[1] == kActionDim, "trajectory tensor must be [H, 4], got {}",
           ad::shape_str(t.shape));
  Trajectory out(t.shape[0]);
  for (std::size_t h = 0; h < out.size(); ++h) {
    out[h] = {t[h * 4 + 0], t[h * 4 + 1], t[h * 4 + 2], t[h * 4 + 3]};
  }
  return out;
}

std::vector<AgentTrack> scripted_tracks(const world::World& w, double t, const SceneDims& dims) {
  std::vector<AgentTrack> tracks(w.agents.size());
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    tracks[i].history.reserve(dims.history);
    for (std::size_t k = 0; k < dims.history; ++k) {
      const double tk = t - double(dims.history - 1 - k) * dims.history_dt;
      tracks[i].history.push_back(w.agents[i].state_at(tk));
    }
  }
  return tracks;
}

SceneContext featurize(const world::World& w, const world::VehicleState& ego,
                       std::span<const AgentTrack> tracks, double t, const SceneDims& dims) {
  const Pose frame = ego.pose();
  const double c = std::cos(ego.heading), s = std::sin(ego.heading);
  SceneContext ctx;
  ctx.kind = w.kind;

  // Neighbors: nearest valid tracks within range.
  ctx.neighbors = Tensor({dims.neighbors, dims.history, kNeighborFeatures});
  ctx.neighbor_mask.assign(dims.neighbors, 0.0);
  ctx.neighbor_type.assign(dims.neighbors, 0);
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    FD_CHECK(tracks[i].history.size() == dims.history, "track {} has {} steps, expected {}", i,
             tracks[i].history.size(), dims.history);
    const double d = (tracks[i].history.back().pose.pos - ego.pos).norm();
    if (d <= dims.range) order.emplace_back(d, i);
  }
  std::sort(order.begin(), order.end());
  for (std::size_t slot = 0; slot < std::min(order.size(), dims.neighbors); ++slot) {
    const AgentTrack& tr = tracks[order[slot].second];
    ctx.neighbor_mask[slot] = 1.0;
    ctx.neighbor_type[slot] = static_cast<int>(tr.history.back().type);
    for (std::size_t k = 0; k < dims.history; ++k) {
      const world::AgentState& a = tr.history[k];
      double* f = &ctx.neighbors[(slot * dims.history + k) * kNeighborFeatures];
      const Pose lp = to_local(frame, a.pose);
      double vx = a.speed * std::cos(a.pose.heading), vy = a.speed * std::sin(a.pose.heading);
      rotate_back(vx, vy, c, s);
      f[0] = lp.pos.x;
      f[1] = lp.pos.y;
      f[2] = std::cos(lp.heading);
      f[3] = std::sin(lp.heading);
      f[4] = vx;
      f[5] = vy;
      f[6] = a.length;
      f[7] = a.width;
      f[8 + static_cast<std::size_t>(a.type)] = 1.0;
    }
  }

  // Statics: nearest within range.
  ctx.statics = Tensor({dims.statics, kStaticFeatures});
  ctx.static_mask.assign(dims.statics, 0.0);
  order.clear();
  for (std::size_t i = 0; i < w.statics.size(); ++i) {
    const double d = (w.statics[i].pose.pos - ego.pos).norm();
    if (d <= dims.range) order.emplace_back(d, i);
  }
  std::sort(order.begin(), order.end());
  for (std::size_t slot = 0; slot < std::min(order.size(), dims.statics); ++slot) {
    const world::StaticObstacle& o = w.statics[order[slot].second];
    const Pose lp = to_local(frame, o.pose);
    double* f = &ctx.statics[slot * kStaticFeatures];
    ctx.static_mask[slot] = 1.0;
    f[0] = lp.pos.x;
    f[1] = lp.pos.y;
    f[2] = std::cos(lp.heading);
    f[3] = std::sin(lp.heading);
    f[4] = o.length;
    f[5] = o.width;
    f[6 + static_cast<std::size_t>(o.type)] = 1.0;
  }

  // Lanes: fixed-length segments, nearest first, segments entirely behind
  // the ego pushed back by one segment length.
  struct Segment {
    double key;
    std::size_t lane;
    double s0, s1;
  };
  std::vector<Segment> segs;
  for (std::size_t li = 0; li < w.lanes.size(); ++li) {
    const Polyline& line = w.lanes[li].center;
    const double len = line.length();
    for (double s0 = 0.0; s0 < len - 1.0; s0 += dims.lane_segment) {
      const double s1 = std::min(len, s0 + dims.lane_segment);
      const auto pts = line.sample(s0, s1, dims.lane_points);
      double dmin = std::numeric_limits<double>::infinity();
      bool ahead = false;
      for (const Vec2& p : pts) {
        dmin = std::min(dmin, (p - ego.pos).norm());
        ahead = ahead || to_local(frame, p).x > 0.0;
      }
      if (dmin > dims.range) continue;
      segs.push_back({dmin + (ahead ? 0.0 : dims.lane_segment), li, s0, s1});
    }
  }
  std::stable_sort(segs.begin(), segs.end(),
                   [](const Segment& a, const Segment& b) { return a.key < b.key; });
  ctx.lanes = Tensor({dims.lanes, dims.lane_points, kLaneFeatures});
  ctx.lane_mask.assign(dims.lanes, 0.0);
  ctx.lane_light.assign(dims.lanes, 0);
  ctx.lane_on_route.assign(dims.lanes, 0);
  ctx.lane_speed_limit.assign(dims.lanes, 0.0);
  for (std::size_t slot = 0; slot < std::min(segs.size(), dims.lanes); ++slot) {
    const Segment& sg = segs[slot];
    const world::Lane& lane = w.lanes[sg.lane];
    ctx.lane_mask[slot] = 1.0;
    ctx.lane_on_route[slot] = static_cast<int>(sg.lane) == w.route_lane ? 1 : 0;
    ctx.lane_speed_limit[slot] = lane.speed_limit;
    const bool controlled = lane.light.present && sg.s0 < lane.light.stop_s;
    ctx.lane_light[slot] = static_cast<int>(controlled ? lane.light.at(t) : world::Light::None);
    for (std::size_t k = 0; k < dims.lane_points; ++k) {
      const double sk = dims.lane_points == 1
                            ? sg.s0
                            : sg.s0 + (sg.s1 - sg.s0) * double(k) / double(dims.lane_points - 1);
      const Vec2 lp = to_local(frame, lane.center.point_at(sk));
      const double h = wrap_angle(lane.center.heading_at(sk) - ego.heading);
      double* f = &ctx.lanes[(slot * dims.lane_points + k) * kLaneFeatures];
      f[0] = lp.x;
      f[1] = lp.y;
      f[2] = std::cos(h);
      f[3] = std::sin(h);
    }
  }

  ctx.ego = Tensor({kEgoFeatures}, {ego.speed, 0.0, ego.accel, ego.speed * ego.yaw_rate, ego.yaw_rate});
  return ctx;
}

Trajectory local_trajectory(const world::VehicleState& ego,
                            std::span<const world::VehicleState> future) {
  Trajectory out;
  out.reserve(future.size());
  for (const world::VehicleState& st : future) {
    const Pose lp = to_local(ego.pose(), st.pose());
    out.push_back({lp.pos.x, lp.pos.y, std::cos(lp.heading), std::sin(lp.heading)});
  }
  return out;
}

ExpertEpisode generate_scenario(std::uint64_t seed, ScenarioKind kind, const SceneDims& dims) {
  const world::World w = world::generate_world(seed, kind);
  const auto tracks = scripted_tracks(w, 0.0, dims);
  ExpertEpisode ep;
  ep.seed = seed;
  ep.kind = kind;
  ep.context = featurize(w, w.ego_start, tracks, 0.0, dims);
  const auto stride = static_cast<std::size_t>(std::lround(dims.future_dt / kSimDt));
  FD_CHECK(stride >= 1, "future_dt {} below the simulation step", dims.future_dt);
  const auto roll = world::rollout_expert(w, w.ego_start, 0.0, stride * dims.horizon, kSimDt);
  std::vector<world::VehicleState> future;
  future.reserve(dims.horizon);
  for (std::size_t h = 1; h <= dims.horizon; ++h) future.push_back(roll[h * stride]);
  ep.future = local_trajectory(w.ego_start, future);
  return ep;
}

std::vector<ExpertEpisode> generate_dataset(std::size_t count, std::uint64_t seed,
                                            std::span<const double> kind_weights,
                                            const SceneDims& dims) {
  FD_CHECK(kind_weights.size() == world::kNumScenarioKinds, "expected {} kind weights, got {}",
           world::kNumScenarioKinds, kind_weights.size());
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(kind_weights.begin(), kind_weights.end());
  std::vector<ExpertEpisode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const ScenarioKind kind = world::all_kinds()[pick(rng)];
    out.push_back(generate_scenario(splitmix64(seed ^ splitmix64(i)), kind, dims));
  }
  return out;
}

NormStats compute_stats(std::span<const SceneContext> contexts) {
  Moments nb(kNeighborFeatures), st(kStaticFeatures), ln(kLaneFeatures), eg(kEgoFeatures), sl(1);
  for (const SceneContext& c : contexts) {
    const std::size_t pn = c.neighbor_mask.size();
    const std::size_t tp = pn ? c.neighbors.numel() / (pn * kNeighborFeatures) : 0;
    for (std::size_t i = 0; i < pn; ++i) {
      if (c.neighbor_mask[i] == 0.0) continue;
      for (std::size_t k = 0; k < tp; ++k) nb.add(&c.neighbors.data[(i * tp + k) * kNeighborFeatures]);
    }
    for (std::size_t i = 0; i < c.static_mask.size(); ++i) {
      if (c.static_mask[i] != 0.0) st.add(&c.statics.data[i * kStaticFeatures]);
    }
    const std::size_t pl = c.lane_mask.size();
    const std::size_t v = pl ? c.lanes.numel() / (pl * kLaneFeatures) : 0;
    for (std::size_t i = 0; i < pl; ++i) {
      if (c.lane_mask[i] == 0.0) continue;
      for (std::size_t k = 0; k < v; ++k) ln.add(&c.lanes.data[(i * v + k) * kLaneFeatures]);
      sl.add(&c.lane_speed_limit[i]);
    }
    eg.add(c.ego.data.data());
  }
  return {nb.finish(), st.finish(), ln.finish(), eg.finish(), sl.finish()};
}

NormStats compute_stats(std::span<const ExpertEpisode> episodes) {
  std::vector<SceneContext> ctx;
  ctx.reserve(episodes.size());
  for (const auto& e : episodes) ctx.push_back(e.context);
  return compute_stats(std::span<const SceneContext>(ctx));
}

SceneContext normalize(const NormStats& stats, const SceneContext& raw) {
  return transform<true>(stats, raw);
}

SceneContext denormalize(const NormStats& stats, const SceneContext& normalized) {
  return transform<false>(stats, normalized);
}

ExpertEpisode apply_perturbation(const ExpertEpisode& ep, const EgoPerturbation& p) {
  ExpertEpisode out = ep;
  const Pose frame{{p.dx, p.dy}, p.dtheta};
  const double c = std::cos(p.dtheta), s = std::sin(p.dtheta);
  auto move_point = [&](double* f) {
    const Vec2 q = to_local(frame, Vec2{f[0], f[1]});
    f[0] = q.x;
    f[1] = q.y;
  };
  SceneContext& ctx = out.context;
  const std::size_t pn = ctx.neighbor_mask.size();
  const std::size_t tp = pn ? ctx.neighbors.numel() / (pn * kNeighborFeatures) : 0;
  for (std::size_t i = 0; i < pn; ++i) {
    if (ctx.neighbor_mask[i] == 0.0) continue;
    for (std::size_t k = 0; k < tp; ++k) {
      double* f = &ctx.neighbors[(i * tp + k) * kNeighborFeatures];
      move_point(f);
      rotate_back(f[2], f[3], c, s);
      rotate_back(f[4], f[5], c, s);
    }
  }
  for (std::size_t i = 0; i < ctx.static_mask.size(); ++i) {
    if (ctx.static_mask[i] == 0.0) continue;
    double* f = &ctx.statics[i * kStaticFeatures];
    move_point(f);
    rotate_back(f[2], f[3], c, s);
  }
  const std::size_t pl = ctx.lane_mask.size();
  const std::size_t v = pl ? ctx.lanes.numel() / (pl * kLaneFeatures) : 0;
  for (std::size_t i = 0; i < pl; ++i) {
    if (ctx.lane_mask[i] == 0.0) continue;
    for (std::size_t k = 0; k < v; ++k) {
      double* f = &ctx.lanes[(i * v + k) * kLaneFeatures];
      move_point(f);
      rotate_back(f[2], f[3], c, s);
    }
  }
  const double speed = std::max(0.0, ctx.ego[0] + p.dv);
  ctx.ego[0] = speed;
  ctx.ego[3] = speed * ctx.ego[4];
  for (Waypoint& wp : out.future) {
    double f[2] = {wp.x, wp.y};
    move_point(f);
    wp.x = f[0];
    wp.y = f[1];
    rotate_back(wp.cos, wp.sin, c, s);
  }
  return out;
}

ExpertEpisode augment_ego(const ExpertEpisode& ep, std::mt19937_64& rng, const AugmentConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  EgoPerturbation p;
  const double r = cfg.max_shift * std::sqrt(u(rng));
  const double phi = 2.0 * std::numbers::pi * u(rng);
  p.dx = r * std::cos(phi);
  p.dy = r * std::sin(phi);
  p.dtheta = cfg.max_rotation * (2.0 * u(rng) - 1.0);
  p.dv = cfg.max_speed * (2.0 * u(rng) - 1.0);
  return apply_perturbation(ep, p);
}

namespace {

void put_ints(io::Writer& w, const std::vector<int>& v) {
  w.put<std::uint64_t>(v.size());
  for (int x : v) w.put<std::int32_t>(x);
}

std::vector<int> get_ints(io::Reader& r) {
  const auto n = r.get<std::uint64_t>();
  FD_CHECK(n < (1u << 20), "corrupt int array length");
  std::vector<int> v(n);
  for (auto& x : v) x = r.get<std::int32_t>();
  return v;
}

void put_stats(io::Writer& w, const ChannelStats& s) {
  w.put_doubles(s.mean);
  w.put_doubles(s.std);
}

ChannelStats get_stats(io::Reader& r) {
  ChannelStats s;
  s.mean = r.get_doubles();
  s.std = r.get_doubles();
  return s;
}

}  // namespace

void write_stats(io::Writer& w, const NormStats& stats) {
  for (const ChannelStats* s :
       {&stats.neighbors, &stats.statics, &stats.lanes, &stats.ego, &stats.speed_limit}) {
    put_stats(w, *s);
  }
}

NormStats read_stats(io::Reader& r) {
  NormStats s;
  for (ChannelStats* c : {&s.neighbors, &s.statics, &s.lanes, &s.ego, &s.speed_limit}) {
    *c = get_stats(r);
  }
  return s;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  io::Writer w(path, kDatasetMagic, kDatasetVersion);
  const SceneDims& d = ds.dims;
  for (std::size_t v : {d.neighbors, d.history, d.statics, d.lanes, d.lane_points, d.horizon}) {
    w.put<std::uint64_t>(v);
  }
  for (double v : {d.history_dt, d.future_dt, d.lane_segment, d.range}) w.put(v);
  for (std::size_t v : {kNeighborFeatures, kStaticFeatures, kLaneFeatures, kEgoFeatures, kActionDim}) {
    w.put<std::uint64_t>(v);
  }
  w.put<std::uint8_t>(ds.stats ? 1 : 0);
  if (ds.stats) write_stats(w, *ds.stats);
  w.put<std::uint64_t>(ds.episodes.size());
  for (const ExpertEpisode& e : ds.episodes) {
    w.put<std::uint64_t>(e.seed);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.kind));
    const SceneContext& c = e.context;
    w.put_tensor(c.neighbors);
    w.put_tensor(c.statics);
    w.put_tensor(c.lanes);
    w.put_tensor(c.ego);
    w.put_doubles(c.neighbor_mask);
    w.put_doubles(c.static_mask);
    w.put_doubles(c.lane_mask);
    put_ints(w, c.neighbor_type);
    put_ints(w, c.lane_light);
    put_ints(w, c.lane_on_route);
    w.put_doubles(c.lane_speed_limit);
    w.put_tensor(to_tensor(e.future));
  }
  w.finish();
}

Dataset load_dataset(const std::string& path) {
  io::Reader r(path, kDatasetMagic, kDatasetVersion);
  Dataset ds;
  SceneDims& d = ds.dims;
  for (std::size_t* v : {&d.neighbors, &d.history, &d.statics, &d.lanes, &d.lane_points, &d.horizon}) {
    *v = r.get<std::uint64_t>();
  }
  for (double* v : {&d.history_dt, &d.future_dt, &d.lane_segment, &d.range}) *v = r.get<double>();
  for (std::size_t expect : {kNeighborFeatures, kStaticFeatures, kLaneFeatures, kEgoFeatures, kActionDim}) {
    const auto got = r.get<std::uint64_t>();
    FD_CHECK(got == expect, "{}: feature width {} does not match this build ({})", path, got, expect);
  }
  if (r.get<std::uint8_t>()) ds.stats = read_stats(r);
  const auto n = r.get<std::uint64_t>();
  ds.episodes.resize(n);
  for (ExpertEpisode& e : ds.episodes) {
    e.seed = r.get<std::uint64_t>();
    const auto kind = r.get<std::uint8_t>();
    FD_CHECK(kind < world::kNumScenarioKinds, "{}: bad scenario kind {}", path, int(kind));
    e.kind = static_cast<ScenarioKind>(kind);
    SceneContext& c = e.context;
    c.kind = e.kind;
    c.neighbors = r.get_tensor();
    c.statics = r.get_tensor();
    c.lanes = r.get_tensor();
    c.ego = r.get_tensor();
    c.neighbor_mask = r.get_doubles();
    c.static_mask = r.get_doubles();
    c.lane_mask = r.get_doubles();
    c.neighbor_type = get_ints(r);
    c.lane_light = get_ints(r);
    c.lane_on_route = get_ints(r);
    c.lane_speed_limit = r.get_doubles();
    e.future = from_tensor(r.get_tensor());
  }
  return ds;
}

}  // namespace flowdrive::scene
