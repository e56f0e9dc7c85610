#include "flowdrive/model.hpp"

#include <algorithm>
#include <cmath>

#include "flowdrive/error.hpp"

namespace flowdrive::model {

namespace {

constexpr std::size_t kLightKinds = 3;
constexpr std::size_t kAgentTypes = 3;

Tensor small_normal(ad::Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.02);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = n(rng);
  return t;
}

// LN(x) * (1 + scale) + shift with per-row [B, 1, d] modulation.
Var modulate(Var x, Var shift, Var scale) {
  Var h = ad::layer_norm(x);
  return ad::add(ad::add(h, ad::mul(h, scale)), shift);
}

// Row chunk i of a [B, k*d] modulation output as [B, 1, d].
Var chunk(Var mod, std::size_t i, std::size_t d) {
  const std::size_t B = mod.shape()[0];
  return ad::reshape(ad::slice(mod, 1, i * d, (i + 1) * d), {B, 1, d});
}

Tensor with_trailing_one(const Tensor& mask) {
  ad::Shape s = mask.shape;
  s.push_back(1);
  return Tensor(s, mask.data);
}

// Flat indices of set mask entries.
std::vector<std::size_t> valid_rows(const Tensor& mask) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask.data[i] != 0.0) rows.push_back(i);
  }
  return rows;
}

Tensor gather_rows(const std::vector<double>& raw, std::size_t width,
                   const std::vector<std::size_t>& rows, ad::Shape inner) {
  ad::Shape s{rows.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  Tensor out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(raw.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return out;
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(v[r]);
  return out;
}

// Places per-valid-slot tokens [G_valid, d] into [B, P, d]; invalid slots are
// copies of an exact zero row.
Var scatter_rows(Tape& tape, Var tokens, const Tensor& mask, std::size_t d) {
  const std::size_t B = mask.shape[0], P = mask.shape[1];
  const std::size_t valid = tokens.shape()[0];
  const Var parts[] = {tokens, tape.constant(Tensor({1, d}, 0.0))};
  std::vector<int> idx(B * P);
  int next = 0;
  for (std::size_t i = 0; i < B * P; ++i) {
    idx[i] = mask.data[i] != 0.0 ? next++ : static_cast<int>(valid);
  }
  return ad::reshape(ad::embedding_lookup(ad::concat(parts, 0), idx), {B, P, d});
}

}  // namespace

Tensor encode_trajectory(const scene::Trajectory& traj, const ModelConfig& cfg) {
  Tensor x({traj.size(), scene::kActionDim});
  double px = 0.0, py = 0.0;
  for (std::size_t h = 0; h < traj.size(); ++h) {
    const scene::Waypoint& w = traj[h];
    double* row = &x.data[h * scene::kActionDim];
    if (cfg.action == ActionSpace::Velocity) {
      row[0] = (w.x - px) / cfg.pos_scale;
      row[1] = (w.y - py) / cfg.pos_scale;
      px = w.x;
      py = w.y;
    } else {
      row[0] = w.x / cfg.pos_scale;
      row[1] = w.y / cfg.pos_scale;
    }
    row[2] = w.cos;
    row[3] = w.sin;
  }
  return x;
}

scene::Trajectory decode_trajectory(const Tensor& x, const ModelConfig& cfg) {
  FD_CHECK(x.rank() == 2 && x.shape[1] == scene::kActionDim,
           "decode_trajectory: expected [H, {}], got {}", scene::kActionDim,
           ad::shape_str(x.shape));
  scene::Trajectory traj(x.shape[0]);
  double px = 0.0, py = 0.0;
  for (std::size_t h = 0; h < traj.size(); ++h) {
    const double* row = &x.data[h * scene::kActionDim];
    scene::Waypoint& w = traj[h];
    if (cfg.action == ActionSpace::Velocity) {
      px += row[0] * cfg.pos_scale;
      py += row[1] * cfg.pos_scale;
      w.x = px;
      w.y = py;
    } else {
      w.x = row[0] * cfg.pos_scale;
      w.y = row[1] * cfg.pos_scale;
    }
    const double n = std::hypot(row[2], row[3]);
    w.cos = n > 1e-12 ? row[2] / n : 1.0;
    w.sin = n > 1e-12 ? row[3] / n : 0.0;
  }
  return traj;
}

ContextBatch make_batch(std::span<const scene::SceneContext* const> contexts) {
  FD_CHECK(!contexts.empty(), "make_batch: no contexts");
  const scene::SceneContext& first = *contexts.front();
  const std::size_t B = contexts.size();
  const std::size_t Pn = first.neighbor_mask.size(), Ps = first.static_mask.size(),
                    Pl = first.lane_mask.size();
  auto stacked = [&](const Tensor& t) {
    ad::Shape s{B};
    s.insert(s.end(), t.shape.begin(), t.shape.end());
    Tensor out(s);
    out.data.clear();
    return out;
  };
  ContextBatch b;
  b.batch = B;
  b.neighbors = stacked(first.neighbors);
  b.statics = stacked(first.statics);
  b.lanes = stacked(first.lanes);
  b.ego = stacked(first.ego);
  b.neighbor_mask = Tensor({B, Pn});
  b.static_mask = Tensor({B, Ps});
  b.lane_mask = Tensor({B, Pl});
  b.lane_speed = Tensor({B * Pl, 1});
  b.neighbor_mask.data.clear();
  b.static_mask.data.clear();
  b.lane_mask.data.clear();
  b.lane_speed.data.clear();
  for (const scene::SceneContext* c : contexts) {
    FD_CHECK(c->neighbors.shape == first.neighbors.shape && c->lanes.shape == first.lanes.shape &&
                 c->statics.shape == first.statics.shape,
             "make_batch: contexts have different dims");
    auto append = [](std::vector<double>& dst, const std::vector<double>& src) {
      dst.insert(dst.end(), src.begin(), src.end());
    };
    append(b.neighbors.data, c->neighbors.data);
    append(b.statics.data, c->statics.data);
    append(b.lanes.data, c->lanes.data);
    append(b.ego.data, c->ego.data);
    append(b.neighbor_mask.data, c->neighbor_mask);
    append(b.static_mask.data, c->static_mask);
    append(b.lane_mask.data, c->lane_mask);
    append(b.lane_speed.data, c->lane_speed_limit);
    b.neighbor_type.insert(b.neighbor_type.end(), c->neighbor_type.begin(), c->neighbor_type.end());
    b.lane_light.insert(b.lane_light.end(), c->lane_light.begin(), c->lane_light.end());
    b.lane_on_route.insert(b.lane_on_route.end(), c->lane_on_route.begin(),
                           c->lane_on_route.end());
  }
  return b;
}

ContextBatch make_batch(std::span<const scene::SceneContext> contexts) {
  std::vector<const scene::SceneContext*> ptrs;
  ptrs.reserve(contexts.size());
  for (const scene::SceneContext& c : contexts) ptrs.push_back(&c);
  return make_batch(std::span<const scene::SceneContext* const>(ptrs));
}

TokenSet repeat(const TokenSet& ts, std::size_t copies) {
  FD_CHECK(copies >= 1 && ts.mask.shape[0] == 1, "repeat: expects a single scene");
  if (copies == 1) return ts;
  const std::vector<Var> parts(copies, ts.tokens);
  TokenSet out;
  out.tokens = ad::concat(parts, 0);
  const std::size_t N = ts.mask.shape[1];
  out.mask = Tensor({copies, N});
  for (std::size_t c = 0; c < copies; ++c) {
    std::copy(ts.mask.data.begin(), ts.mask.data.end(), out.mask.data.begin() + c * N);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder

Encoder Encoder::make(ParamStore& store, const ModelConfig& cfg, const scene::SceneDims& dims,
                      std::mt19937_64& rng) {
  const std::size_t d = cfg.dim;
  std::uint64_t layer = 100;
  Encoder e;
  e.cfg_ = cfg;
  e.dims_ = dims;
  e.neighbor_in_ = nn::Linear::make(store, "enc.neighbor.in", scene::kNeighborFeatures, d, rng);
  e.neighbor_mixer_ =
      nn::MixerBlock::make(store, "enc.neighbor.mixer", dims.history, d, rng, cfg.dropout, layer);
  layer += 2;
  e.neighbor_type_ = store.add("enc.neighbor.type", small_normal({kAgentTypes, d}, rng));
  e.static_mlp_ = nn::Mlp::make(store, "enc.static.mlp", scene::kStaticFeatures, d, d, rng,
                                cfg.dropout, layer++);
  e.lane_in_ = nn::Linear::make(store, "enc.lane.in", scene::kLaneFeatures, d, rng);
  e.lane_mixer_ =
      nn::MixerBlock::make(store, "enc.lane.mixer", dims.lane_points, d, rng, cfg.dropout, layer);
  layer += 2;
  e.light_table_ = store.add("enc.lane.light", small_normal({kLightKinds, d}, rng));
  e.route_table_ = store.add("enc.lane.route", small_normal({2, d}, rng));
  e.speed_mlp_ = nn::Mlp::make(store, "enc.lane.speed", 1, d, d, rng, 0.0, layer++);
  if (cfg.lane_aux == LaneAux::Concat) {
    e.lane_concat_ = nn::Linear::make(store, "enc.lane.concat", 4 * d, d, rng);
  }
  const std::size_t N = dims.neighbors + dims.statics + dims.lanes;
  e.position_ = store.add("enc.position", small_normal({N, d}, rng));
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
    const std::string name = fmt::format("enc.fusion{}", l);
    FusionLayer f;
    f.norm_attn = nn::AffineNorm::make(store, name + ".norm_attn", d);
    f.attn = nn::MultiHeadAttention::make(store, name + ".attn", d, cfg.heads, rng);
    f.norm_mlp = nn::AffineNorm::make(store, name + ".norm_mlp", d);
    f.mlp = nn::Mlp::make(store, name + ".mlp", d, 4 * d, d, rng, cfg.dropout, layer++);
    e.layers_.push_back(f);
  }
  return e;
}

Var Encoder::encode_neighbors(ParamStore& store, Tape& tape, const ContextBatch& b) const {
  const std::size_t B = b.batch, P = dims_.neighbors, T = dims_.history, d = cfg_.dim;
  const std::size_t F = scene::kNeighborFeatures;
  FD_CHECK(b.neighbors.shape == ad::Shape({B, P, T, F}), "encode_neighbors: got {}",
           ad::shape_str(b.neighbors.shape));
  const std::vector<std::size_t> rows = valid_rows(b.neighbor_mask);
  if (rows.empty()) return tape.constant(Tensor({B, P, d}, 0.0));
  Var x = tape.constant(gather_rows(b.neighbors.data, T * F, rows, {T, F}));
  x = neighbor_mixer_(store, neighbor_in_(store, x));
  x = ad::mean_over_axis(x, 1);
  x = ad::add(x, ad::embedding_lookup(store.var(tape, neighbor_type_), pick(b.neighbor_type, rows)));
  return scatter_rows(tape, x, b.neighbor_mask, d);
}

Var Encoder::encode_statics(ParamStore& store, Tape& tape, const ContextBatch& b) const {
  const std::size_t B = b.batch, P = dims_.statics, d = cfg_.dim, F = scene::kStaticFeatures;
  FD_CHECK(b.statics.shape == ad::Shape({B, P, F}), "encode_statics: got {}",
           ad::shape_str(b.statics.shape));
  const std::vector<std::size_t> rows = valid_rows(b.static_mask);
  if (rows.empty()) return tape.constant(Tensor({B, P, d}, 0.0));
  Var x = static_mlp_(store, tape.constant(gather_rows(b.statics.data, F, rows, {F})));
  return scatter_rows(tape, x, b.static_mask, d);
}

Var Encoder::encode_lanes(ParamStore& store, Tape& tape, const ContextBatch& b) const {
  const std::size_t B = b.batch, P = dims_.lanes, V = dims_.lane_points, d = cfg_.dim;
  const std::size_t F = scene::kLaneFeatures;
  FD_CHECK(b.lanes.shape == ad::Shape({B, P, V, F}), "encode_lanes: got {}",
           ad::shape_str(b.lanes.shape));
  const std::vector<std::size_t> rows = valid_rows(b.lane_mask);
  if (rows.empty()) return tape.constant(Tensor({B, P, d}, 0.0));
  Var x = tape.constant(gather_rows(b.lanes.data, V * F, rows, {V, F}));
  x = ad::mean_over_axis(lane_mixer_(store, lane_in_(store, x)), 1);
  Var light = ad::embedding_lookup(store.var(tape, light_table_), pick(b.lane_light, rows));
  Var route = ad::embedding_lookup(store.var(tape, route_table_), pick(b.lane_on_route, rows));
  Var speed = speed_mlp_(store, tape.constant(gather_rows(b.lane_speed.data, 1, rows, {1})));
  if (cfg_.lane_aux == LaneAux::Add) {
    x = ad::add(ad::add(ad::add(x, light), route), speed);
  } else {
    const Var parts[] = {x, light, route, speed};
    x = lane_concat_(store, ad::concat(parts, 1));
  }
  return scatter_rows(tape, x, b.lane_mask, d);
}

TokenSet Encoder::fuse(ParamStore& store, Var tokens, const Tensor& mask) const {
  Tape& tape = *tokens.tape();
  const std::size_t B = mask.shape[0], N = mask.shape[1];
  for (std::size_t b = 0; b < B; ++b) {
    const bool any = std::any_of(mask.data.begin() + b * N, mask.data.begin() + (b + 1) * N,
                                 [](double m) { return m != 0.0; });
    FD_CHECK(any, "fuse: scene {} has no valid context token", b);
  }
  Var x = ad::add(tokens, store.var(tape, position_));
  for (const FusionLayer& f : layers_) {
    Var h = f.norm_attn(store, x);
    x = ad::add(x, f.attn(store, h, h, &mask));
    x = ad::add(x, f.mlp(store, f.norm_mlp(store, x)));
  }
  return {ad::mul(x, tape.constant(with_trailing_one(mask))), mask};
}

TokenSet Encoder::operator()(ParamStore& store, Tape& tape, const ContextBatch& b) const {
  const Var parts[] = {encode_neighbors(store, tape, b), encode_statics(store, tape, b),
                       encode_lanes(store, tape, b)};
  const std::size_t B = b.batch;
  const std::size_t Pn = dims_.neighbors, Ps = dims_.statics, Pl = dims_.lanes;
  Tensor mask({B, Pn + Ps + Pl});
  for (std::size_t i = 0; i < B; ++i) {
    double* row = &mask.data[i * (Pn + Ps + Pl)];
    std::copy_n(b.neighbor_mask.data.begin() + i * Pn, Pn, row);
    std::copy_n(b.static_mask.data.begin() + i * Ps, Ps, row + Pn);
    std::copy_n(b.lane_mask.data.begin() + i * Pl, Pl, row + Pn + Ps);
  }
  return fuse(store, ad::concat(parts, 1), mask);
}

// ---------------------------------------------------------------------------
// Decoder

Decoder Decoder::make(ParamStore& store, const ModelConfig& cfg, const scene::SceneDims& dims,
                      std::mt19937_64& rng) {
  const std::size_t d = cfg.dim;
  std::uint64_t layer = 200;
  Decoder dec;
  dec.cfg_ = cfg;
  dec.dims_ = dims;
  dec.action_mlp_ =
      nn::Mlp::make(store, "dec.action", scene::kActionDim, d, d, rng, 0.0, layer++);
  dec.ego_mlp_ = nn::Mlp::make(store, "dec.ego", scene::kEgoFeatures, d, d, rng, 0.0, layer++);
  dec.position_ = store.add("dec.position", small_normal({dims.horizon, d}, rng));
  dec.time_mlp_ = nn::Mlp::make(store, "dec.time", d, d, d, rng, 0.0, layer++);
  if (cfg.pooled_token && cfg.cond == CondMode::Concat) {
    dec.cond_concat_ = nn::Linear::make(store, "dec.cond_concat", 2 * d, d, rng);
  }
  for (std::size_t l = 0; l < cfg.dit_layers; ++l) {
    const std::string name = fmt::format("dec.block{}", l);
    Block b;
    b.modulation =
        nn::Linear::make(store, name + ".modulation", d, 9 * d, rng, nn::Init::Zero);
    b.self_attn = nn::MultiHeadAttention::make(store, name + ".self_attn", d, cfg.heads, rng);
    b.cross_attn = nn::MultiHeadAttention::make(store, name + ".cross_attn", d, cfg.heads, rng);
    b.mlp = nn::Mlp::make(store, name + ".mlp", d, 4 * d, d, rng, cfg.dropout, layer++);
    dec.blocks_.push_back(b);
  }
  dec.final_modulation_ =
      nn::Linear::make(store, "dec.final.modulation", d, 2 * d, rng, nn::Init::Zero);
  dec.head_ = nn::Linear::make(store, "dec.head", d, scene::kActionDim, rng, nn::Init::Zero);
  return dec;
}

DecoderTokens Decoder::embed_inputs(ParamStore& store, Var x_t, Var t, Var ego,
                                    const TokenSet& context) const {
  Tape& tape = *x_t.tape();
  const std::size_t B = x_t.shape()[0], d = cfg_.dim;
  FD_CHECK(x_t.shape() == ad::Shape({B, dims_.horizon, scene::kActionDim}),
           "embed_inputs: x_t {} for horizon {}", ad::shape_str(x_t.shape()), dims_.horizon);
  FD_CHECK(t.shape() == ad::Shape({B}) && ego.shape() == ad::Shape({B, scene::kEgoFeatures}),
           "embed_inputs: t {} / ego {} for batch {}", ad::shape_str(t.shape()),
           ad::shape_str(ego.shape()), B);
  Var actions = ad::add(action_mlp_(store, x_t), store.var(tape, position_));
  Var ego_token = ad::reshape(ego_mlp_(store, ego), {B, 1, d});
  const Var parts[] = {ego_token, actions};
  Var tokens = ad::concat(parts, 1);

  Var cond = time_mlp_(store, ad::sinusoidal_time_embed(t, d));
  if (cfg_.pooled_token) {
    const std::size_t N = context.mask.shape[1];
    FD_CHECK(context.mask.shape[0] == B, "embed_inputs: context batch {} != {}",
             context.mask.shape[0], B);
    Tensor inv({B, 1});
    for (std::size_t b = 0; b < B; ++b) {
      double count = 0.0;
      for (std::size_t n = 0; n < N; ++n) count += context.mask.data[b * N + n];
      FD_CHECK(count > 0.0, "embed_inputs: scene {} has no valid context token", b);
      inv.data[b] = static_cast<double>(N) / count;
    }
    Var pooled = ad::mul(ad::mean_over_axis(context.tokens, 1), tape.constant(inv));
    if (cfg_.cond == CondMode::Add) {
      cond = ad::add(cond, pooled);
    } else {
      const Var both[] = {cond, pooled};
      cond = cond_concat_(store, ad::concat(both, 1));
    }
  }
  return {tokens, cond};
}

Var Decoder::dit_block(ParamStore& store, std::size_t layer, Var tokens, Var conditioning,
                       const TokenSet& context) const {
  const Block& blk = blocks_.at(layer);
  const std::size_t d = cfg_.dim;
  Var mod = blk.modulation(store, ad::gelu(conditioning));
  Var x = tokens;
  Var h = modulate(x, chunk(mod, 0, d), chunk(mod, 1, d));
  x = ad::add(x, ad::mul(blk.self_attn(store, h, h, nullptr), chunk(mod, 2, d)));
  h = modulate(x, chunk(mod, 3, d), chunk(mod, 4, d));
  x = ad::add(x, ad::mul(blk.cross_attn(store, h, context.tokens, &context.mask), chunk(mod, 5, d)));
  h = modulate(x, chunk(mod, 6, d), chunk(mod, 7, d));
  return ad::add(x, ad::mul(blk.mlp(store, h), chunk(mod, 8, d)));
}

Var Decoder::predict(ParamStore& store, Var x_t, Var t, Var ego, const TokenSet& context) const {
  DecoderTokens in = embed_inputs(store, x_t, t, ego, context);
  Var x = in.tokens;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = dit_block(store, l, x, in.conditioning, context);
  }
  const std::size_t d = cfg_.dim;
  Var mod = final_modulation_(store, ad::gelu(in.conditioning));
  Var out = head_(store, modulate(x, chunk(mod, 0, d), chunk(mod, 1, d)));
  out = ad::slice(out, 1, 1, dims_.horizon + 1);
  if (x_t.tape()->check_finite() && !out.value().all_finite()) {
    double norm = 0.0;
    for (double v : x_t.value().data) norm += v * v;
    throw NonFiniteError(
        fmt::format("predict_velocity: non-finite output (|x_t| = {:.4g})", std::sqrt(norm)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel FlowModel::create(const ModelConfig& cfg, const scene::SceneDims& dims,
                            std::uint64_t seed) {
  FD_CHECK(cfg.dim > 0 && cfg.heads > 0 && cfg.dim % cfg.heads == 0 && cfg.dim % 2 == 0,
           "model: dim {} must be even and divisible by heads {}", cfg.dim, cfg.heads);
  FD_CHECK(cfg.pos_scale > 0.0, "model: pos_scale must be positive");
  std::mt19937_64 rng(seed);
  FlowModel m;
  m.cfg_ = cfg;
  m.dims_ = dims;
  m.encoder_ = Encoder::make(m.params_, cfg, dims, rng);
  m.decoder_ = Decoder::make(m.params_, cfg, dims, rng);
  return m;
}

TokenSet FlowModel::encode(Tape& tape, const ContextBatch& b) { return encoder_(params_, tape, b); }

Var FlowModel::velocity(Tape& tape, const TokenSet& context, Var x_t, std::span<const double> t,
                        const Tensor& ego) {
  Var tv = tape.constant(Tensor({t.size()}, std::vector<double>(t.begin(), t.end())));
  return decoder_.predict(params_, x_t, tv, tape.constant(ego), context);
}

Tensor FlowModel::velocity_value(Tape& tape, const TokenSet& context, const Tensor& x_t, double t,
                                 const Tensor& ego) {
  const std::vector<double> ts(x_t.shape[0], t);
  return velocity(tape, context, tape.constant(x_t), ts, ego).value();
}

}  // namespace flowdrive::model
