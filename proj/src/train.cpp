#include "flowdrive/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "flowdrive/error.hpp"
#include "flowdrive/io.hpp"
#include "flowdrive/random.hpp"

namespace flowdrive::train {

namespace {

constexpr std::string_view kMagic = "FDCK";
constexpr std::uint32_t kVersion = 1;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  FD_CHECK(pos == v.size() && !v.empty() && std::isfinite(out), "config: '{}' expects a number, got '{}'",
           key, v);
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  FD_CHECK(res.ec == std::errc() && res.ptr == v.data() + v.size() && !v.empty(),
           "config: '{}' expects a non-negative integer, got '{}'", key, v);
  return static_cast<std::size_t>(out);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(fmt::format("config: '{}' expects true or false, got '{}'", key, v));
}

void check_positive(const std::string& key, double v) {
  FD_CHECK(v > 0.0, "config: '{}' must be positive, got {}", key, v);
}

void put_store(io::Writer& w, const nn::ParamStore& s) {
  w.put<std::uint64_t>(s.size());
  for (const auto& p : s.all()) {
    w.put_string(p.name);
    w.put_tensor(p.value);
  }
}

void get_store_into(io::Reader& r, nn::ParamStore& s, const std::string& path) {
  const auto n = r.get<std::uint64_t>();
  FD_CHECK(n < (1u << 20), "{}: corrupt parameter count", path);
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = r.get_string();
    s.add(std::move(name), r.get_tensor());
  }
}

void copy_weights(nn::ParamStore& dst, const nn::ParamStore& src) {
  FD_CHECK(dst.size() == src.size(), "checkpoint has {} parameters, model expects {}", src.size(),
           dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    FD_CHECK(dst[i].name == src[i].name && dst[i].value.shape == src[i].value.shape,
             "checkpoint parameter '{}' {} does not match model parameter '{}' {}", src[i].name,
             ad::shape_str(src[i].value.shape), dst[i].name, ad::shape_str(dst[i].value.shape));
    dst[i].value = src[i].value;
  }
}

struct Draw {
  model::ContextBatch batch;
  ad::Tensor x, z;
  std::vector<double> t;
};

// One training batch drawn from `episodes` at `indices`.
Draw make_draw(const scene::Dataset& data, const scene::NormStats& stats, std::span<const std::size_t> indices,
               const TrainConfig& cfg, bool augment, std::mt19937_64& rng) {
  const std::size_t H = data.dims.horizon;
  std::vector<scene::SceneContext> ctx;
  ctx.reserve(indices.size());
  Draw d;
  d.x = ad::Tensor({indices.size(), H, scene::kActionDim});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const scene::ExpertEpisode& raw = data.episodes[indices[b]];
    const bool aug = augment && u(rng) < cfg.augment_prob;
    const scene::ExpertEpisode ep = aug ? scene::augment_ego(raw, rng, cfg.augment_cfg) : raw;
    ctx.push_back(scene::normalize(stats, ep.context));
    const ad::Tensor xe = model::encode_trajectory(ep.future, cfg.model);
    std::copy(xe.data.begin(), xe.data.end(), d.x.data.begin() + static_cast<std::ptrdiff_t>(b * xe.numel()));
  }
  d.batch = model::make_batch(std::span<const scene::SceneContext>(ctx));
  d.z = flow::standard_normal(d.x.shape, rng);
  d.t.resize(indices.size());
  for (double& t : d.t) t = flow::sample_time(cfg.flow.sampler, rng, cfg.flow.train_steps);
  return d;
}

}  // namespace

std::string lane_aux_name(model::LaneAux v) { return v == model::LaneAux::Add ? "add" : "concat"; }
std::string cond_mode_name(model::CondMode v) { return v == model::CondMode::Add ? "add" : "concat"; }
std::string action_space_name(model::ActionSpace v) {
  return v == model::ActionSpace::Position ? "position" : "velocity";
}

void set_option(TrainConfig& c, const std::string& key, const std::string& value) {
  const std::string& v = value;
  auto pick = [&](const std::string& a, const std::string& b) {
    FD_CHECK(v == a || v == b, "config: '{}' expects {} or {}, got '{}'", key, a, b, v);
    return v == a;
  };
  if (key == "batch") c.batch = to_size(key, v);
  else if (key == "lr") c.lr = to_double(key, v);
  else if (key == "warmup_epochs") c.warmup_epochs = to_double(key, v);
  else if (key == "epochs") c.epochs = to_size(key, v);
  else if (key == "max_steps") c.max_steps = to_size(key, v);
  else if (key == "weight_decay") c.weight_decay = to_double(key, v);
  else if (key == "beta1") c.beta1 = to_double(key, v);
  else if (key == "beta2") c.beta2 = to_double(key, v);
  else if (key == "adam_eps") c.adam_eps = to_double(key, v);
  else if (key == "ema_power") c.ema_power = to_double(key, v);
  else if (key == "grad_clip") c.grad_clip = to_double(key, v);
  else if (key == "accumulate") c.accumulate = to_size(key, v);
  else if (key == "strategy") c.strategy = balancing::parse_strategy(v);
  else if (key == "balance_eps") c.balance_eps = to_double(key, v);
  else if (key == "augment") c.augment = to_bool(key, v);
  else if (key == "augment_prob") c.augment_prob = to_double(key, v);
  else if (key == "augment_shift") c.augment_cfg.max_shift = to_double(key, v);
  else if (key == "augment_rotation") c.augment_cfg.max_rotation = to_double(key, v);
  else if (key == "augment_speed") c.augment_cfg.max_speed = to_double(key, v);
  else if (key == "flow_train_steps") c.flow.train_steps = to_size(key, v);
  else if (key == "flow_infer_steps") c.flow.infer_steps = to_size(key, v);
  else if (key == "time_sampler") c.flow.sampler = flow::parse_sampler(v);
  else if (key == "snap_inference") c.flow.snap_inference = to_bool(key, v);
  else if (key == "dim") c.model.dim = to_size(key, v);
  else if (key == "heads") c.model.heads = to_size(key, v);
  else if (key == "fusion_layers") c.model.fusion_layers = to_size(key, v);
  else if (key == "dit_layers") c.model.dit_layers = to_size(key, v);
  else if (key == "dropout") c.model.dropout = to_double(key, v);
  else if (key == "lane_aux") c.model.lane_aux = pick("add", "concat") ? model::LaneAux::Add : model::LaneAux::Concat;
  else if (key == "cond") c.model.cond = pick("add", "concat") ? model::CondMode::Add : model::CondMode::Concat;
  else if (key == "pooled_token") c.model.pooled_token = to_bool(key, v);
  else if (key == "action") c.model.action = pick("position", "velocity") ? model::ActionSpace::Position : model::ActionSpace::Velocity;
  else if (key == "pos_scale") c.model.pos_scale = to_double(key, v);
  else if (key == "seed") c.seed = to_size(key, v);
  else if (key == "divergence_factor") c.divergence_factor = to_double(key, v);
  else if (key == "log_every") c.log_every = to_size(key, v);
  else if (key == "val_every") c.val_every = to_size(key, v);
  else throw Error(fmt::format("config: unknown key '{}'", key));

  if (key == "batch" || key == "accumulate" || key == "dim" || key == "heads") {
    FD_CHECK(to_size(key, v) > 0, "config: '{}' must be positive", key);
  }
  if (key == "lr" || key == "pos_scale" || key == "divergence_factor") check_positive(key, to_double(key, v));
  if (key == "ema_power") {
    FD_CHECK(c.ema_power >= 0.0 && c.ema_power < 1.0, "config: ema_power must be in [0, 1)");
  }
  if (key == "dropout") {
    FD_CHECK(c.model.dropout >= 0.0 && c.model.dropout < 1.0, "config: dropout must be in [0, 1)");
  }
  if (key == "weight_decay" || key == "warmup_epochs" || key == "grad_clip" || key == "balance_eps" ||
      key == "augment_prob") {
    FD_CHECK(to_double(key, v) >= 0.0, "config: '{}' must be non-negative", key);
  }
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    FD_CHECK(eq != std::string::npos, "config line {}: expected key = value", lineno);
    const std::string key = trim(line.substr(0, eq));
    FD_CHECK(!key.empty(), "config line {}: empty key", lineno);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

TrainConfig config_from_text(const std::string& text, TrainConfig base) {
  for (const auto& [k, v] : parse_key_values(text)) set_option(base, k, v);
  return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  FD_CHECK(in.is_open(), "cannot open config '{}'", path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str(), std::move(base));
}

std::string config_to_text(const TrainConfig& c) {
  std::string s;
  auto add = [&](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  auto num = [](double v) { return fmt::format("{}", v); };
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  add("batch", std::to_string(c.batch));
  add("lr", num(c.lr));
  add("warmup_epochs", num(c.warmup_epochs));
  add("epochs", std::to_string(c.epochs));
  add("max_steps", std::to_string(c.max_steps));
  add("weight_decay", num(c.weight_decay));
  add("beta1", num(c.beta1));
  add("beta2", num(c.beta2));
  add("adam_eps", num(c.adam_eps));
  add("ema_power", num(c.ema_power));
  add("grad_clip", num(c.grad_clip));
  add("accumulate", std::to_string(c.accumulate));
  add("strategy", balancing::strategy_name(c.strategy));
  add("balance_eps", num(c.balance_eps));
  add("augment", flag(c.augment));
  add("augment_prob", num(c.augment_prob));
  add("augment_shift", num(c.augment_cfg.max_shift));
  add("augment_rotation", num(c.augment_cfg.max_rotation));
  add("augment_speed", num(c.augment_cfg.max_speed));
  add("flow_train_steps", std::to_string(c.flow.train_steps));
  add("flow_infer_steps", std::to_string(c.flow.infer_steps));
  add("time_sampler", flow::sampler_name(c.flow.sampler));
  add("snap_inference", flag(c.flow.snap_inference));
  add("dim", std::to_string(c.model.dim));
  add("heads", std::to_string(c.model.heads));
  add("fusion_layers", std::to_string(c.model.fusion_layers));
  add("dit_layers", std::to_string(c.model.dit_layers));
  add("dropout", num(c.model.dropout));
  add("lane_aux", lane_aux_name(c.model.lane_aux));
  add("cond", cond_mode_name(c.model.cond));
  add("pooled_token", flag(c.model.pooled_token));
  add("action", action_space_name(c.model.action));
  add("pos_scale", num(c.model.pos_scale));
  add("seed", std::to_string(c.seed));
  add("divergence_factor", num(c.divergence_factor));
  add("log_every", std::to_string(c.log_every));
  add("val_every", std::to_string(c.val_every));
  return s;
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps + 1) return peak;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - 1 - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

void adamw_step(nn::ParamStore& params, AdamState& st, double lr, const TrainConfig& cfg) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (const auto& p : params.all()) {
      st.m.emplace_back(p.value.shape, 0.0);
      st.v.emplace_back(p.value.shape, 0.0);
    }
    st.t = 0;
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const bool has_grad = p.grad.numel() == p.value.numel();
    double* m = st.m[i].data.data();
    double* v = st.v[i].data.data();
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      const double g = has_grad ? p.grad.data[k] : 0.0;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.adam_eps);
      p.value.data[k] -= lr * (update + cfg.weight_decay * p.value.data[k]);
    }
  }
}

void ema_update(nn::ParamStore& ema, const nn::ParamStore& raw, double power) {
  FD_CHECK(ema.size() == raw.size(), "ema_update: {} vs {} parameters", ema.size(), raw.size());
  FD_CHECK(power >= 0.0 && power < 1.0, "ema_update: power {} outside [0, 1)", power);
  for (std::size_t i = 0; i < ema.size(); ++i) {
    auto& e = ema[i].value;
    const auto& r = raw[i].value;
    FD_CHECK(e.shape == r.shape, "ema_update: shape mismatch for '{}'", raw[i].name);
    for (std::size_t k = 0; k < e.numel(); ++k) e.data[k] = power * e.data[k] + (1.0 - power) * r.data[k];
  }
}

double clip_grad_norm(nn::ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) {
    for (double g : p.grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params.all()) {
      for (double& g : p.grad.data) g *= s;
    }
  }
  return norm;
}

void Checkpoint::save(const std::string& path) const {
  io::Writer w(path, kMagic, kVersion);
  w.put_string(config_to_text(config));
  for (std::size_t v : {dims.neighbors, dims.history, dims.statics, dims.lanes, dims.lane_points, dims.horizon}) {
    w.put<std::uint64_t>(v);
  }
  for (double v : {dims.history_dt, dims.future_dt, dims.lane_segment, dims.range}) w.put(v);
  put_store(w, params);
  put_store(w, ema);
  w.put<std::uint64_t>(adam.t);
  w.put<std::uint64_t>(adam.m.size());
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    w.put_tensor(adam.m[i]);
    w.put_tensor(adam.v[i]);
  }
  w.put<std::uint64_t>(step);
  w.put<std::uint64_t>(epoch);
  w.put<std::uint64_t>(selected_step);
  w.put(selected_score);
  scene::write_stats(w, stats);
  w.put_string(cluster_path);
  w.finish();
}

Checkpoint Checkpoint::load(const std::string& path) {
  io::Reader r(path, kMagic, kVersion);
  Checkpoint c;
  c.config = config_from_text(r.get_string());
  auto& d = c.dims;
  for (std::size_t* v : {&d.neighbors, &d.history, &d.statics, &d.lanes, &d.lane_points, &d.horizon}) {
    *v = r.get<std::uint64_t>();
  }
  for (double* v : {&d.history_dt, &d.future_dt, &d.lane_segment, &d.range}) *v = r.get<double>();
  get_store_into(r, c.params, path);
  get_store_into(r, c.ema, path);
  c.adam.t = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  FD_CHECK(n == 0 || n == c.params.size(), "{}: optimizer state has {} slots for {} parameters", path,
           n, c.params.size());
  for (std::size_t i = 0; i < n; ++i) {
    c.adam.m.push_back(r.get_tensor());
    c.adam.v.push_back(r.get_tensor());
  }
  c.step = r.get<std::uint64_t>();
  c.epoch = r.get<std::uint64_t>();
  c.selected_step = r.get<std::uint64_t>();
  c.selected_score = r.get<double>();
  c.stats = scene::read_stats(r);
  c.cluster_path = r.get_string();
  FD_CHECK(r.at_end(), "{}: trailing bytes", path);
  return c;
}

model::FlowModel Checkpoint::model(bool use_ema) const {
  model::FlowModel m = model::FlowModel::create(config.model, dims, 0);
  copy_weights(m.params(), use_ema ? ema : params);
  return m;
}

TrainResult train(const TrainConfig& cfg, const scene::Dataset& data,
                  const balancing::ClusterModel* clusters, const Validator& validate,
                  const ProgressFn& progress) {
  FD_CHECK(!data.episodes.empty(), "train: empty dataset");
  FD_CHECK(cfg.batch > 0 && cfg.accumulate > 0, "train: batch and accumulate must be positive");
  FD_CHECK(cfg.strategy != balancing::Strategy::Cluster || clusters != nullptr,
           "train: cluster balancing needs a cluster model (run fit-clusters first)");
  flow::validate(cfg.flow);
  const scene::NormStats stats =
      data.stats ? *data.stats : scene::compute_stats(std::span<const scene::ExpertEpisode>(data.episodes));
  const auto weights = balancing::strategy_weights(cfg.strategy, data.episodes, clusters, cfg.balance_eps);

  const std::size_t per_step = cfg.batch * cfg.accumulate;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, (data.episodes.size() + per_step - 1) / per_step);
  const std::size_t total = cfg.max_steps ? cfg.max_steps : cfg.epochs * steps_per_epoch;
  FD_CHECK(total > 0, "train: zero steps requested");
  const auto warmup = std::min<std::size_t>(
      total, static_cast<std::size_t>(std::lround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch))));

  TrainResult res;
  Checkpoint& ck = res.checkpoint;
  ck.config = cfg;
  ck.dims = data.dims;
  ck.stats = stats;
  model::FlowModel m = model::FlowModel::create(cfg.model, data.dims, splitmix64(cfg.seed ^ 0x5eed));
  nn::ParamStore ema = m.params();
  std::optional<nn::ParamStore> best_ema;
  double best_score = -std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xda7a));
  double initial = -1.0;

  for (std::size_t step = 0; step < total; ++step) {
    m.params().zero_grad();
    double loss_sum = 0.0;
    for (std::size_t a = 0; a < cfg.accumulate; ++a) {
      const auto idx = balancing::weighted_sample(weights.weights, rng, cfg.batch);
      const Draw d = make_draw(data, stats, idx, cfg, cfg.augment, rng);
      ad::Tape tape;
      tape.set_training(true);
      tape.set_step(step * cfg.accumulate + a);
      double lv = 0.0;
      try {
        const model::TokenSet ctx = m.encode(tape, d.batch);
        const ad::Tensor xt = flow::rf_path(d.z, d.x, std::span<const double>(d.t));
        ad::Var v = m.velocity(tape, ctx, tape.constant(xt), d.t, d.batch.ego);
        ad::Var loss = flow::rf_loss(v, flow::target_velocity(d.z, d.x));
        lv = loss.value().data[0];
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(fmt::format("training diverged at step {} (lr {:.3g}): {}", step,
                                          lr_at(step, total, warmup, cfg.lr), e.what()));
      }
      loss_sum += lv;
    }
    const double loss = loss_sum / static_cast<double>(cfg.accumulate);
    if (cfg.accumulate > 1) {
      for (auto& p : m.params().all()) {
        for (double& g : p.grad.data) g /= static_cast<double>(cfg.accumulate);
      }
    }
    if (initial < 0.0) initial = loss;
    if (!std::isfinite(loss) || loss > cfg.divergence_factor * initial) {
      throw DivergenceError(fmt::format(
          "training diverged at step {}: loss {:.6g} exceeds {}x the initial loss {:.6g} (lr {:.3g})",
          step, loss, cfg.divergence_factor, initial, lr_at(step, total, warmup, cfg.lr)));
    }
    const double gnorm = clip_grad_norm(m.params(), cfg.grad_clip);
    const double lr = lr_at(step, total, warmup, cfg.lr);
    adamw_step(m.params(), ck.adam, lr, cfg);
    ema_update(ema, m.params(), cfg.ema_power);

    const std::size_t epoch = step / steps_per_epoch;
    const LossRecord rec{step, epoch, loss, lr, gnorm};
    if (cfg.log_every == 0 || step % cfg.log_every == 0 || step + 1 == total) {
      res.log.push_back(rec);
      if (progress) progress(rec);
    }
    const bool epoch_end = (step + 1) % steps_per_epoch == 0 || step + 1 == total;
    if (validate && cfg.val_every > 0 && epoch_end && ((epoch + 1) % cfg.val_every == 0 || step + 1 == total)) {
      model::FlowModel em = m;
      copy_weights(em.params(), ema);
      const double score = validate(em, stats);
      if (score > best_score) {
        best_score = score;
        best_ema = ema;
        ck.selected_step = step + 1;
        ck.selected_score = score;
      }
    }
  }
  ck.params = m.params();
  for (auto& p : ck.params.all()) p.grad = ad::Tensor();
  ck.ema = best_ema ? std::move(*best_ema) : std::move(ema);
  for (auto& p : ck.ema.all()) p.grad = ad::Tensor();
  ck.step = total;
  ck.epoch = (total + steps_per_epoch - 1) / steps_per_epoch;
  if (!best_ema) ck.selected_step = total;
  return res;
}

namespace {

template <typename Fn>
double over_draws(const scene::Dataset& data, const model::ModelConfig& mcfg, const flow::FlowConfig& flow,
                  std::uint64_t seed, std::size_t draws, Fn&& fn) {
  FD_CHECK(!data.episodes.empty() && draws > 0, "dataset loss: nothing to evaluate");
  constexpr std::size_t kChunk = 64;
  double sum = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> jobs;
  for (std::size_t i = 0; i < data.episodes.size(); ++i) {
    for (std::size_t d = 0; d < draws; ++d) jobs.push_back(i);
  }
  for (std::size_t start = 0; start < jobs.size(); start += kChunk) {
    const std::size_t end = std::min(jobs.size(), start + kChunk);
    Draw d;
    const std::size_t H = data.dims.horizon;
    d.x = ad::Tensor({end - start, H, scene::kActionDim});
    d.z = ad::Tensor(d.x.shape);
    d.t.resize(end - start);
    std::vector<std::size_t> idx;
    for (std::size_t j = start; j < end; ++j) {
      const std::size_t b = j - start;
      idx.push_back(jobs[j]);
      std::mt19937_64 rng(splitmix64(seed ^ splitmix64(j)));
      const ad::Tensor xe = model::encode_trajectory(data.episodes[jobs[j]].future, mcfg);
      const ad::Tensor z = flow::standard_normal(xe.shape, rng);
      std::copy(xe.data.begin(), xe.data.end(), d.x.data.begin() + static_cast<std::ptrdiff_t>(b * xe.numel()));
      std::copy(z.data.begin(), z.data.end(), d.z.data.begin() + static_cast<std::ptrdiff_t>(b * xe.numel()));
      d.t[b] = flow::sample_time(flow::TimeSampler::Uniform, rng, flow.train_steps);
    }
    sum += fn(d, idx) * static_cast<double>(end - start);
    count += end - start;
  }
  return sum / static_cast<double>(count);
}

}  // namespace

double dataset_loss(model::FlowModel& m, const scene::Dataset& data, const scene::NormStats& stats,
                    const flow::FlowConfig& flow, std::uint64_t seed, std::size_t draws) {
  return over_draws(data, m.config(), flow, seed, draws, [&](Draw& d, const std::vector<std::size_t>& idx) {
    std::vector<scene::SceneContext> ctx;
    for (std::size_t i : idx) ctx.push_back(scene::normalize(stats, data.episodes[i].context));
    d.batch = model::make_batch(std::span<const scene::SceneContext>(ctx));
    ad::Tape tape(false);
    const model::TokenSet tok = m.encode(tape, d.batch);
    const ad::Tensor xt = flow::rf_path(d.z, d.x, std::span<const double>(d.t));
    ad::Var v = m.velocity(tape, tok, tape.constant(xt), d.t, d.batch.ego);
    return flow::rf_loss(v, flow::target_velocity(d.z, d.x)).value().data[0];
  });
}

double zero_field_loss(const scene::Dataset& data, const model::ModelConfig& mcfg,
                       const flow::FlowConfig& flow, std::uint64_t seed, std::size_t draws) {
  return over_draws(data, mcfg, flow, seed, draws, [](Draw& d, const std::vector<std::size_t>&) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.x.numel(); ++i) s += (d.x.data[i] - d.z.data[i]) * (d.x.data[i] - d.z.data[i]);
    return s / static_cast<double>(d.x.numel());
  });
}

std::string loss_log_csv(const std::vector<LossRecord>& log) {
  std::string s = "step,epoch,loss,lr,grad_norm\n";
  for (const auto& r : log) {
    s += fmt::format("{},{},{:.8g},{:.6g},{:.6g}\n", r.step, r.epoch, r.loss, r.lr, r.grad_norm);
  }
  return s;
}

}  // namespace flowdrive::train
