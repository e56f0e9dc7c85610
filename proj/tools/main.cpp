// flowdrive: data generation, clustering, training, closed-loop evaluation,
// guided sampling and plotting.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <algorithm>
#include <map>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "flowdrive/balancing.hpp"
#include "flowdrive/error.hpp"
#include "flowdrive/guidance.hpp"
#include "flowdrive/random.hpp"
#include "flowdrive/scene.hpp"
#include "flowdrive/sim.hpp"
#include "flowdrive/train.hpp"
#include "plot.hpp"

using namespace flowdrive;

namespace {

// Output artifacts
void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  FD_CHECK(f.good(), "cannot write '{}'", path);
  f << text;
  FD_CHECK(f.good(), "write to '{}' failed", path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  FD_CHECK(f.good(), "cannot read '{}'", path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void require_file(const std::string& path, const std::string& what) {
  FD_CHECK(std::filesystem::exists(path), "{} '{}' not found", what, path);
}

std::string versioned(const std::string& artifact, const std::string& csv) {
  return fmt::format("# flowdrive-{} v1\n{}", artifact, csv);
}

std::vector<world::ScenarioKind> parse_suite(const std::vector<std::string>& names) {
  std::vector<world::ScenarioKind> kinds;
  for (const std::string& n : names) {
    if (n == "all") {
      const auto& all = world::all_kinds();
      kinds.insert(kinds.end(), all.begin(), all.end());
    } else {
      kinds.push_back(world::parse_kind(n));
    }
  }
  FD_CHECK(!kinds.empty(), "empty scenario suite");
  return kinds;
}

std::vector<sim::Mode> parse_modes(const std::vector<std::string>& names) {
  std::vector<sim::Mode> modes;
  for (const std::string& n : names) {
    if (n == "both") {
      modes.push_back(sim::Mode::NonReactive);
      modes.push_back(sim::Mode::Reactive);
    } else {
      modes.push_back(sim::parse_mode(n));
    }
  }
  return modes;
}

// Guidance and planner flags shared by eval and sample.
struct GuidanceFlags {
  std::vector<double> lat;
  std::vector<double> lon{0.0};
  std::vector<double> times{0.5};
  bool lane_heading = false;
  std::size_t infer_steps = 0;
  bool raw_weights = false;

  void add(CLI::App* app, const std::string& lat_help) {
    app->add_option("--lat-offsets", lat, lat_help)->delimiter(',');
    app->add_option("--lon-offsets", lon, "Longitudinal guidance offsets in meters")->delimiter(',');
    app->add_option("--guidance-times", times, "Flow times at which guidance is injected")->delimiter(',');
    app->add_flag("--lane-heading", lane_heading, "Guidance frame from the route lane instead of the ego heading");
    app->add_option("--infer-steps", infer_steps, "Euler steps at inference (default: checkpoint setting)");
    app->add_flag("--raw-weights", raw_weights, "Use the raw weights instead of the EMA weights");
  }

  flow::FlowConfig flow(const train::Checkpoint& c) const {
    flow::FlowConfig f = c.config.flow;
    if (infer_steps > 0) f.infer_steps = infer_steps;
    return f;
  }
};

// ---------------------------------------------------------------------------
// gen-data

struct GenData {
  std::size_t count = 5000;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<double> kind_weights;
};

void gen_data(const GenData& o) {
  std::vector<double> weights(o.kind_weights);
  if (weights.empty()) {
    const auto d = world::default_kind_weights();
    weights.assign(d.begin(), d.end());
  }
  FD_CHECK(weights.size() == world::kNumScenarioKinds, "--kind-weights needs {} values, got {}",
           world::kNumScenarioKinds, weights.size());
  scene::Dataset ds;
  ds.episodes = scene::generate_dataset(o.count, o.seed, weights, ds.dims);
  ds.stats = scene::compute_stats(std::span<const scene::ExpertEpisode>(ds.episodes));
  scene::save_dataset(o.out, ds);
  std::map<std::string, std::size_t> per_kind;
  for (const auto& e : ds.episodes) ++per_kind[std::string(world::kind_name(e.kind))];
  fmt::print(stderr, "wrote {} episodes to {}\n", ds.episodes.size(), o.out);
  for (const auto& [k, n] : per_kind) fmt::print(stderr, "  {:<16}{}\n", k, n);
}

// ---------------------------------------------------------------------------
// fit-clusters / cluster-report

struct FitClusters {
  std::string data;
  std::size_t k = balancing::kDefaultClusters;
  std::uint64_t seed = 0;
  std::string out;
};

void fit_clusters(const FitClusters& o) {
  require_file(o.data, "dataset");
  const scene::Dataset ds = scene::load_dataset(o.data);
  const auto r = balancing::fit_clusters(ds.episodes, o.k, o.seed);
  r.model.save(o.out);
  fmt::print(stderr, "k-means k={} converged in {} iterations, sse {:.4f}; wrote {}\n", o.k, r.iterations,
             r.sse.back(), o.out);
  for (std::size_t c = 0; c < r.model.k; ++c) fmt::print(stderr, "  cluster {:>2}: {}\n", c, r.model.counts[c]);
}

struct ClusterReport {
  std::string data;
  std::string clusters;
  double eps = balancing::kDefaultEpsilon;
  std::string out;
};

void cluster_report(const ClusterReport& o) {
  require_file(o.data, "dataset");
  require_file(o.clusters, "cluster model");
  const scene::Dataset ds = scene::load_dataset(o.data);
  const auto model = balancing::ClusterModel::load(o.clusters);
  write_text(o.out, versioned("cluster-report", balancing::cluster_report_csv(model, ds.episodes, o.eps)));
}

// ---------------------------------------------------------------------------
// train

struct Train {
  std::string data;
  std::string clusters;
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // explicit flags, applied after the file
  std::string out;
  std::string log;
  std::size_t val_seeds = 10;
  std::vector<std::string> val_suite{"all"};
  bool quiet = false;
};

std::unique_ptr<sim::Planner> plain_planner(const model::FlowModel& m, const scene::NormStats& stats,
                                            const flow::FlowConfig& flow) {
  sim::FlowPlannerOptions opts;
  opts.flow = flow;
  return std::make_unique<sim::FlowPlanner>("flowdrive", m, stats, opts);
}

void train_cmd(const Train& o) {
  require_file(o.data, "dataset");
  train::TrainConfig cfg;
  if (!o.config.empty()) {
    require_file(o.config, "config file");
    cfg = train::load_config(o.config);
  }
  for (const auto& [k, v] : o.flags) train::set_option(cfg, k, v);
  for (const std::string& kv : o.sets) {
    const auto pairs = train::parse_key_values(kv);
    for (const auto& [k, v] : pairs) train::set_option(cfg, k, v);
  }
  const scene::Dataset ds = scene::load_dataset(o.data);
  std::optional<balancing::ClusterModel> clusters;
  if (cfg.strategy == balancing::Strategy::Cluster) {
    FD_CHECK(!o.clusters.empty(), "strategy 'cluster' needs --clusters (run fit-clusters first)");
    require_file(o.clusters, "cluster model");
    clusters = balancing::ClusterModel::load(o.clusters);
  }
  train::Validator validate;
  if (cfg.val_every > 0) {
    const auto kinds = parse_suite(o.val_suite);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < o.val_seeds; ++i) seeds.push_back(100000 + i);
    validate = [&, kinds, seeds](const model::FlowModel& m, const scene::NormStats& stats) {
      const auto res = sim::run_suite([&] { return plain_planner(m, stats, cfg.flow); }, kinds, seeds,
                                      sim::Mode::Reactive);
      const double score = sim::aggregate(res);
      fmt::print(stderr, "  validation reactive score {:.2f}\n", score);
      return score;
    };
  }
  const auto start = std::chrono::steady_clock::now();
  train::ProgressFn progress;
  if (!o.quiet) {
    progress = [&](const train::LossRecord& r) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      fmt::print(stderr, "step {:>6} epoch {:>3} loss {:.5f} lr {:.2e} grad {:.3f} ({:.0f}s)\n", r.step, r.epoch,
                 r.loss, r.lr, r.grad_norm, secs);
    };
  }
  train::TrainResult res = train::train(cfg, ds, clusters ? &*clusters : nullptr, validate, progress);
  res.checkpoint.cluster_path = o.clusters;
  res.checkpoint.save(o.out);
  if (!o.log.empty()) write_text(o.log, versioned("loss-log", train::loss_log_csv(res.log)));
  fmt::print(stderr, "wrote {} after {} steps", o.out, res.checkpoint.step);
  if (cfg.val_every > 0) {
    fmt::print(stderr, " (EMA from step {}, validation score {:.2f})", res.checkpoint.selected_step,
               res.checkpoint.selected_score);
  }
  fmt::print(stderr, "\n");
}

// ---------------------------------------------------------------------------
// eval

struct Eval {
  std::string checkpoint;
  std::string minus_checkpoint;
  std::vector<std::string> planners{"flowdrive_minus", "flowdrive", "flowdrive_star", "expert_replay"};
  std::vector<std::string> modes{"both"};
  std::vector<std::string> suite{"all"};
  std::size_t seeds = 20;
  std::uint64_t seed_offset = 0;
  std::string out;
  std::string trace_dir;
  std::size_t workers = 1;
  std::size_t smooth_passes = 1;
  double duration = 15.0;
  double replan = 1.0;
  GuidanceFlags guidance;
};

sim::PlannerFactory make_factory(sim::PlannerKind kind, const Eval& o,
                                 std::map<std::string, std::shared_ptr<train::Checkpoint>>& cache) {
  if (kind == sim::PlannerKind::ExpertReplay) return [] { return std::make_unique<sim::ExpertPlanner>(); };
  const std::string& path = kind == sim::PlannerKind::FlowDriveMinus ? o.minus_checkpoint : o.checkpoint;
  const std::string flag = kind == sim::PlannerKind::FlowDriveMinus ? "--minus-checkpoint" : "--checkpoint";
  FD_CHECK(!path.empty(), "planner {} needs {}", sim::planner_name(kind), flag);
  require_file(path, "checkpoint");
  if (!cache.count(path)) cache[path] = std::make_shared<train::Checkpoint>(train::Checkpoint::load(path));
  const auto ckpt = cache[path];
  sim::FlowPlannerOptions opts;
  opts.hybrid = kind == sim::PlannerKind::FlowDriveStar;
  if (!o.guidance.lat.empty()) opts.lat = o.guidance.lat;
  opts.lon = o.guidance.lon;
  opts.times = o.guidance.times;
  opts.lane_heading = o.guidance.lane_heading;
  opts.smooth_passes = o.smooth_passes;
  opts.flow = o.guidance.flow(*ckpt);
  const bool ema = !o.guidance.raw_weights;
  const std::string name = sim::planner_name(kind);
  return [ckpt, opts, ema, name] {
    return std::make_unique<sim::FlowPlanner>(name, ckpt->model(ema), ckpt->stats, opts);
  };
}

void eval_cmd(const Eval& o) {
  const auto kinds = parse_suite(o.suite);
  const auto modes = parse_modes(o.modes);
  FD_CHECK(o.seeds > 0, "--seeds must be positive");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < o.seeds; ++i) seeds.push_back(o.seed_offset + i);
  sim::SimConfig cfg;
  cfg.duration = o.duration;
  cfg.replan = o.replan;
  sim::validate(cfg);
  std::map<std::string, std::shared_ptr<train::Checkpoint>> cache;
  std::vector<std::pair<sim::PlannerKind, sim::PlannerFactory>> planners;
  for (const std::string& p : o.planners) {
    const sim::PlannerKind k = sim::parse_planner(p);
    planners.emplace_back(k, make_factory(k, o, cache));
  }
  if (!o.trace_dir.empty()) std::filesystem::create_directories(o.trace_dir);
  std::string csv = sim::report_csv_header() + "\n";
  for (const auto& [kind, factory] : planners) {
    for (sim::Mode mode : modes) {
      const auto start = std::chrono::steady_clock::now();
      const auto res = sim::run_suite(factory, kinds, seeds, mode, cfg, o.workers);
      for (const auto& r : res) {
        csv += sim::report_csv_row(r) + "\n";
        if (!o.trace_dir.empty()) {
          const auto base = fmt::format("{}/{}_{}_{}_{}", o.trace_dir, world::kind_name(r.kind), r.seed,
                                        r.planner, sim::mode_name(mode));
          write_text(base + ".csv", versioned("trace", sim::trace_csv(r)));
        }
      }
      std::size_t failed = 0;
      for (const auto& r : res) failed += r.score.failed ? 1 : 0;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      fmt::print(stderr, "{:<16} {:<13} mean {:6.2f} over {} scenarios{} ({:.1f}s)\n", sim::planner_name(kind),
                 sim::mode_name(mode), sim::aggregate(res), res.size(),
                 failed ? fmt::format(", {} failed", failed) : "", secs);
    }
  }
  write_text(o.out, versioned("report", csv));
}

// ---------------------------------------------------------------------------
// sample

struct Sample {
  std::string checkpoint;
  std::string kind = "lane_follow";
  std::uint64_t seed = 0;
  std::uint64_t noise_seed = 0;
  std::string format = "csv";
  std::string out;
  GuidanceFlags guidance;
};

void sample_cmd(const Sample& o) {
  require_file(o.checkpoint, "checkpoint");
  const train::Checkpoint ckpt = train::Checkpoint::load(o.checkpoint);
  model::FlowModel m = ckpt.model(!o.guidance.raw_weights);
  const world::World w = world::generate_world(o.seed, world::parse_kind(o.kind));
  const sim::SimState s = sim::initial_state(w);
  const scene::SceneContext raw = sim::observe(s, ckpt.dims);
  const double theta = o.guidance.lane_heading ? guidance::lane_heading(raw) : 0.0;
  const std::vector<double> lat =
      o.guidance.lat.empty() ? std::vector<double>{-0.5, -0.25, 0.0, 0.25, 0.5} : o.guidance.lat;
  const auto specs = guidance::candidate_grid(lat, o.guidance.lon, o.guidance.times, theta);
  std::mt19937_64 rng(splitmix64(o.noise_seed));
  const ad::Tensor z = flow::standard_normal({ckpt.dims.horizon, scene::kActionDim}, rng);
  const auto trajs = guidance::sample_trajectories(m, scene::normalize(ckpt.stats, raw), specs,
                                                   o.guidance.flow(ckpt), z);
  if (o.format == "json") {
    nlohmann::json j;
    j["format"] = "flowdrive-samples";
    j["version"] = 1;
    j["scenario"] = o.kind;
    j["seed"] = o.seed;
    j["noise_seed"] = o.noise_seed;
    j["dt"] = ckpt.dims.future_dt;
    j["candidates"] = nlohmann::json::array();
    for (std::size_t i = 0; i < specs.size(); ++i) {
      nlohmann::json c;
      c["lat"] = specs[i].lat;
      c["lon"] = specs[i].lon;
      c["times"] = specs[i].times;
      c["points"] = nlohmann::json::array();
      for (const auto& wp : trajs[i]) c["points"].push_back({wp.x, wp.y, wp.heading()});
      j["candidates"].push_back(c);
    }
    write_text(o.out, j.dump(2) + "\n");
    return;
  }
  FD_CHECK(o.format == "csv", "unknown --format '{}' (csv, json)", o.format);
  std::string csv = "candidate,lat,lon,h,x,y,heading\n";
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (std::size_t h = 0; h < trajs[i].size(); ++h) {
      const auto& wp = trajs[i][h];
      csv += fmt::format("{},{},{},{},{:.5f},{:.5f},{:.5f}\n", i, specs[i].lat, specs[i].lon, h + 1, wp.x, wp.y,
                         wp.heading());
    }
  }
  write_text(o.out, versioned("samples", csv));
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
  std::string input;
  std::string out;
  std::string title;
  std::string scenario;
  std::uint64_t seed = 0;
};

void plot_cmd(const PlotArgs& o) {
  require_file(o.input, "input");
  const plot::Table t = plot::parse_csv(read_text(o.input));
  std::optional<world::World> map;
  if (!o.scenario.empty()) map = world::generate_world(o.seed, world::parse_kind(o.scenario));
  const std::string title = o.title.empty() ? std::filesystem::path(o.input).filename().string() : o.title;
  write_text(o.out, plot::render(t, title, map ? &*map : nullptr));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowdrive: rectified-flow trajectory planner at desk scale"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenData gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the expert episode dataset");
  c_gen->add_option("--count", gd.count, "Number of episodes")->capture_default_str();
  c_gen->add_option("--seed", gd.seed, "Dataset seed")->capture_default_str();
  c_gen->add_option("--kind-weights", gd.kind_weights, "Scenario kind mix (one weight per kind)")->delimiter(',');
  c_gen->add_option("--out", gd.out, "Output dataset file")->required();

  FitClusters fc;
  auto* c_fit = app.add_subcommand("fit-clusters", "Fit k-means on expert trajectories");
  c_fit->add_option("--data", fc.data, "Dataset file")->required();
  c_fit->add_option("--k", fc.k, "Number of clusters")->capture_default_str();
  c_fit->add_option("--seed", fc.seed, "k-means++ seed")->capture_default_str();
  c_fit->add_option("--out", fc.out, "Output cluster model")->required();

  ClusterReport cr;
  auto* c_rep = app.add_subcommand("cluster-report", "Per-cluster histogram under each sampling strategy");
  c_rep->add_option("--data", cr.data, "Dataset file")->required();
  c_rep->add_option("--clusters", cr.clusters, "Cluster model")->required();
  c_rep->add_option("--eps", cr.eps, "Inverse-frequency smoothing")->capture_default_str();
  c_rep->add_option("--out", cr.out, "Output CSV (default stdout)");

  Train tr;
  auto* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  c_train->add_option("--data", tr.data, "Dataset file")->required();
  c_train->add_option("--clusters", tr.clusters, "Cluster model (cluster strategy)");
  c_train->add_option("--config", tr.config, "key = value config file");
  c_train->add_option("--set", tr.sets, "Override a config key (key=value, repeatable)");
  for (const char* key : {"strategy", "epochs", "max_steps", "batch", "lr", "seed", "val_every"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    c_train->add_option_function<std::string>(flag, [&tr, key](const std::string& v) { tr.flags[key] = v; },
                                              fmt::format("Config key {}", key));
  }
  c_train->add_option("--val-seeds", tr.val_seeds, "Validation scenarios per kind")->capture_default_str();
  c_train->add_option("--val-suite", tr.val_suite, "Validation scenario kinds")->delimiter(',');
  c_train->add_option("--out", tr.out, "Output checkpoint")->required();
  c_train->add_option("--log", tr.log, "Loss log CSV");
  c_train->add_flag("--quiet", tr.quiet, "No per-step progress");

  Eval ev;
  auto* c_eval = app.add_subcommand("eval", "Closed-loop evaluation suite");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint for flowdrive and flowdrive_star");
  c_eval->add_option("--minus-checkpoint", ev.minus_checkpoint, "Checkpoint for flowdrive_minus");
  c_eval->add_option("--planner", ev.planners, "Planners to run")->delimiter(',');
  c_eval->add_option("--mode", ev.modes, "reactive, non_reactive or both")->delimiter(',');
  c_eval->add_option("--suite", ev.suite, "Scenario kinds, or all")->delimiter(',');
  c_eval->add_option("--seeds", ev.seeds, "Scenarios per kind")->capture_default_str();
  c_eval->add_option("--seed-offset", ev.seed_offset, "First scenario seed")->capture_default_str();
  c_eval->add_option("--out", ev.out, "Report CSV (default stdout)");
  c_eval->add_option("--trace-dir", ev.trace_dir, "Write a per-step trace per scenario here");
  c_eval->add_option("--workers", ev.workers, "Scenario worker threads")->capture_default_str();
  c_eval->add_option("--smooth-passes", ev.smooth_passes, "Smoothing passes (flowdrive_star)")->capture_default_str();
  c_eval->add_option("--duration", ev.duration, "Scenario length in seconds")->capture_default_str();
  c_eval->add_option("--replan", ev.replan, "Seconds between replans")->capture_default_str();
  ev.guidance.add(c_eval, "Lateral guidance offsets in meters (default: 30 values on [-1, 1])");

  Sample sa;
  auto* c_sample = app.add_subcommand("sample", "Guided candidate trajectories for one scene");
  c_sample->add_option("--checkpoint", sa.checkpoint, "Checkpoint")->required();
  c_sample->add_option("--kind", sa.kind, "Scenario kind")->capture_default_str();
  c_sample->add_option("--seed", sa.seed, "Scenario seed")->capture_default_str();
  c_sample->add_option("--noise-seed", sa.noise_seed, "Seed of the shared flow noise")->capture_default_str();
  c_sample->add_option("--format", sa.format, "csv or json")->capture_default_str();
  c_sample->add_option("--out", sa.out, "Output file (default stdout)");
  sa.guidance.add(c_sample, "Lateral guidance offsets in meters (default -0.5,-0.25,0,0.25,0.5)");

  PlotArgs pl;
  auto* c_plot = app.add_subcommand("plot", "Render a trace, samples, cluster report, loss log or report to SVG");
  c_plot->add_option("--input", pl.input, "CSV dump")->required();
  c_plot->add_option("--out", pl.out, "Output SVG")->required();
  c_plot->add_option("--title", pl.title, "Plot title");
  c_plot->add_option("--scenario", pl.scenario, "Draw the map of this scenario kind");
  c_plot->add_option("--seed", pl.seed, "Scenario seed for --scenario")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*c_gen) gen_data(gd);
    if (*c_fit) fit_clusters(fc);
    if (*c_rep) cluster_report(cr);
    if (*c_train) train_cmd(tr);
    if (*c_eval) eval_cmd(ev);
    if (*c_sample) sample_cmd(sa);
    if (*c_plot) plot_cmd(pl);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
