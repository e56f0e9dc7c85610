// Python bindings: dataset and model pipeline, guided sampling and
// closed-loop scenario runs.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flowdrive/balancing.hpp"
#include "flowdrive/flow.hpp"
#include "flowdrive/guidance.hpp"
#include "flowdrive/random.hpp"
#include "flowdrive/sim.hpp"
#include "flowdrive/train.hpp"

namespace py = pybind11;
using namespace flowdrive;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ad::Tensor to_tensor(const Array& a) {
  ad::Shape shape(a.shape(), a.shape() + a.ndim());
  return ad::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const ad::Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

std::map<std::string, std::size_t> generate_dataset(const std::string& path, std::size_t count,
                                                    std::uint64_t seed) {
  py::gil_scoped_release nogil;
  scene::Dataset ds;
  ds.episodes = scene::generate_dataset(count, seed, world::default_kind_weights());
  ds.stats = scene::compute_stats(std::span<const scene::ExpertEpisode>(ds.episodes));
  scene::save_dataset(path, ds);
  std::map<std::string, std::size_t> per_kind;
  for (const auto& e : ds.episodes) ++per_kind[std::string(world::kind_name(e.kind))];
  return per_kind;
}

std::vector<std::size_t> fit_clusters(const std::string& data, const std::string& out, std::size_t k,
                                      std::uint64_t seed) {
  py::gil_scoped_release nogil;
  const auto ds = scene::load_dataset(data);
  const auto fit = balancing::fit_clusters(ds.episodes, k, seed);
  fit.model.save(out);
  return fit.model.counts;
}

py::dict train_model(const std::string& data, const std::string& out, const std::string& clusters,
                     const std::map<std::string, std::string>& options) {
  train::TrainResult res;
  {
    py::gil_scoped_release nogil;
    train::TrainConfig cfg;
    for (const auto& [k, v] : options) train::set_option(cfg, k, v);
    const auto ds = scene::load_dataset(data);
    std::optional<balancing::ClusterModel> cm;
    if (!clusters.empty()) cm = balancing::ClusterModel::load(clusters);
    res = train::train(cfg, ds, cm ? &*cm : nullptr);
    res.checkpoint.cluster_path = clusters;
    res.checkpoint.save(out);
  }
  py::list steps, losses;
  for (const auto& r : res.log) {
    steps.append(r.step);
    losses.append(r.loss);
  }
  py::dict d;
  d["steps"] = res.checkpoint.step;
  d["log_steps"] = steps;
  d["log_loss"] = losses;
  return d;
}

// Checkpoint handle shared by sampling and scenario runs.
struct Model {
  std::shared_ptr<train::Checkpoint> ckpt;

  static Model load(const std::string& path) {
    return {std::make_shared<train::Checkpoint>(train::Checkpoint::load(path))};
  }

  Array sample(const std::string& kind, std::uint64_t seed, const std::vector<double>& lat,
               const std::vector<double>& lon, const std::vector<double>& times, std::uint64_t noise_seed,
               bool ema, std::size_t infer_steps) const {
    std::vector<scene::Trajectory> trajs;
    {
      py::gil_scoped_release nogil;
      auto m = ckpt->model(ema);
      const world::World w = world::generate_world(seed, world::parse_kind(kind));
      const auto raw = sim::observe(sim::initial_state(w), ckpt->dims);
      const auto specs = guidance::candidate_grid(lat, lon, times);
      std::mt19937_64 rng(splitmix64(noise_seed));
      const auto z = flow::standard_normal({ckpt->dims.horizon, scene::kActionDim}, rng);
      flow::FlowConfig fc = ckpt->config.flow;
      if (infer_steps > 0) fc.infer_steps = infer_steps;
      trajs = guidance::sample_trajectories(m, scene::normalize(ckpt->stats, raw), specs, fc, z);
    }
    const std::size_t H = trajs.empty() ? 0 : trajs[0].size();
    Array out({trajs.size(), H, std::size_t{3}});
    auto v = out.mutable_unchecked<3>();
    for (std::size_t c = 0; c < trajs.size(); ++c) {
      for (std::size_t h = 0; h < H; ++h) {
        v(c, h, 0) = trajs[c][h].x;
        v(c, h, 1) = trajs[c][h].y;
        v(c, h, 2) = trajs[c][h].heading();
      }
    }
    return out;
  }
};

py::dict run_scenario(const std::string& kind, std::uint64_t seed, const std::string& planner,
                      const std::string& mode, std::optional<Model> model, double duration) {
  sim::EpisodeResult r;
  {
    py::gil_scoped_release nogil;
    const sim::PlannerKind pk = sim::parse_planner(planner);
    std::unique_ptr<sim::Planner> p;
    if (pk == sim::PlannerKind::ExpertReplay) {
      p = std::make_unique<sim::ExpertPlanner>();
    } else {
      FD_CHECK(model.has_value(), "planner {} needs a model", planner);
      sim::FlowPlannerOptions opts;
      opts.hybrid = pk == sim::PlannerKind::FlowDriveStar;
      opts.flow = model->ckpt->config.flow;
      p = std::make_unique<sim::FlowPlanner>(planner, model->ckpt->model(true), model->ckpt->stats, opts);
    }
    sim::SimConfig cfg;
    cfg.duration = duration;
    r = sim::run_closed_loop(*p, world::generate_world(seed, world::parse_kind(kind)), sim::parse_mode(mode),
                             cfg, seed);
  }
  py::dict score;
  score["total"] = r.score.total;
  score["no_collision"] = r.score.no_collision;
  score["drivable_area"] = r.score.drivable_area;
  score["progress"] = r.score.progress;
  score["ttc"] = r.score.ttc;
  score["speed_limit"] = r.score.speed_limit;
  score["comfort"] = r.score.comfort;
  score["failed"] = r.score.failed;
  py::list events;
  for (const auto& e : r.events) {
    py::dict d;
    d["time"] = e.time;
    d["type"] = sim::event_name(e.type);
    d["object"] = e.object;
    d["at_fault"] = e.at_fault;
    d["detail"] = e.detail;
    events.append(d);
  }
  Array trace({r.trace.size(), std::size_t{5}});
  auto t = trace.mutable_unchecked<2>();
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    const auto& row = r.trace[i];
    t(i, 0) = row.time;
    t(i, 1) = row.ego.pos.x;
    t(i, 2) = row.ego.pos.y;
    t(i, 3) = row.ego.heading;
    t(i, 4) = row.ego.speed;
  }
  py::dict out;
  out["score"] = score;
  out["events"] = events;
  out["trace"] = trace;
  out["ego_progress"] = r.ego_progress;
  out["expert_progress"] = r.expert_progress;
  return out;
}

// Euler integration of the constant oracle field x - z.
Array integrate_oracle(const Array& z, const Array& x, std::size_t steps) {
  const ad::Tensor zt = to_tensor(z), xt = to_tensor(x);
  FD_CHECK(zt.shape == xt.shape, "integrate_oracle: z and x shapes differ");
  const ad::Tensor v = flow::target_velocity(zt, xt);
  flow::FlowConfig cfg;
  cfg.infer_steps = steps;
  return to_array(flow::integrate([&](const ad::Tensor&, double) { return v; }, zt, cfg));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Rectified-flow trajectory planner with moderated guidance and a synthetic closed-loop world.";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def("kinds", [] {
    std::vector<std::string> names;
    for (auto k : world::all_kinds()) names.emplace_back(world::kind_name(k));
    return names;
  }, "Scenario kind names.");
  m.def("planners", [] {
    return std::vector<std::string>{"flowdrive_minus", "flowdrive", "flowdrive_star", "expert_replay"};
  }, "Planner names.");
  m.def("generate_dataset", &generate_dataset, py::arg("path"), py::arg("count"), py::arg("seed") = 0,
        "Writes an expert dataset; returns episodes per scenario kind.");
  m.def("fit_clusters", &fit_clusters, py::arg("data"), py::arg("out"), py::arg("k") = balancing::kDefaultClusters,
        py::arg("seed") = 0, "Fits k-means on expert futures; returns per-cluster counts.");
  m.def("train", &train_model, py::arg("data"), py::arg("out"), py::arg("clusters") = "",
        py::arg("options") = std::map<std::string, std::string>{},
        "Trains a model; options are config keys (e.g. {'max_steps': '100'}).");
  m.def("integrate_oracle", &integrate_oracle, py::arg("z"), py::arg("x"), py::arg("steps"),
        "Euler-integrates the constant field x - z from z.");

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def_property_readonly("step", [](const Model& s) { return s.ckpt->step; })
      .def_property_readonly("horizon", [](const Model& s) { return s.ckpt->dims.horizon; })
      .def_property_readonly("config", [](const Model& s) { return train::config_to_text(s.ckpt->config); })
      .def("sample", &Model::sample, py::arg("kind"), py::arg("seed"),
           py::arg("lat") = std::vector<double>{-0.5, -0.25, 0.0, 0.25, 0.5},
           py::arg("lon") = std::vector<double>{0.0}, py::arg("times") = std::vector<double>{0.5},
           py::arg("noise_seed") = 0, py::arg("ema") = true, py::arg("infer_steps") = 0,
           "Guided candidates for the scenario's first frame: [candidates, H, (x, y, heading)] in the ego frame.");

  m.def("run_scenario", &run_scenario, py::arg("kind"), py::arg("seed"), py::arg("planner") = "expert_replay",
        py::arg("mode") = "non_reactive", py::arg("model") = std::nullopt, py::arg("duration") = 15.0,
        "Closed-loop run; returns the score terms, events and the ego trace (time, x, y, heading, speed).");
}
