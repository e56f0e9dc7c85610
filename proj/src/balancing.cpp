#include "flowdrive/balancing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "flowdrive/error.hpp"
#include "flowdrive/io.hpp"

namespace flowdrive::balancing {

namespace {

constexpr std::string_view kMagic = "FDCL";
constexpr std::uint32_t kVersion = 1;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Scenario: return "scenario";
    case Strategy::Cluster: return "cluster";
  }
  return "none";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "none") return Strategy::None;
  if (name == "scenario") return Strategy::Scenario;
  if (name == "cluster") return Strategy::Cluster;
  throw Error(fmt::format("unknown balancing strategy '{}' (expected none, scenario or cluster)", name));
}

std::vector<double> embed_trajectory(const scene::Trajectory& future) {
  const std::size_t h = future.size();
  std::vector<double> v(2 * h);
  for (std::size_t i = 0; i < h; ++i) {
    v[i] = future[i].x;
    v[h + i] = future[i].y;
  }
  return v;
}

int ClusterModel::assign(std::span<const double> v) const {
  FD_CHECK(v.size() == 2 * horizon, "cluster assign: vector length {} != {}", v.size(), 2 * horizon);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double d = sq_dist(v, centers[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

void ClusterModel::save(const std::string& path) const {
  io::Writer w(path, kMagic, kVersion);
  w.put<std::uint64_t>(k);
  w.put<std::uint64_t>(horizon);
  for (std::size_t c = 0; c < k; ++c) {
    w.put_doubles(centers[c]);
    w.put<std::uint64_t>(counts[c]);
    w.put_doubles(mean[c]);
    w.put_doubles(stddev[c]);
  }
  w.finish();
}

ClusterModel ClusterModel::load(const std::string& path) {
  io::Reader r(path, kMagic, kVersion);
  ClusterModel m;
  m.k = r.get<std::uint64_t>();
  m.horizon = r.get<std::uint64_t>();
  FD_CHECK(m.k >= 1 && m.k < (1u << 20) && m.horizon >= 1 && m.horizon < (1u << 20),
           "{}: corrupt header (K={}, H={})", path, m.k, m.horizon);
  for (std::size_t c = 0; c < m.k; ++c) {
    m.centers.push_back(r.get_doubles());
    m.counts.push_back(r.get<std::uint64_t>());
    m.mean.push_back(r.get_doubles());
    m.stddev.push_back(r.get_doubles());
    FD_CHECK(m.centers.back().size() == 2 * m.horizon && m.mean.back().size() == 2 * m.horizon &&
                 m.stddev.back().size() == 2 * m.horizon,
             "{}: cluster {} has the wrong width", path, c);
  }
  FD_CHECK(r.at_end(), "{}: trailing bytes", path);
  return m;
}

KMeansResult kmeans_fit(const std::vector<std::vector<double>>& points, std::size_t k,
                        std::uint64_t seed, std::size_t max_iter) {
  FD_CHECK(k >= 1, "kmeans: K must be >= 1");
  FD_CHECK(!points.empty(), "kmeans: no points");
  const std::size_t dim = points.front().size();
  FD_CHECK(dim >= 2 && dim % 2 == 0, "kmeans: vector length {} is not 2H", dim);
  for (const auto& p : points) {
    FD_CHECK(p.size() == dim, "kmeans: ragged input ({} vs {})", p.size(), dim);
    FD_CHECK(std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); }),
             "kmeans: non-finite input");
  }
  {
    std::set<std::vector<double>> distinct;
    for (const auto& p : points) {
      distinct.insert(p);
      if (distinct.size() >= k) break;
    }
    FD_CHECK(distinct.size() >= k, "kmeans: need at least {} distinct vectors, got {}", k,
             distinct.size());
  }
  const std::size_t n = points.size();
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  std::vector<std::vector<double>> centers;
  centers.push_back(points[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], centers[0]);
  while (centers.size() < k) {
    // At least K distinct points exist, so some d2 is positive.
    const std::size_t pick = std::discrete_distribution<std::size_t>(d2.begin(), d2.end())(rng);
    centers.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
  }

  KMeansResult res;
  res.model.k = k;
  res.model.horizon = dim / 2;
  res.model.centers = std::move(centers);
  res.labels.assign(n, -1);
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int c = res.model.assign(points[i]);
      changed |= c != res.labels[i];
      res.labels[i] = c;
      dist[i] = sq_dist(points[i], res.model.centers[c]);
      sse += dist[i];
    }
    res.sse.push_back(sse);
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(res.labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed from the point farthest from its current center.
        const auto far = static_cast<std::size_t>(
            std::max_element(dist.begin(), dist.end()) - dist.begin());
        res.model.centers[c] = points[far];
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < dim; ++j) {
        res.model.centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
      }
    }
  }

  auto& m = res.model;
  m.counts.assign(k, 0);
  m.mean.assign(k, std::vector<double>(dim, 0.0));
  m.stddev.assign(k, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(res.labels[i]);
    ++m.counts[c];
    for (std::size_t j = 0; j < dim; ++j) m.mean[c][j] += points[i][j];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (m.counts[c] == 0) continue;
    for (double& v : m.mean[c]) v /= static_cast<double>(m.counts[c]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(res.labels[i]);
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = points[i][j] - m.mean[c][j];
      m.stddev[c][j] += d * d;
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (m.counts[c] == 0) continue;
    for (double& v : m.stddev[c]) v = std::sqrt(v / static_cast<double>(m.counts[c]));
  }
  return res;
}

KMeansResult fit_clusters(std::span<const scene::ExpertEpisode> episodes, std::size_t k,
                          std::uint64_t seed) {
  std::vector<std::vector<double>> pts;
  pts.reserve(episodes.size());
  for (const auto& e : episodes) pts.push_back(embed_trajectory(e.future));
  return kmeans_fit(pts, k, seed);
}

SampleWeights inverse_frequency_weights(std::span<const int> labels, double eps, Strategy strategy) {
  FD_CHECK(!labels.empty(), "inverse_frequency_weights: no labels");
  FD_CHECK(eps > 0.0, "inverse_frequency_weights: eps must be > 0, got {}", eps);
  const int max_label = *std::max_element(labels.begin(), labels.end());
  FD_CHECK(*std::min_element(labels.begin(), labels.end()) >= 0, "negative label");
  std::vector<double> count(static_cast<std::size_t>(max_label) + 1, 0.0);
  for (int l : labels) count[static_cast<std::size_t>(l)] += 1.0;
  const double n = static_cast<double>(labels.size());
  SampleWeights out;
  out.strategy = strategy;
  out.weights.resize(labels.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.weights[i] = 1.0 / (count[static_cast<std::size_t>(labels[i])] / n + eps);
    sum += out.weights[i];
  }
  const double scale = n / sum;
  for (double& w : out.weights) w *= scale;
  return out;
}

SampleWeights strategy_weights(Strategy strategy, std::span<const scene::ExpertEpisode> episodes,
                               const ClusterModel* clusters, double eps) {
  FD_CHECK(!episodes.empty(), "strategy_weights: no episodes");
  std::vector<int> labels(episodes.size(), 0);
  switch (strategy) {
    case Strategy::None: return SampleWeights{Strategy::None, std::vector<double>(episodes.size(), 1.0)};
    case Strategy::Scenario:
      for (std::size_t i = 0; i < episodes.size(); ++i) labels[i] = static_cast<int>(episodes[i].kind);
      break;
    case Strategy::Cluster:
      FD_CHECK(clusters != nullptr, "cluster balancing needs a cluster model");
      for (std::size_t i = 0; i < episodes.size(); ++i) {
        labels[i] = clusters->assign(embed_trajectory(episodes[i].future));
      }
      break;
  }
  return inverse_frequency_weights(labels, eps, strategy);
}

std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::mt19937_64& rng,
                                         std::size_t n) {
  FD_CHECK(!weights.empty(), "weighted_sample: no weights");
  FD_CHECK(std::all_of(weights.begin(), weights.end(),
                       [](double w) { return std::isfinite(w) && w >= 0.0; }) &&
               std::any_of(weights.begin(), weights.end(), [](double w) { return w > 0.0; }),
           "weighted_sample: weights must be finite, non-negative and not all zero");
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = dist(rng);
  return out;
}

std::vector<double> expected_label_share(std::span<const int> labels,
                                         std::span<const double> weights, std::size_t num_labels) {
  FD_CHECK(labels.size() == weights.size(), "expected_label_share: {} labels vs {} weights",
           labels.size(), weights.size());
  std::vector<double> share(num_labels, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    FD_CHECK(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < num_labels,
             "label {} out of range", labels[i]);
    share[static_cast<std::size_t>(labels[i])] += weights[i];
    total += weights[i];
  }
  for (double& s : share) s /= total;
  return share;
}

std::string cluster_report_csv(const ClusterModel& model, std::span<const scene::ExpertEpisode> episodes,
                               double eps) {
  std::vector<int> labels;
  for (const auto& e : episodes) labels.push_back(model.assign(embed_trajectory(e.future)));
  const auto none = strategy_weights(Strategy::None, episodes, nullptr, eps);
  const auto scen = strategy_weights(Strategy::Scenario, episodes, nullptr, eps);
  const auto clus = strategy_weights(Strategy::Cluster, episodes, &model, eps);
  const auto s0 = expected_label_share(labels, none.weights, model.k);
  const auto s1 = expected_label_share(labels, scen.weights, model.k);
  const auto s2 = expected_label_share(labels, clus.weights, model.k);
  std::vector<std::size_t> count(model.k, 0);
  for (int l : labels) ++count[static_cast<std::size_t>(l)];
  std::string csv = "cluster,count,fraction,share_none,share_scenario,share_cluster\n";
  for (std::size_t c = 0; c < model.k; ++c) {
    csv += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", c, count[c],
                       static_cast<double>(count[c]) / static_cast<double>(labels.size()), s0[c],
                       s1[c], s2[c]);
  }
  return csv;
}

}  // namespace flowdrive::balancing
