#pragma once

// Trajectory clustering and inverse-frequency sample weights for rebalancing
// the long-tailed training distribution.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowdrive/scene.hpp"

namespace flowdrive::balancing {

enum class Strategy { None, Scenario, Cluster };

std::string strategy_name(Strategy s);
/// "none", "scenario" or "cluster"; throws otherwise.
Strategy parse_strategy(const std::string& name);

inline constexpr std::size_t kDefaultClusters = 8;
inline constexpr double kDefaultEpsilon = 1e-4;

/// Stacked coordinates: x_1..x_H followed by y_1..y_H.
std::vector<double> embed_trajectory(const scene::Trajectory& future);

struct ClusterModel {
  std::size_t k = 0;
  std::size_t horizon = 0;
  std::vector<std::vector<double>> centers;  ///< K x 2H
  std::vector<std::size_t> counts;           ///< training points per cluster
  std::vector<std::vector<double>> mean;     ///< per-cluster mean embedding
  std::vector<std::vector<double>> stddev;   ///< per-cluster population std

  /// Nearest center (Euclidean), lowest index on ties.
  int assign(std::span<const double> v) const;
  void save(const std::string& path) const;
  static ClusterModel load(const std::string& path);

  bool operator==(const ClusterModel&) const = default;
};

struct KMeansResult {
  ClusterModel model;
  std::vector<int> labels;
  /// Within-cluster SSE after each assignment step.
  std::vector<double> sse;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding; at most `max_iter` iterations.
/// An empty cluster is re-seeded at the point farthest from its center.
KMeansResult kmeans_fit(const std::vector<std::vector<double>>& points, std::size_t k,
                        std::uint64_t seed, std::size_t max_iter = 100);

KMeansResult fit_clusters(std::span<const scene::ExpertEpisode> episodes, std::size_t k,
                          std::uint64_t seed);

struct SampleWeights {
  Strategy strategy = Strategy::None;
  std::vector<double> weights;
};

/// w = 1 / (f_label + eps), rescaled so the per-sample mean is 1.
SampleWeights inverse_frequency_weights(std::span<const int> labels, double eps,
                                        Strategy strategy = Strategy::Cluster);

/// Weights for a training set; `clusters` is required for the cluster strategy.
SampleWeights strategy_weights(Strategy strategy, std::span<const scene::ExpertEpisode> episodes,
                               const ClusterModel* clusters, double eps = kDefaultEpsilon);

/// n i.i.d. indices drawn with replacement, P(i) proportional to weights[i].
std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::mt19937_64& rng,
                                         std::size_t n);

/// Expected share of draws landing in each label under the given weights.
std::vector<double> expected_label_share(std::span<const int> labels,
                                         std::span<const double> weights, std::size_t num_labels);

/// CSV: cluster,count,fraction,share_none,share_scenario,share_cluster.
std::string cluster_report_csv(const ClusterModel& model, std::span<const scene::ExpertEpisode> episodes,
                               double eps = kDefaultEpsilon);

}  // namespace flowdrive::balancing
