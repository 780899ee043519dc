#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "sceneflow/geometry.hpp"
#include "sceneflow/nn_index.hpp"

namespace sceneflow {

struct ClusterConfig {
  std::size_t min_cluster_size = 20;
  double epsilon = 0.7;  // m

  void validate() const {
    if (min_cluster_size < 2) throw std::invalid_argument("min_cluster_size must be >= 2");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  }
};

/// Partition of a frame's dynamic points into object candidates and noise.
/// Indices refer to points of the frame cloud. Clusters are ordered by their
/// lowest member index and each member list is ascending.
struct ClusterSet {
  std::vector<std::vector<std::size_t>> clusters;
  std::vector<std::size_t> noise;

  [[nodiscard]] std::size_t clustered_count() const {
    std::size_t n = 0;
    for (const auto& c : clusters) n += c.size();
    return n;
  }
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned> rank_;
};

}  // namespace detail

/// Density-based grouping of the dynamic points: connected components of the
/// graph linking dynamic points closer than epsilon, keeping components of at
/// least min_cluster_size points. Static points never enter a cluster.
inline ClusterSet cluster_dynamic(const PointCloud& cloud, std::span<const std::uint8_t> mask,
                                  const ClusterConfig& cfg) {
  cfg.validate();
  if (mask.size() != cloud.size()) throw std::invalid_argument("mask/cloud size mismatch");
  ClusterSet out;
  std::vector<std::size_t> dyn;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (mask[i]) dyn.push_back(i);
  if (dyn.empty()) return out;

  std::vector<Point3> pts;
  pts.reserve(dyn.size());
  for (auto i : dyn) pts.push_back(cloud[i]);
  const NearestNeighborIndex index(pts);

  detail::DisjointSets sets(dyn.size());
  std::vector<std::size_t> nbrs;
  for (std::size_t k = 0; k < dyn.size(); ++k) {
    index.radius_search(pts[k], cfg.epsilon, nbrs);
    for (auto j : nbrs)
      if (j > k) sets.unite(k, j);
  }

  // Components are discovered in ascending member order, so the first member
  // seen fixes both the cluster order and the ascending member lists.
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::ptrdiff_t> comp_of(dyn.size(), -1);
  for (std::size_t k = 0; k < dyn.size(); ++k) {
    const auto root = sets.find(k);
    if (comp_of[root] < 0) {
      comp_of[root] = static_cast<std::ptrdiff_t>(comps.size());
      comps.emplace_back();
    }
    comps[comp_of[root]].push_back(dyn[k]);
  }
  for (auto& c : comps) {
    if (c.size() >= cfg.min_cluster_size) {
      out.clusters.push_back(std::move(c));
    } else {
      out.noise.insert(out.noise.end(), c.begin(), c.end());
    }
  }
  std::sort(out.noise.begin(), out.noise.end());
  return out;
}

}  // namespace sceneflow
