#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "sceneflow/geometry.hpp"

namespace sceneflow {

struct Neighbor {
  double distance = std::numeric_limits<double>::infinity();
  double squared = std::numeric_limits<double>::infinity();
  std::size_t index = 0;
};

/// Exact nearest-neighbour index (k-d tree) over an immutable point set.
///
/// Queries return the point with minimum Euclidean distance; equal distances
/// resolve to the lowest index in the indexed set. The tree keeps its own copy
/// of the coordinates, so the source container may go away after construction.
/// All queries are const and safe to call concurrently.
class NearestNeighborIndex {
 public:
  explicit NearestNeighborIndex(std::span<const Point3> points, std::size_t leaf_size = 10)
      : leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    if (points.empty()) throw std::invalid_argument("empty index target");
    const std::size_t n = points.size();
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    nodes_.reserve(2 * n / leaf_size_ + 2);
    std::vector<Point3> tmp(points.begin(), points.end());
    build(tmp, 0, n);
    coords_.resize(3 * n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& p = tmp[order_[k]];
      coords_[3 * k] = p.x();
      coords_[3 * k + 1] = p.y();
      coords_[3 * k + 2] = p.z();
    }
  }

  explicit NearestNeighborIndex(const PointCloud& cloud, std::size_t leaf_size = 10)
      : NearestNeighborIndex(cloud.points(), leaf_size) {}

  [[nodiscard]] std::size_t size() const { return order_.size(); }

  [[nodiscard]] Neighbor nearest(const Point3& q) const {
    const std::array<double, 3> qa{q.x(), q.y(), q.z()};
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_idx = std::numeric_limits<std::uint32_t>::max();
    search(0, qa, best, best_idx);
    Neighbor nb;
    nb.squared = best;
    nb.distance = std::sqrt(best);
    nb.index = best_idx;
    return nb;
  }

  /// Indices of all points within `radius` (inclusive) of q, ascending.
  void radius_search(const Point3& q, double radius, std::vector<std::size_t>& out) const {
    out.clear();
    const std::array<double, 3> qa{q.x(), q.y(), q.z()};
    radius_rec(0, qa, radius * radius, out);
    std::sort(out.begin(), out.end());
  }

 private:
  struct Node {
    // Leaves: [begin, end) into order_/coords_. Internal: children + split plane.
    std::uint32_t begin = 0, end = 0;
    std::int32_t left = -1, right = -1;
    double split = 0.0;
    int axis = -1;
  };

  std::int32_t build(const std::vector<Point3>& pts, std::size_t lo, std::size_t hi) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({});
    nodes_[id].begin = static_cast<std::uint32_t>(lo);
    nodes_[id].end = static_cast<std::uint32_t>(hi);
    if (hi - lo <= leaf_size_) return id;

    Vec3 mn = pts[order_[lo]], mx = mn;
    for (std::size_t k = lo + 1; k < hi; ++k) {
      mn = mn.cwiseMin(pts[order_[k]]);
      mx = mx.cwiseMax(pts[order_[k]]);
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    if (mx[axis] - mn[axis] <= 0.0) return id;  // all coincident: keep as one leaf

    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](std::uint32_t a, std::uint32_t b) { return pts[a][axis] < pts[b][axis]; });
    const double split = pts[order_[mid]][axis];
    const auto left = build(pts, lo, mid);
    const auto right = build(pts, mid, hi);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::int32_t id, const std::array<double, 3>& q, double& best,
              std::uint32_t& best_idx) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t k = node.begin; k < node.end; ++k) {
        const double dx = coords_[3 * k] - q[0];
        const double dy = coords_[3 * k + 1] - q[1];
        const double dz = coords_[3 * k + 2] - q[2];
        const double d2 = dx * dx + dy * dy + dz * dz;
        const std::uint32_t idx = order_[k];
        if (d2 < best || (d2 == best && idx < best_idx)) {
          best = d2;
          best_idx = idx;
        }
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const auto near = diff < 0 ? node.left : node.right;
    const auto far = diff < 0 ? node.right : node.left;
    search(near, q, best, best_idx);
    // Inclusive bound: a far-side point at exactly `best` can still win on index.
    if (diff * diff <= best) search(far, q, best, best_idx);
  }

  void radius_rec(std::int32_t id, const std::array<double, 3>& q, double r2,
                  std::vector<std::size_t>& out) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t k = node.begin; k < node.end; ++k) {
        const double dx = coords_[3 * k] - q[0];
        const double dy = coords_[3 * k + 1] - q[1];
        const double dz = coords_[3 * k + 2] - q[2];
        if (dx * dx + dy * dy + dz * dz <= r2) out.push_back(order_[k]);
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const auto near = diff < 0 ? node.left : node.right;
    const auto far = diff < 0 ? node.right : node.left;
    radius_rec(near, q, r2, out);
    if (diff * diff <= r2) radius_rec(far, q, r2, out);
  }

  std::size_t leaf_size_;
  std::vector<Node> nodes_;
  std::vector<std::uint32_t> order_;
  std::vector<double> coords_;
};

inline NearestNeighborIndex build_index(const PointCloud& cloud) {
  return NearestNeighborIndex(cloud);
}

inline Neighbor nn_distance(const Point3& p, const NearestNeighborIndex& index) {
  return index.nearest(p);
}

}  // namespace sceneflow
