#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "sceneflow/geometry.hpp"

namespace sceneflow {

struct EvalConfig {
  double dynamic_threshold = 0.05;  // m/frame; 0.5 m/s at 10 Hz
  double roi_half_extent = 50.0;    // m; 100 m x 100 m box around the ego

  void validate() const {
    if (!(dynamic_threshold > 0.0)) throw std::invalid_argument("dynamic_threshold must be > 0");
    if (!(roi_half_extent > 0.0)) throw std::invalid_argument("roi_half_extent must be > 0");
  }
};

/// Mean end-point error ||pred - gt||_2 over aligned fields.
inline double epe(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("flow length mismatch");
  if (pred.empty()) throw std::invalid_argument("epe of empty flow");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - gt[i]).norm();
  return sum / static_cast<double>(pred.size());
}

struct BucketEpe {
  double epe = 0.0;
  std::size_t count = 0;
};

struct EpeReport {
  double epe_3way = 0.0;
  BucketEpe fd, fs, bs;
  std::size_t outside_roi = 0;
  std::size_t background_dynamic = 0;  // excluded: not part of the three buckets
};

enum class Bucket { foreground_dynamic, foreground_static, background_static, excluded };

/// Points, flows and labels for one evaluated frame. `ego_flow` may be empty
/// (treated as zero); motion status is judged on gt - ego.
struct EvalFrame {
  std::span<const Point3> points;
  std::span<const Vec3> pred;
  std::span<const Vec3> gt;
  std::span<const Vec3> ego_flow;
  std::span<const std::uint8_t> foreground;
  Point3 ego_position = Point3::Zero();
};

inline Bucket bucket_of(const Vec3& gt, const Vec3& ego, bool foreground, const EvalConfig& cfg) {
  const bool moving = (gt - ego).norm() > cfg.dynamic_threshold;
  if (foreground) return moving ? Bucket::foreground_dynamic : Bucket::foreground_static;
  return moving ? Bucket::excluded : Bucket::background_static;
}

/// Three-way EPE: unweighted mean of the FD / FS / BS bucket EPEs inside the
/// ROI. Empty buckets are left out of the average.
inline EpeReport epe_three_way(const EvalFrame& f, const EvalConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = f.points.size();
  if (f.pred.size() != n || f.gt.size() != n || f.foreground.size() != n ||
      (!f.ego_flow.empty() && f.ego_flow.size() != n))
    throw std::invalid_argument("flow length mismatch");
  EpeReport r;
  double sum_fd = 0, sum_fs = 0, sum_bs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 rel = f.points[i] - f.ego_position;
    if (std::abs(rel.x()) > cfg.roi_half_extent || std::abs(rel.y()) > cfg.roi_half_extent) {
      ++r.outside_roi;
      continue;
    }
    const Vec3 ego = f.ego_flow.empty() ? Vec3::Zero() : f.ego_flow[i];
    const double err = (f.pred[i] - f.gt[i]).norm();
    switch (bucket_of(f.gt[i], ego, f.foreground[i] != 0, cfg)) {
      case Bucket::foreground_dynamic: sum_fd += err; ++r.fd.count; break;
      case Bucket::foreground_static: sum_fs += err; ++r.fs.count; break;
      case Bucket::background_static: sum_bs += err; ++r.bs.count; break;
      case Bucket::excluded: ++r.background_dynamic; break;
    }
  }
  double total = 0.0;
  int buckets = 0;
  const auto finish = [&](BucketEpe& b, double sum) {
    if (b.count == 0) return;
    b.epe = sum / static_cast<double>(b.count);
    total += b.epe;
    ++buckets;
  };
  finish(r.fd, sum_fd);
  finish(r.fs, sum_fs);
  finish(r.bs, sum_bs);
  if (buckets == 0) throw std::invalid_argument("no evaluable points");
  r.epe_3way = total / buckets;
  return r;
}

}  // namespace sceneflow
