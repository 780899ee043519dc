#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sceneflow {

using Point3 = Eigen::Vector3d;
using Vec3 = Eigen::Vector3d;

/// Per-point 3D vectors aligned by index with a source cloud (meters/frame).
using FlowField = std::vector<Vec3>;

/// Per-point boolean, aligned by index with a cloud. Stored as bytes so
/// spans over it are cheap and the on-disk layout is trivial.
using PointMask = std::vector<std::uint8_t>;

inline bool is_finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

/// Ordered, index-addressable set of points in a named frame.
/// Derived attributes (masks, cluster ids) live in parallel arrays.
class PointCloud {
 public:
  PointCloud() = default;

  explicit PointCloud(std::vector<Point3> points, std::string frame_id = "sensor",
                      double timestamp = 0.0)
      : points_(std::move(points)), frame_id_(std::move(frame_id)), timestamp_(timestamp) {
    for (const auto& p : points_) {
      if (!is_finite(p)) throw std::invalid_argument("non-finite point coordinate");
    }
  }

  [[nodiscard]] std::size_t size() const { return points_.size(); }
  [[nodiscard]] bool empty() const { return points_.empty(); }
  [[nodiscard]] const Point3& operator[](std::size_t i) const { return points_[i]; }
  [[nodiscard]] std::span<const Point3> points() const { return points_; }
  [[nodiscard]] const std::string& frame_id() const { return frame_id_; }
  [[nodiscard]] double timestamp() const { return timestamp_; }

  auto begin() const { return points_.begin(); }
  auto end() const { return points_.end(); }

  /// Sub-cloud of the points whose mask entry is set, in original order.
  [[nodiscard]] PointCloud select(std::span<const std::uint8_t> mask) const {
    std::vector<Point3> out;
    for (std::size_t i = 0; i < points_.size(); ++i)
      if (mask[i]) out.push_back(points_[i]);
    return PointCloud(std::move(out), frame_id_, timestamp_);
  }

  [[nodiscard]] PointCloud select(std::span<const std::size_t> indices) const {
    std::vector<Point3> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(points_.at(i));
    return PointCloud(std::move(out), frame_id_, timestamp_);
  }

 private:
  std::vector<Point3> points_;
  std::string frame_id_ = "sensor";
  double timestamp_ = 0.0;
};

/// Element of SE(3): x -> R x + t.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Eigen::Matrix3d::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Eigen::Matrix3d& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!is_rotation(rotation_, 1e-9)) throw std::invalid_argument("rotation is not orthonormal");
  }

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) {
    return {Eigen::Matrix3d::Identity(), t};
  }
  /// Rotation about +z by `yaw` radians followed by translation `t`.
  static RigidTransform from_yaw(double yaw, const Vec3& t = Vec3::Zero()) {
    return {Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), t};
  }

  /// Projects an approximately orthonormal matrix onto SO(3) (closest rotation, SVD).
  static Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Eigen::Matrix3d u = svd.matrixU();
      u.col(2) *= -1.0;
      r = u * svd.matrixV().transpose();
    }
    return r;
  }

  static bool is_rotation(const Eigen::Matrix3d& r, double tol) {
    if (!r.allFinite()) return false;
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }

  [[nodiscard]] const Eigen::Matrix3d& rotation() const { return rotation_; }
  [[nodiscard]] const Vec3& translation() const { return translation_; }

  [[nodiscard]] Point3 apply(const Point3& p) const { return rotation_ * p + translation_; }
  Point3 operator*(const Point3& p) const { return apply(p); }

  /// (a * b)(x) = a(b(x))
  RigidTransform operator*(const RigidTransform& b) const {
    RigidTransform out;
    out.rotation_ = rotation_ * b.rotation_;
    out.translation_ = rotation_ * b.translation_ + translation_;
    return out;
  }

  [[nodiscard]] RigidTransform inverse() const {
    RigidTransform out;
    out.rotation_ = rotation_.transpose();
    out.translation_ = -(out.rotation_ * translation_);
    return out;
  }

 private:
  Eigen::Matrix3d rotation_;
  Vec3 translation_;
};

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T) {
  std::vector<Point3> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud) out.push_back(T.apply(p));
  return PointCloud(std::move(out), cloud.frame_id(), cloud.timestamp());
}

/// Flow induced on every point by the sensor's own motion: (R p + t) - p.
inline FlowField ego_flow(const PointCloud& cloud, const RigidTransform& T_ego) {
  FlowField flow;
  flow.reserve(cloud.size());
  for (const auto& p : cloud) flow.push_back(T_ego.apply(p) - p);
  return flow;
}

inline std::size_t count_set(std::span<const std::uint8_t> mask) {
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  return n;
}

}  // namespace sceneflow
