#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "sceneflow/geometry.hpp"

namespace sceneflow {

enum class SurfaceClass : std::uint8_t { ground, background, foreground };

/// Seeded RNG with platform-independent uniform/normal draws.
class SceneRng {
 public:
  explicit SceneRng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    // Box-Muller; the second variate is discarded to keep the stream simple.
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Oriented box; moves rigidly with constant world velocity and yaw rate
/// about its own centre.
struct BoxObject {
  Vec3 center = Vec3::Zero();  // world position at t = 0
  Vec3 size = Vec3::Ones();    // extent along local x (length), y (width), z (height)
  double yaw = 0.0;
  SurfaceClass surface = SurfaceClass::background;
  Vec3 velocity = Vec3::Zero();  // m/s
  double yaw_rate = 0.0;         // rad/s
  double spacing = 0.0;          // surface-sampling override; 0 uses the scene default

  [[nodiscard]] RigidTransform pose_at(double t) const {
    return RigidTransform::from_yaw(yaw + yaw_rate * t, center + velocity * t);
  }
  [[nodiscard]] bool moving() const { return velocity.squaredNorm() > 0.0 || yaw_rate != 0.0; }
};

/// Static vertical cylinder standing on the ground.
struct PoleObject {
  double x = 0.0, y = 0.0;
  double radius = 0.1;
  double height = 4.0;
};

struct SensorModel {
  int channels = 32;
  double elevation_min_deg = -24.0;
  double elevation_max_deg = 8.0;
  double azimuth_resolution_deg = 0.4;
  double max_range = 70.0;
  double range_noise = 0.0;  // m, Gaussian sigma along the ray
  // true: ray-cast LiDAR returns (occlusion, independent resampling per frame).
  // false: surfaces sampled once and carried rigidly, so frames correspond 1:1.
  bool occlusion = true;
  bool random_phase = true;  // per-frame azimuth offset in ray-cast mode
};

/// Sensor pose over time: constant world velocity and yaw rate.
struct EgoMotion {
  RigidTransform start = RigidTransform::from_translation(Vec3(0, 0, 1.8));
  Vec3 velocity = Vec3::Zero();
  double yaw_rate = 0.0;

  [[nodiscard]] RigidTransform pose_at(double t) const {
    const Eigen::Matrix3d r =
        Eigen::AngleAxisd(yaw_rate * t, Vec3::UnitZ()).toRotationMatrix() * start.rotation();
    return {r, start.translation() + velocity * t};
  }
};

struct SceneSpec {
  std::vector<BoxObject> boxes;
  std::vector<PoleObject> poles;
  double ground_half_extent = 0.0;  // 0: no ground plane
  EgoMotion ego;
  SensorModel sensor;
  std::size_t frame_count = 10;
  double frequency = 10.0;  // Hz
  std::uint64_t seed = 0;
  double surface_spacing = 0.1;  // m, surface-sampling mode
  double surface_jitter = 0.35;  // fraction of the spacing
  double ground_spacing = 0.5;   // m, surface-sampling mode
  double dynamic_threshold = 0.05;

  void validate() const {
    if (frame_count == 0) throw std::invalid_argument("scene needs at least one frame");
    if (!(frequency > 0.0)) throw std::invalid_argument("frequency must be > 0");
    if (!(surface_spacing > 0.0) || !(ground_spacing > 0.0))
      throw std::invalid_argument("sample spacing must be > 0");
    if (surface_jitter < 0.0 || surface_jitter > 0.5)
      throw std::invalid_argument("surface_jitter must lie in [0, 0.5]");
    if (sensor.channels < 1 || !(sensor.azimuth_resolution_deg > 0.0) || !(sensor.max_range > 0.0))
      throw std::invalid_argument("invalid sensor model");
    for (const auto& b : boxes) {
      if ((b.size.array() <= 0.0).any()) throw std::invalid_argument("box size must be > 0");
      if (b.spacing < 0.0) throw std::invalid_argument("box spacing must be >= 0");
      if (b.surface == SurfaceClass::ground)
        throw std::invalid_argument("boxes cannot carry the ground class");
    }
    for (const auto& p : poles)
      if (!(p.radius > 0.0) || !(p.height > 0.0)) throw std::invalid_argument("invalid pole");
  }
};

/// One generated frame, expressed in its sensor frame.
struct LabeledFrame {
  PointCloud cloud;
  FlowField gt_flow;  // to the next frame, in next-frame sensor coordinates minus p
  PointMask gt_dynamic;
  PointMask foreground;
  PointMask ground;
  std::vector<std::int32_t> object_id;  // box index, boxes+k for pole k, -1 ground
  RigidTransform pose;                  // sensor -> world
  RigidTransform ego_to_next;           // this frame -> next frame (T_{t,t+1})
};

namespace detail {

struct Emission {
  Point3 world;
  std::int32_t object;
};

class SceneSampler {
 public:
  explicit SceneSampler(const SceneSpec& spec) : spec_(spec) {}

  [[nodiscard]] std::int32_t ground_id() const { return -1; }
  [[nodiscard]] std::int32_t pole_id(std::size_t k) const {
    return static_cast<std::int32_t>(spec_.boxes.size() + k);
  }

  [[nodiscard]] SurfaceClass surface_of(std::int32_t id) const {
    if (id < 0) return SurfaceClass::ground;
    if (static_cast<std::size_t>(id) < spec_.boxes.size()) return spec_.boxes[id].surface;
    return SurfaceClass::background;
  }

  /// Rigid motion of object `id` between times t0 and t1 (world -> world).
  [[nodiscard]] RigidTransform object_motion(std::int32_t id, double t0, double t1) const {
    if (id < 0 || static_cast<std::size_t>(id) >= spec_.boxes.size()) return {};
    const auto& b = spec_.boxes[id];
    if (!b.moving()) return {};
    return b.pose_at(t1) * b.pose_at(t0).inverse();
  }

  // Ray-cast returns for one sensor pose.
  std::vector<Emission> raycast(const RigidTransform& sensor_pose, double t, SceneRng& rng) const {
    const auto& s = spec_.sensor;
    std::vector<RigidTransform> inv_pose;
    for (const auto& b : spec_.boxes) inv_pose.push_back(b.pose_at(t).inverse());
    const Vec3 o = sensor_pose.translation();
    const int n_az = static_cast<int>(std::lround(360.0 / s.azimuth_resolution_deg));
    const double phase = s.random_phase ? rng.uniform() * s.azimuth_resolution_deg : 0.0;
    std::vector<Emission> out;
    out.reserve(static_cast<std::size_t>(n_az) * s.channels / 2);
    for (int c = 0; c < s.channels; ++c) {
      const double el_deg =
          s.channels == 1 ? s.elevation_min_deg
                          : s.elevation_min_deg + (s.elevation_max_deg - s.elevation_min_deg) *
                                                      c / (s.channels - 1);
      const double el = el_deg * std::numbers::pi / 180.0;
      for (int a = 0; a < n_az; ++a) {
        const double az = (a * s.azimuth_resolution_deg + phase) * std::numbers::pi / 180.0;
        const Vec3 dir_s(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
        const Vec3 d = sensor_pose.rotation() * dir_s;
        double best = s.max_range;
        std::int32_t hit = std::numeric_limits<std::int32_t>::min();
        if (spec_.ground_half_extent > 0.0 && d.z() < 0.0) {
          const double tg = -o.z() / d.z();
          const Vec3 p = o + tg * d;
          if (tg > 0.0 && tg < best && std::abs(p.x()) <= spec_.ground_half_extent &&
              std::abs(p.y()) <= spec_.ground_half_extent) {
            best = tg;
            hit = ground_id();
          }
        }
        for (std::size_t b = 0; b < spec_.boxes.size(); ++b) {
          const auto tb = ray_box(inv_pose[b], spec_.boxes[b].size * 0.5, o, d);
          if (tb && *tb < best) {
            best = *tb;
            hit = static_cast<std::int32_t>(b);
          }
        }
        for (std::size_t k = 0; k < spec_.poles.size(); ++k) {
          const auto tp = ray_pole(spec_.poles[k], o, d);
          if (tp && *tp < best) {
            best = *tp;
            hit = pole_id(k);
          }
        }
        if (hit == std::numeric_limits<std::int32_t>::min()) continue;
        double range = best;
        if (s.range_noise > 0.0) range += s.range_noise * rng.normal();
        if (range <= 0.0) continue;
        out.push_back({o + range * d, hit});
      }
    }
    return out;
  }

  // Object-local surface samples (ground and poles in world coordinates).
  std::vector<Emission> surface_samples(SceneRng& rng) const {
    std::vector<Emission> out;
    const double jit = spec_.surface_jitter;
    for (std::size_t b = 0; b < spec_.boxes.size(); ++b) {
      const auto& box = spec_.boxes[b];
      const double s = box.spacing > 0.0 ? box.spacing : spec_.surface_spacing;
      const Vec3 h = box.size * 0.5;
      // Five faces: the underside is never visible to a ground-level sensor.
      for (int axis = 0; axis < 3; ++axis) {
        for (int sign = -1; sign <= 1; sign += 2) {
          if (axis == 2 && sign < 0) continue;
          const int u = (axis + 1) % 3, v = (axis + 2) % 3;
          grid_face(rng, s, jit, 2 * h[u], 2 * h[v], [&](double a, double c) {
            Vec3 p;
            p[axis] = sign * h[axis];
            p[u] = a - h[u];
            p[v] = c - h[v];
            out.push_back({p, static_cast<std::int32_t>(b)});
          });
        }
      }
    }
    for (std::size_t k = 0; k < spec_.poles.size(); ++k) {
      const auto& pole = spec_.poles[k];
      const double s = spec_.surface_spacing;
      const double circ = 2.0 * std::numbers::pi * pole.radius;
      grid_face(rng, s, jit, circ, pole.height, [&](double a, double z) {
        const double ang = a / pole.radius;
        out.push_back({Vec3(pole.x + pole.radius * std::cos(ang),
                            pole.y + pole.radius * std::sin(ang), z),
                       pole_id(k)});
      });
    }
    if (spec_.ground_half_extent > 0.0) {
      const double e = spec_.ground_half_extent;
      grid_face(rng, spec_.ground_spacing, jit, 2 * e, 2 * e, [&](double a, double c) {
        out.push_back({Vec3(a - e, c - e, 0.0), ground_id()});
      });
    }
    return out;
  }

 private:
  template <typename Emit>
  static void grid_face(SceneRng& rng, double s, double jit, double lu, double lv, Emit&& emit) {
    const auto nu = std::max<long>(1, std::lround(std::floor(lu / s + 1e-9)));
    const auto nv = std::max<long>(1, std::lround(std::floor(lv / s + 1e-9)));
    const double su = lu / nu, sv = lv / nv;
    for (long i = 0; i < nu; ++i)
      for (long j = 0; j < nv; ++j) {
        double a = (i + 0.5) * su, c = (j + 0.5) * sv;
        if (jit > 0.0) {
          a += rng.uniform(-jit, jit) * su;
          c += rng.uniform(-jit, jit) * sv;
        }
        emit(a, c);
      }
  }

  static std::optional<double> ray_box(const RigidTransform& world_to_local, const Vec3& half,
                                       const Vec3& o, const Vec3& d) {
    const Vec3 ol = world_to_local.apply(o);
    const Vec3 dl = world_to_local.rotation() * d;
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
      if (dl[i] == 0.0) {
        if (std::abs(ol[i]) > half[i]) return std::nullopt;
        continue;
      }
      double a = (-half[i] - ol[i]) / dl[i];
      double b = (half[i] - ol[i]) / dl[i];
      if (a > b) std::swap(a, b);
      t0 = std::max(t0, a);
      t1 = std::min(t1, b);
    }
    if (t0 > t1 || t0 <= 1e-9) return std::nullopt;
    return t0;
  }

  static std::optional<double> ray_pole(const PoleObject& p, const Vec3& o, const Vec3& d) {
    const double ox = o.x() - p.x, oy = o.y() - p.y;
    const double a = d.x() * d.x() + d.y() * d.y();
    if (a <= 0.0) return std::nullopt;
    const double b = 2.0 * (ox * d.x() + oy * d.y());
    const double c = ox * ox + oy * oy - p.radius * p.radius;
    const double disc = b * b - 4 * a * c;
    if (disc < 0.0 || c <= 0.0) return std::nullopt;
    const double t = (-b - std::sqrt(disc)) / (2 * a);
    if (t <= 1e-9) return std::nullopt;
    const double z = o.z() + t * d.z();
    if (z < 0.0 || z > p.height) return std::nullopt;
    return t;
  }

  const SceneSpec& spec_;
};

}  // namespace detail

/// Generates every frame of the scene with exact labels. Deterministic given
/// the scene spec (seed included).
inline std::vector<LabeledFrame> generate(const SceneSpec& spec) {
  spec.validate();
  const detail::SceneSampler sampler(spec);
  SceneRng rng(spec.seed);
  const double dt = 1.0 / spec.frequency;

  std::vector<detail::Emission> local;
  if (!spec.sensor.occlusion) local = sampler.surface_samples(rng);

  std::vector<LabeledFrame> frames;
  frames.reserve(spec.frame_count);
  for (std::size_t k = 0; k < spec.frame_count; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double t_next = static_cast<double>(k + 1) * dt;
    const auto pose = spec.ego.pose_at(t);
    const auto pose_next = spec.ego.pose_at(t_next);
    const auto to_sensor = pose.inverse();
    const auto next_to_sensor = pose_next.inverse();

    std::vector<detail::Emission> world;
    if (spec.sensor.occlusion) {
      world = sampler.raycast(pose, t, rng);
    } else {
      world.reserve(local.size());
      for (const auto& e : local) {
        Point3 w = e.world;
        const auto id = e.object;
        if (id >= 0 && static_cast<std::size_t>(id) < spec.boxes.size())
          w = spec.boxes[id].pose_at(t).apply(w);
        if ((w - pose.translation()).norm() > spec.sensor.max_range) continue;
        world.push_back({w, id});
      }
    }

    LabeledFrame f;
    f.pose = pose;
    f.ego_to_next = next_to_sensor * pose;
    std::vector<Point3> pts;
    pts.reserve(world.size());
    for (const auto& e : world) {
      const Point3 p = to_sensor.apply(e.world);
      const Point3 w_next = sampler.object_motion(e.object, t, t_next).apply(e.world);
      const Vec3 flow = next_to_sensor.apply(w_next) - p;
      const Vec3 ego = f.ego_to_next.apply(p) - p;
      const auto cls = sampler.surface_of(e.object);
      pts.push_back(p);
      f.gt_flow.push_back(flow);
      f.gt_dynamic.push_back((flow - ego).norm() > spec.dynamic_threshold ? 1 : 0);
      f.foreground.push_back(cls == SurfaceClass::foreground ? 1 : 0);
      f.ground.push_back(cls == SurfaceClass::ground ? 1 : 0);
      f.object_id.push_back(e.object);
    }
    f.cloud = PointCloud(std::move(pts), "sensor", t);
    frames.push_back(std::move(f));
  }
  return frames;
}

/// A long rigid box sliding along its own axis by less than its length per
/// frame, sampled on an axis-aligned lattice whose pitch divides the
/// per-frame translation. Interior surface points have an exact copy in the
/// next frame, so nearest-neighbour matching sees zero motion there.
inline SceneSpec fig3_spec() {
  SceneSpec s;
  s.sensor.occlusion = false;
  s.sensor.max_range = 70.0;
  s.surface_spacing = 0.1;
  s.surface_jitter = 0.0;
  s.frame_count = 3;
  s.frequency = 10.0;
  s.seed = 3;
  BoxObject truck;
  truck.center = Vec3(0.0, 6.0, 1.5);
  truck.size = Vec3(5.0, 1.5, 1.8);
  truck.spacing = 0.025;  // fine pitch keeps lattice-induced local minima small
  truck.surface = SurfaceClass::foreground;
  truck.velocity = Vec3(10.0, 0.0, 0.0);  // 1 m per frame at 10 Hz
  s.boxes.push_back(truck);
  BoxObject wall;
  wall.center = Vec3(0.0, 14.0, 2.0);
  wall.size = Vec3(24.0, 0.4, 4.0);
  wall.spacing = 0.2;
  s.boxes.push_back(wall);
  return s;
}

inline std::vector<LabeledFrame> fig3_scenario() { return generate(fig3_spec()); }

/// Street scene `index` of the fixed evaluation suite: buildings, poles,
/// parked cars, moving traffic and pedestrians around a driving (or stopped)
/// ego vehicle, observed by a 32-channel ray-cast LiDAR.
inline SceneSpec suite_scene(std::size_t index, std::size_t frames = 20) {
  SceneRng rng(0x5EF10ULL + 7919ULL * index);
  SceneSpec s;
  s.seed = 1000 + index;
  s.frame_count = frames;
  s.ground_half_extent = 90.0;
  s.sensor.range_noise = 0.01;

  const double street_half = rng.uniform(8.0, 11.0);
  const double ego_speed = (index % 3 == 0) ? 0.0 : rng.uniform(3.0, 9.0);
  s.ego.start = RigidTransform::from_translation(Vec3(0.0, -1.8, 1.8));
  s.ego.velocity = Vec3(ego_speed, 0.0, 0.0);

  // Building frontage on both sides, with gaps between blocks.
  for (int side = -1; side <= 1; side += 2) {
    double x = -75.0;
    while (x < 90.0) {
      const double len = rng.uniform(12.0, 30.0);
      const double depth = rng.uniform(6.0, 12.0);
      BoxObject b;
      b.size = Vec3(len, depth, rng.uniform(6.0, 14.0));
      const double setback = rng.uniform(0.0, 4.0);
      b.center = Vec3(x + len / 2, side * (street_half + 2.5 + setback + depth / 2), b.size.z() / 2);
      b.yaw = rng.uniform(-0.08, 0.08);
      b.surface = SurfaceClass::background;
      s.boxes.push_back(b);
      x += len + rng.uniform(2.0, 6.0);
    }
  }
  // Poles along the sidewalks.
  for (int side = -1; side <= 1; side += 2)
    for (double x = -60.0 + rng.uniform(0.0, 8.0); x < 80.0; x += rng.uniform(10.0, 16.0))
      s.poles.push_back({x, side * (street_half + 1.0), rng.uniform(0.1, 0.2), rng.uniform(3.0, 6.0)});

  // Parked cars in the curb lanes.
  const int parked = 3 + static_cast<int>(rng.uniform() * 4);
  for (int k = 0; k < parked; ++k) {
    BoxObject car;
    const int side = (k % 2 == 0) ? 1 : -1;
    car.size = Vec3(rng.uniform(4.2, 4.9), 1.9, rng.uniform(1.4, 1.7));
    car.center = Vec3(-35.0 + 70.0 * (k + rng.uniform(0.1, 0.6)) / parked,
                      side * (street_half - 1.2), car.size.z() / 2 + 0.15);
    car.yaw = rng.uniform(-0.05, 0.05);
    car.surface = SurfaceClass::foreground;
    s.boxes.push_back(car);
  }

  // Traffic: an oncoming lane and a same-direction lane beside the ego.
  const auto add_vehicle = [&](double x, double y, double vx, bool truck) {
    BoxObject v;
    v.size = truck ? Vec3(rng.uniform(8.0, 11.0), 2.5, rng.uniform(2.8, 3.4))
                   : Vec3(rng.uniform(4.3, 4.9), 1.9, rng.uniform(1.4, 1.7));
    v.center = Vec3(x, y, v.size.z() / 2 + 0.15);
    v.velocity = Vec3(vx, 0.0, 0.0);
    v.surface = SurfaceClass::foreground;
    s.boxes.push_back(v);
  };
  add_vehicle(rng.uniform(15.0, 30.0), 1.8, -rng.uniform(6.0, 12.0), index % 2 == 0);
  add_vehicle(rng.uniform(-30.0, -12.0), 1.8, -rng.uniform(5.0, 10.0), false);
  add_vehicle(rng.uniform(10.0, 22.0), -1.8 - 3.6 * (index % 2), ego_speed + rng.uniform(2.0, 5.0),
              index % 2 == 1);
  if (index % 3 != 1) add_vehicle(rng.uniform(-25.0, -10.0), -5.4, rng.uniform(6.0, 11.0), false);

  // Pedestrians walking along the sidewalks.
  const int walkers = 1 + static_cast<int>(rng.uniform() * 2);
  for (int k = 0; k < walkers; ++k) {
    BoxObject p;
    p.size = Vec3(0.5, 0.6, rng.uniform(1.6, 1.9));
    const int side = (k % 2 == 0) ? -1 : 1;
    p.center = Vec3(rng.uniform(-15.0, 25.0), side * (street_half + 1.6), p.size.z() / 2);
    p.velocity = Vec3((rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(1.1, 1.8), 0.0, 0.0);
    p.surface = SurfaceClass::foreground;
    s.boxes.push_back(p);
  }
  return s;
}

}  // namespace sceneflow
