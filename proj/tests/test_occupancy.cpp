#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"

using namespace sceneflow;

namespace {

std::vector<VoxelKey> walked(const Vec3& a, const Vec3& b) {
  std::vector<VoxelKey> out;
  detail::walk_segment(a, b, [&](std::int32_t x, std::int32_t y, std::int32_t z) {
    out.push_back({x, y, z});
  });
  return out;
}

// Points on an axis-aligned rectangle x = const, y/z in the given ranges.
std::vector<Point3> face(double x, double y0, double y1, double z0, double z1, double step) {
  std::vector<Point3> out;
  for (double y = y0; y <= y1 + 1e-9; y += step)
    for (double z = z0; z <= z1 + 1e-9; z += step) out.emplace_back(x, y, z);
  return out;
}

std::vector<Point3> concat(std::vector<Point3> a, const std::vector<Point3>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

SceneSpec small_moving_scene() {
  SceneSpec s;
  s.ground_half_extent = 25.0;
  s.frame_count = 6;
  s.seed = 11;
  s.sensor.channels = 16;
  s.sensor.azimuth_resolution_deg = 1.0;
  s.ego.velocity = Vec3(4.0, 0.0, 0.0);
  BoxObject car;
  car.center = Vec3(8.0, 4.0, 0.8);
  car.size = Vec3(4.2, 1.8, 1.6);
  car.surface = SurfaceClass::foreground;
  car.velocity = Vec3(-6.0, 0.0, 0.0);
  s.boxes.push_back(car);
  BoxObject wall;
  wall.center = Vec3(5.0, -7.0, 2.0);
  wall.size = Vec3(20.0, 0.5, 4.0);
  s.boxes.push_back(wall);
  return s;
}

}  // namespace

TEST(Walk, MatchesSlabOracleOnRandomSegments) {
  oracle::Random r(21);
  for (int rep = 0; rep < 300; ++rep) {
    const Vec3 a = r.vec(20.0), b = a + r.vec(15.0);
    auto got = walked(a, b);
    for (std::size_t k = 1; k < got.size(); ++k) {
      const int step = std::abs(got[k].x - got[k - 1].x) + std::abs(got[k].y - got[k - 1].y) +
                       std::abs(got[k].z - got[k - 1].z);
      EXPECT_EQ(step, 1);
    }
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, oracle::rasterize_segment(a, b)) << "segment " << rep;
  }
}

TEST(Walk, DegenerateSegmentVisitsOneCell) {
  const auto v = walked(Vec3(1.5, 2.5, -0.5), Vec3(1.5, 2.5, -0.5));
  ASSERT_EQ(v.size(), 1U);
  EXPECT_EQ(v[0], (VoxelKey{1, 2, -1}));
}

TEST(Integrate, SinglePointAlongAxis) {
  ClassifierConfig cfg;
  OccupancyGrid grid(cfg.voxel_size);
  const std::vector<Point3> pts{Point3(10, 0, 0)};
  integrate_frame(grid, pts, Point3::Zero(), cfg);
  // Ray carved up to 9.8 m; voxel 49 (9.8..10.0) is inside the endpoint padding.
  EXPECT_EQ(grid.free_count(), 49U);
  for (int x = 0; x < 49; ++x) {
    const auto e = grid.evidence({x, 0, 0});
    ASSERT_TRUE(e.has_value());
    EXPECT_TRUE(e->ever_free);
    EXPECT_FALSE(e->ever_hit);
  }
  const auto end = grid.evidence({50, 0, 0});
  ASSERT_TRUE(end.has_value());
  EXPECT_TRUE(end->ever_hit);
  EXPECT_FALSE(end->ever_free);
  EXPECT_EQ(grid.voxel_count(), 49U + 27U);
}

TEST(Integrate, FreeSetMatchesRasterizationOracle) {
  oracle::Random r(22);
  ClassifierConfig cfg;
  cfg.hit_padding = 0;
  const double inv = 1.0 / cfg.voxel_size;
  for (int rep = 0; rep < 40; ++rep) {
    const Point3 origin = r.vec(3.0);
    std::vector<Point3> pts;
    for (int k = 0; k < 5; ++k) pts.push_back(origin + r.vec(1.0).normalized() * r.uniform(1.0, 30.0));
    OccupancyGrid grid(cfg.voxel_size);
    integrate_frame(grid, pts, origin, cfg);

    std::set<VoxelKey> hit, expect;
    for (const auto& p : pts) hit.insert(grid.key_of(p));
    for (const auto& p : pts) {
      const Vec3 ray = p - origin;
      const Vec3 end = origin + ray * ((ray.norm() - cfg.free_margin) / ray.norm());
      for (const auto& k : oracle::rasterize_segment(origin * inv, end * inv))
        if (!hit.count(k)) expect.insert(k);
    }
    EXPECT_EQ(grid.free_count(), expect.size());
    for (const auto& k : expect) {
      const auto e = grid.evidence(k);
      ASSERT_TRUE(e.has_value());
      EXPECT_TRUE(e->ever_free);
    }
  }
}

TEST(Integrate, EmptyCloudLeavesGridUnchanged) {
  ClassifierConfig cfg;
  OccupancyGrid grid(cfg.voxel_size);
  integrate_frame(grid, std::vector<Point3>{}, Point3::Zero(), cfg);
  EXPECT_EQ(grid.voxel_count(), 0U);
  EXPECT_EQ(grid.block_count(), 0U);
}

TEST(Integrate, OutOfRangeAndOriginPointsSkipped) {
  ClassifierConfig cfg;
  cfg.max_range = 5.0;
  OccupancyGrid grid(cfg.voxel_size);
  integrate_frame(grid, std::vector<Point3>{Point3(20, 0, 0)}, Point3::Zero(), cfg);
  EXPECT_EQ(grid.voxel_count(), 0U);
  integrate_frame(grid, std::vector<Point3>{Point3(0.01, 0.01, 0.01)}, Point3::Zero(), cfg);
  EXPECT_EQ(grid.free_count(), 0U);
  EXPECT_GT(grid.voxel_count(), 0U);
}

TEST(Integrate, VoxelSizeMustMatchConfig) {
  ClassifierConfig cfg;
  OccupancyGrid grid(0.5);
  EXPECT_THROW(integrate_frame(grid, std::vector<Point3>{Point3(1, 1, 1)}, Point3::Zero(), cfg),
               std::invalid_argument);
}

TEST(Integrate, SameFrameTwiceIsIdempotent) {
  const auto frames = generate(small_moving_scene());
  ClassifierConfig cfg;
  OccupancyGrid once(cfg.voxel_size), twice(cfg.voxel_size);
  const auto world = apply_transform(frames[0].cloud, frames[0].pose);
  integrate_frame(once, world.points(), frames[0].pose.translation(), cfg);
  integrate_frame(twice, world.points(), frames[0].pose.translation(), cfg);
  integrate_frame(twice, world.points(), frames[0].pose.translation(), cfg);
  EXPECT_TRUE(once.same_evidence(twice));
}

TEST(Classify, TwoFrameBoxScene) {
  const auto wall = face(20.05, -3.0, 3.0, -1.0, 1.0, 0.1);
  const auto box0 = face(5.05, -0.5, 0.5, -0.5, 0.5, 0.1);
  const auto box1 = face(6.05, -0.5, 0.5, -0.5, 0.5, 0.1);
  // Drop wall points hidden behind the box in each frame.
  const auto visible = [&](double box_x) {
    std::vector<Point3> out;
    for (const auto& p : wall) {
      const double s = box_x / p.x();
      if (std::abs(p.y() * s) > 0.55 || std::abs(p.z() * s) > 0.55) out.push_back(p);
    }
    return out;
  };
  const PointCloud f0(concat(box0, visible(5.05))), f1(concat(box1, visible(6.05)));
  const std::vector<PointCloud> clouds{f0, f1};
  const std::vector<RigidTransform> poses(2, RigidTransform::identity());
  const auto res = classify_sequence(clouds, poses, ClassifierConfig{});
  for (std::size_t i = 0; i < box0.size(); ++i) EXPECT_TRUE(res.frames[0].dynamic[i]) << i;
  for (std::size_t i = box0.size(); i < f0.size(); ++i) EXPECT_FALSE(res.frames[0].dynamic[i]);
  for (std::size_t i = box1.size(); i < f1.size(); ++i) EXPECT_FALSE(res.frames[1].dynamic[i]);
}

TEST(Classify, ObjectThatStopsStaysDynamic) {
  // Approaches from x = 8 to x = 6 and then parks for three frames.
  std::vector<PointCloud> clouds;
  for (double x : {8.05, 7.05, 6.05, 6.05, 6.05, 6.05}) clouds.emplace_back(face(x, -0.5, 0.5, -0.5, 0.5, 0.1));
  const std::vector<RigidTransform> poses(clouds.size(), RigidTransform::identity());
  const auto res = classify_sequence(clouds, poses, ClassifierConfig{});
  for (std::size_t f = 3; f < clouds.size(); ++f)
    EXPECT_EQ(count_set(res.frames[f].dynamic), clouds[f].size()) << "frame " << f;
}

TEST(Classify, StaticSceneIsAllStatic) {
  SceneSpec s;
  s.frame_count = 4;
  s.sensor.random_phase = false;
  s.sensor.azimuth_resolution_deg = 1.0;
  for (int k = 0; k < 4; ++k) {
    BoxObject b;
    b.center = Vec3(10.0 * std::cos(k * 1.6), 10.0 * std::sin(k * 1.6), 0.0);
    b.size = Vec3(3.0, 3.0, 4.0);
    b.yaw = 0.3 * k;
    s.boxes.push_back(b);
  }
  const auto frames = generate(s);
  std::vector<PointCloud> clouds;
  std::vector<RigidTransform> poses;
  for (const auto& f : frames) {
    clouds.push_back(f.cloud);
    poses.push_back(f.pose);
  }
  const auto res = classify_sequence(clouds, poses, ClassifierConfig{});
  for (const auto& c : res.frames) EXPECT_EQ(count_set(c.dynamic), 0U);
}

TEST(Classify, UnobservedPointsAreStaticAndCounted) {
  ClassifierConfig cfg;
  OccupancyGrid grid(cfg.voxel_size);
  integrate_frame(grid, std::vector<Point3>{Point3(10, 0, 0)}, Point3::Zero(), cfg);
  const std::vector<Point3> query{Point3(5, 0, 0), Point3(100, 100, 100), Point3(10, 0, 0)};
  const auto c = classify(grid, query);
  EXPECT_EQ(c.dynamic, (PointMask{1, 0, 0}));
  EXPECT_EQ(c.unobserved, 1U);
}

TEST(Classify, MonotoneInFrames) {
  const auto frames = generate(small_moving_scene());
  ClassifierConfig cfg;
  OccupancyGrid grid(cfg.voxel_size);
  std::vector<PointCloud> world;
  for (const auto& f : frames) world.push_back(apply_transform(f.cloud, f.pose));
  std::vector<PointMask> prev(frames.size());
  for (std::size_t m = 0; m < frames.size(); ++m) {
    integrate_frame(grid, world[m].points(), frames[m].pose.translation(), cfg);
    for (std::size_t k = 0; k < frames.size(); ++k) {
      const auto now = classify(grid, world[k]).dynamic;
      if (!prev[k].empty()) {
        for (std::size_t i = 0; i < now.size(); ++i) EXPECT_TRUE(!prev[k][i] || now[i]);
      }
      prev[k] = now;
    }
  }
  std::size_t dyn = 0;
  for (const auto& p : prev) dyn += count_set(p);
  EXPECT_GT(dyn, 0U);
}

TEST(Classify, FrameOrderInvariant) {
  const auto frames = generate(small_moving_scene());
  std::vector<PointCloud> clouds;
  std::vector<RigidTransform> poses;
  for (const auto& f : frames) {
    clouds.push_back(f.cloud);
    poses.push_back(f.pose);
  }
  const ClassifierConfig cfg;
  const auto forward = integrate_sequence(clouds, poses, cfg);
  std::vector<std::size_t> order(clouds.size());
  std::iota(order.begin(), order.end(), 0);
  oracle::Random r(23);
  for (int rep = 0; rep < 3; ++rep) {
    std::shuffle(order.begin(), order.end(), r.engine());
    std::vector<PointCloud> c2;
    std::vector<RigidTransform> p2;
    for (auto k : order) {
      c2.push_back(clouds[k]);
      p2.push_back(poses[k]);
    }
    const auto shuffled = integrate_sequence(c2, p2, cfg);
    EXPECT_TRUE(forward.same_evidence(shuffled));
    const auto a = classify_sequence(forward, clouds, poses);
    const auto b = classify_sequence(shuffled, clouds, poses);
    for (std::size_t k = 0; k < clouds.size(); ++k) EXPECT_EQ(a[k].dynamic, b[k].dynamic);
  }
}

TEST(Classify, DisjointExhaustive) {
  const auto frames = generate(small_moving_scene());
  std::vector<LabeledFrame> copy(frames.begin(), frames.end());
  const auto scene = classify_scene(copy, ClassifierConfig{});
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& m = scene.masks[k].dynamic;
    ASSERT_EQ(m.size(), frames[k].cloud.size());
    for (auto v : m) EXPECT_TRUE(v == 0 || v == 1);
  }
}
