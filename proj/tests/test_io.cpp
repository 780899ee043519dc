#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "sceneflow/io.hpp"

using namespace sceneflow;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("sceneflow_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Values that survive the f32 round trip exactly.
std::vector<Point3> f32_cloud(oracle::Random& r, std::size_t n) {
  std::vector<Point3> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 v = r.vec(60.0);
    out.emplace_back(static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z()));
  }
  return out;
}

std::vector<LabeledFrame> tiny_scene() {
  SceneSpec s;
  s.ground_half_extent = 10.0;
  s.frame_count = 3;
  s.sensor.channels = 8;
  s.sensor.azimuth_resolution_deg = 2.0;
  s.ego.velocity = Vec3(3.0, 0.0, 0.0);
  BoxObject car;
  car.center = Vec3(5.0, 3.0, 0.8);
  car.size = Vec3(4.0, 1.8, 1.5);
  car.surface = SurfaceClass::foreground;
  car.velocity = Vec3(6.0, 0.0, 0.0);
  s.boxes.push_back(car);
  return generate(s);
}

}  // namespace

TEST(FrameFile, RoundTripIsExact) {
  TempDir dir;
  oracle::Random r(81);
  io::FrameRecord rec;
  rec.cloud = PointCloud(f32_cloud(r, 500), "sensor", 12.5);
  for (int i = 0; i < 500; ++i) {
    rec.ground.push_back(r.coin());
    rec.dynamic.push_back(r.coin());
    rec.foreground.push_back(r.coin());
  }
  const auto path = dir.path() / "f.sfpc";
  io::write_frame(path, rec);
  const auto back = io::read_frame(path);
  ASSERT_EQ(back.cloud.size(), rec.cloud.size());
  for (std::size_t i = 0; i < rec.cloud.size(); ++i) EXPECT_EQ(back.cloud[i], rec.cloud[i]);
  EXPECT_EQ(back.cloud.timestamp(), 12.5);
  EXPECT_EQ(back.ground, rec.ground);
  EXPECT_EQ(back.dynamic, rec.dynamic);
  EXPECT_EQ(back.foreground, rec.foreground);
  EXPECT_EQ(fs::file_size(path), 4U + 2 + 4 + 8 + 500 * 13);
}

TEST(FrameFile, CorruptFilesAreDataErrors) {
  TempDir dir;
  io::FrameRecord rec;
  rec.cloud = PointCloud({Point3(1, 2, 3)});
  auto bytes = io::encode_frame(rec);
  EXPECT_NO_THROW(io::decode_frame(bytes, "ok"));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(io::decode_frame(bad_magic, "magic"), io::DataError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(io::decode_frame(truncated, "short"), io::DataError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(io::decode_frame(bad_version, "version"), io::DataError);
  EXPECT_THROW(io::read_frame(dir.path() / "missing.sfpc"), io::DataError);
}

TEST(PoseFile, RoundTripIsExact) {
  oracle::Random r(82);
  std::vector<io::PoseEntry> poses;
  for (int k = 0; k < 10; ++k) {
    const Eigen::Matrix3d R =
        Eigen::AngleAxisd(r.uniform(-3, 3), r.vec(1.0).normalized()).toRotationMatrix();
    poses.push_back({0.1 * k, RigidTransform(RigidTransform::orthonormalize(R), r.vec(100.0))});
  }
  const auto back = io::parse_poses(io::format_poses(poses), "poses");
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t k = 0; k < poses.size(); ++k) {
    EXPECT_EQ(back[k].timestamp, poses[k].timestamp);
    EXPECT_EQ(back[k].pose.translation(), poses[k].pose.translation());
    EXPECT_LT((back[k].pose.rotation() - poses[k].pose.rotation()).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(PoseFile, SlightlyOffRotationIsRepairedWithWarning) {
  std::ostringstream warn;
  const auto p = io::parse_poses("0 1.00001 0 0 1  0 1 0 2  0 0 1 3\n", "poses", &warn);
  ASSERT_EQ(p.size(), 1U);
  EXPECT_TRUE(RigidTransform::is_rotation(p[0].pose.rotation(), 1e-12));
  EXPECT_NE(warn.str().find("re-orthonormalized"), std::string::npos);
  EXPECT_EQ(p[0].pose.translation(), Vec3(1, 2, 3));
}

TEST(PoseFile, BadRotationsRejected) {
  EXPECT_THROW(io::parse_poses("0 2 0 0 0 0 1 0 0 0 0 1 0\n", "p"), io::DataError);
  EXPECT_THROW(io::parse_poses("0 1 0 0 0 0 1 0 0 0 0 -1 0\n", "p"), io::DataError);
  EXPECT_THROW(io::parse_poses("0 1 0 0\n", "p"), io::DataError);
  EXPECT_THROW(io::parse_poses("0 nan 0 0 0 0 1 0 0 0 0 1 0\n", "p"), io::DataError);
  EXPECT_EQ(io::parse_poses("# comment\n\n", "p").size(), 0U);
}

TEST(FlowFile, RoundTripAtFloatPrecision) {
  TempDir dir;
  oracle::Random r(83);
  FlowField flow;
  for (int i = 0; i < 100; ++i) flow.push_back(r.vec(2.0));
  io::write_flow(dir.path() / "x.sffl", flow);
  const auto back = io::read_flow(dir.path() / "x.sffl");
  ASSERT_EQ(back.size(), flow.size());
  for (std::size_t i = 0; i < flow.size(); ++i)
    for (int k = 0; k < 3; ++k) EXPECT_EQ(back[i][k], static_cast<double>(static_cast<float>(flow[i][k])));
}

TEST(MaskAndLabels, RoundTrip) {
  TempDir dir;
  const PointMask m{1, 0, 0, 1, 1};
  io::write_mask(dir.path() / "m.sfmk", m);
  EXPECT_EQ(io::read_mask(dir.path() / "m.sfmk"), m);
  io::FrameLabels l{RigidTransform::from_yaw(0.3, Vec3(1, 2, 3)), {Vec3(0.1, 0.2, 0.3)}};
  io::write_labels(dir.path() / "l.sfgt", l);
  const auto back = io::read_labels(dir.path() / "l.sfgt");
  EXPECT_EQ(back.gt_flow, l.gt_flow);
  EXPECT_EQ(back.ego_to_next.rotation(), l.ego_to_next.rotation());
  EXPECT_EQ(back.ego_to_next.translation(), l.ego_to_next.translation());
}

TEST(ClusterFile, RoundTripAndValidation) {
  ClusterSet s;
  s.clusters = {{0, 2, 5}, {7, 8}};
  s.noise = {3};
  std::size_t n = 0;
  const auto back = io::parse_clusters(io::format_clusters(s, 10), "c", &n);
  EXPECT_EQ(n, 10U);
  EXPECT_EQ(back.clusters, s.clusters);
  EXPECT_EQ(back.noise, s.noise);
  EXPECT_THROW(io::parse_clusters(io::format_clusters(s, 6), "c"), io::DataError);
  EXPECT_THROW(io::parse_clusters("nope", "c"), io::DataError);
}

TEST(GridCache, ReuseGivesIdenticalMasks) {
  TempDir dir;
  const auto frames = tiny_scene();
  std::vector<PointCloud> clouds;
  std::vector<RigidTransform> poses;
  for (const auto& f : frames) {
    clouds.push_back(f.cloud);
    poses.push_back(f.pose);
  }
  const ClassifierConfig cfg;
  const auto fresh = classify_sequence(clouds, poses, cfg);
  io::write_grid(dir.path() / "g.sfog", fresh.grid, cfg);
  const auto cache = io::read_grid(dir.path() / "g.sfog");
  EXPECT_TRUE(cache.grid.same_evidence(fresh.grid));
  EXPECT_EQ(cache.config.voxel_size, cfg.voxel_size);
  EXPECT_EQ(cache.config.hit_padding, cfg.hit_padding);
  EXPECT_EQ(cache.grid.frame_timestamps(), fresh.grid.frame_timestamps());
  const auto reused = classify_sequence(cache.grid, clouds, poses);
  for (std::size_t k = 0; k < frames.size(); ++k)
    EXPECT_EQ(reused[k].dynamic, fresh.frames[k].dynamic);
  // Same inputs, same bytes.
  EXPECT_EQ(io::encode_grid(fresh.grid, cfg), io::encode_grid(integrate_sequence(clouds, poses, cfg), cfg));
}

TEST(RunConfig, ParseFormatRoundTrip) {
  const auto c = io::parse_run_config(
      "# comment\nvoxel_size = 0.25\nd_p = 2\nloss.dcls = false\nweight.static = 0.5\n"
      "ds_strategy = scaled\ncluster_selector = avg\nseed = 42\n");
  EXPECT_EQ(c.classifier.voxel_size, 0.25);
  EXPECT_EQ(c.classifier.hit_padding, 2);
  EXPECT_FALSE(c.solver.loss.switches.dcls);
  EXPECT_EQ(c.solver.loss.weights.stat, 0.5);
  EXPECT_EQ(c.solver.loss.ds_strategy, DsStrategy::scaled);
  EXPECT_EQ(c.solver.loss.selector, ClusterSelector::avg);
  EXPECT_EQ(c.solver.seed, 42U);
  const auto again = io::parse_run_config(io::format_run_config(c));
  EXPECT_EQ(io::format_run_config(again), io::format_run_config(c));
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(io::parse_run_config("bogus = 1\n"), std::invalid_argument);
  EXPECT_THROW(io::parse_run_config("voxel_size = abc\n"), std::invalid_argument);
  EXPECT_THROW(io::parse_run_config("voxel_size = -1\n"), std::invalid_argument);
  EXPECT_THROW(io::parse_run_config("no equals sign\n"), std::invalid_argument);
  EXPECT_THROW(io::parse_run_config("loss.cham = maybe\n"), std::invalid_argument);
}

TEST(Sequence, WriteSceneThenRead) {
  TempDir dir;
  const auto frames = tiny_scene();
  io::write_scene(dir.path(), frames);
  EXPECT_EQ(io::count_frames(dir.path()), frames.size());
  const auto seq = io::read_sequence(dir.path());
  ASSERT_EQ(seq.frames.size(), frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    EXPECT_EQ(seq.frames[k].cloud.size(), frames[k].cloud.size());
    EXPECT_EQ(seq.frames[k].dynamic, frames[k].gt_dynamic);
    EXPECT_EQ(seq.frames[k].ground, frames[k].ground);
    EXPECT_LT((seq.poses[k].pose.translation() - frames[k].pose.translation()).norm(), 1e-12);
  }
  fs::remove(io::frame_path(dir.path(), 1, ".sfpc"));
  EXPECT_THROW(io::read_sequence(dir.path()), io::DataError);  // 1 frame, 3 poses
}

TEST(SceneSpecFile, ParsesDirectives) {
  const auto s = io::parse_scene_spec(
      "frames 4\nseed 9\nground 30\nego 0 0 1.8 0 5 0 0 0\n"
      "box 10 2 0.8 4 1.8 1.5 0 foreground 8 0 0 0\npole 3 4 0.1 4\n");
  EXPECT_EQ(s.frame_count, 4U);
  EXPECT_EQ(s.seed, 9U);
  EXPECT_EQ(s.ground_half_extent, 30.0);
  ASSERT_EQ(s.boxes.size(), 1U);
  EXPECT_EQ(s.boxes[0].surface, SurfaceClass::foreground);
  EXPECT_EQ(s.boxes[0].velocity, Vec3(8, 0, 0));
  ASSERT_EQ(s.poles.size(), 1U);
  EXPECT_EQ(s.ego.velocity, Vec3(5, 0, 0));
  const auto f = io::parse_scene_spec("builtin fig3\n");
  EXPECT_EQ(f.boxes.size(), fig3_spec().boxes.size());
  EXPECT_THROW(io::parse_scene_spec("box 1 2 3\n"), std::invalid_argument);
}

TEST(Reports, StableTextFormat) {
  LossReport r;
  r.l_cham = 0.5;
  r.l_total = 0.5;
  r.grad = {Vec3(3, 4, 0)};
  const auto text = io::format_loss_report(r);
  EXPECT_NE(text.find("l_cham 0.5\n"), std::string::npos);
  EXPECT_NE(text.find("grad_norm 5\n"), std::string::npos);
  SolveTrace t;
  t.entries.push_back({0, 1, 0, 0, 0, 0, 1, 0});
  const auto csv = io::format_trace_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,l_cham,l_dcham,l_static,l_dcls,l_ds,l_total,step_scale");
}
