#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "oracles.hpp"

using namespace sceneflow;

namespace {

// Short translated box on a fine lattice, gt masks and gt clustering.
struct SlidingBox {
  std::vector<LabeledFrame> frames;
  PreparedPair prep;
};

SlidingBox sliding_box() {
  auto spec = fig3_spec();
  spec.boxes.resize(1);
  spec.boxes[0].size = Vec3(2.0, 0.5, 0.5);
  spec.boxes[0].center = Vec3(0.0, 5.0, 1.0);
  spec.frame_count = 2;
  SlidingBox s;
  s.frames = generate(spec);
  const auto& f0 = s.frames[0];
  const auto& f1 = s.frames[1];
  PairInputs in{f0.cloud, f1.cloud, f0.gt_dynamic, f1.gt_dynamic, {}, {}, {}, f0.ego_to_next};
  in.clusters = cluster_dynamic(f0.cloud, f0.gt_dynamic, ClusterConfig{});
  s.prep = prepare_pair(in);
  return s;
}

std::vector<double> cluster_errors(const SlidingBox& s, const FlowField& flow) {
  std::vector<double> out;
  for (const auto& c : s.prep.pair.clusters.clusters)
    for (auto j : c) out.push_back((flow[j] - s.frames[0].gt_flow[j]).norm());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Solver, StaticSceneConvergesToZeroResidual) {
  oracle::Random r(61);
  FramePair p;
  const auto pts = r.cloud(300, 10.0);
  p.ego = RigidTransform::from_yaw(0.02, Vec3(0.8, 0.1, 0.0));
  p.source = PointCloud(pts);
  p.target = apply_transform(p.source, p.ego);
  p.source_dynamic.assign(pts.size(), 0);
  p.target_dynamic.assign(pts.size(), 0);
  const auto res = solve(p, SolverConfig{});
  double worst = 0.0;
  for (const auto& d : res.residual) worst = std::max(worst, d.norm());
  EXPECT_LT(worst, 1e-3);
  EXPECT_EQ(res.trace.status, SolveStatus::converged);
}

TEST(Solver, ClusterLossRecoversSlidingBox) {
  const auto s = sliding_box();
  const LossProblem prob(s.prep.pair);
  ASSERT_EQ(prob.upper_bound_targets().size(), 1U);
  EXPECT_LT((prob.upper_bound_targets()[0].flow - Vec3(1, 0, 0)).norm(), 1e-9);

  SolverConfig with;
  with.loss.switches = {true, true, false, true};
  const auto good = cluster_errors(s, solve(prob, with).flow);
  const auto below = std::count_if(good.begin(), good.end(), [](double e) { return e < 0.05; });
  EXPECT_GE(static_cast<double>(below), 0.95 * static_cast<double>(good.size()));

  SolverConfig without;
  without.loss.switches = {true, true, false, false};
  const auto bad = cluster_errors(s, solve(prob, without).flow);
  EXPECT_GT(bad[bad.size() / 2], 0.3);
}

TEST(Solver, TraceIsNonIncreasing) {
  oracle::Random r(62);
  const auto pair = oracle::random_pair(r, 200);
  const auto res = solve(pair, SolverConfig{});
  ASSERT_GT(res.trace.entries.size(), 1U);
  for (std::size_t k = 1; k < res.trace.entries.size(); ++k)
    EXPECT_LE(res.trace.entries[k].l_total, res.trace.entries[k - 1].l_total);
}

TEST(Solver, DeterministicGivenSeed) {
  oracle::Random r(63);
  const auto pair = oracle::random_pair(r, 200);
  SolverConfig cfg;
  cfg.init_jitter = 0.05;
  cfg.seed = 9;
  const auto a = solve(pair, cfg), b = solve(pair, cfg);
  EXPECT_EQ(a.flow, b.flow);
  ASSERT_EQ(a.trace.entries.size(), b.trace.entries.size());
  for (std::size_t k = 0; k < a.trace.entries.size(); ++k)
    EXPECT_EQ(a.trace.entries[k].l_total, b.trace.entries[k].l_total);
  cfg.seed = 10;
  EXPECT_NE(solve(pair, cfg).flow, a.flow);
}

TEST(Solver, TotalFlowIsEgoPlusResidual) {
  oracle::Random r(64);
  const auto pair = oracle::random_pair(r, 100);
  const LossProblem prob(pair);
  const auto res = solve(prob, SolverConfig{});
  for (std::size_t i = 0; i < res.flow.size(); ++i)
    EXPECT_EQ(res.flow[i], prob.ego_flow()[i] + res.residual[i]);
  EXPECT_EQ(res.trace.final_flow, res.flow);
}

TEST(Solver, NonFiniteLossAborts) {
  oracle::Random r(65);
  const auto pair = oracle::random_pair(r, 50);
  SolverConfig cfg;
  cfg.loss.weights.cham = std::numeric_limits<double>::infinity();
  const auto res = solve(pair, cfg);
  EXPECT_EQ(res.trace.status, SolveStatus::non_finite);
  EXPECT_EQ(res.trace.entries.size(), 1U);
}

TEST(Solver, RefreshedSelectorsRun) {
  oracle::Random r(66);
  const auto pair = oracle::random_pair(r, 100);
  for (auto sel : {ClusterSelector::avg, ClusterSelector::max}) {
    SolverConfig cfg;
    cfg.loss.selector = sel;
    const auto res = solve(pair, cfg);
    EXPECT_NE(res.trace.status, SolveStatus::non_finite);
  }
}

TEST(Solver, RejectsBadConfig) {
  SolverConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.max_iterations = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
