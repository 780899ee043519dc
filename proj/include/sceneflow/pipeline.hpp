#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sceneflow/clustering.hpp"
#include "sceneflow/geometry.hpp"
#include "sceneflow/losses.hpp"
#include "sceneflow/metrics.hpp"
#include "sceneflow/occupancy.hpp"
#include "sceneflow/solver.hpp"
#include "sceneflow/synthetic.hpp"

namespace sceneflow {

/// Full frames (ground included) with their classifier masks. Clusters use
/// frame-t indices.
struct PairInputs {
  PointCloud source;
  PointCloud target;
  PointMask source_dynamic;
  PointMask target_dynamic;
  PointMask source_ground;  // may be empty: no ground removal
  PointMask target_ground;
  ClusterSet clusters;
  RigidTransform ego;
};

/// Ground-free frame pair plus the frame-t index of every source point.
struct PreparedPair {
  FramePair pair;
  std::vector<std::size_t> source_index;
  std::vector<std::size_t> target_index;
};

inline std::vector<std::size_t> kept_indices(std::size_t n, std::span<const std::uint8_t> ground) {
  if (!ground.empty() && ground.size() != n) throw std::invalid_argument("ground mask size mismatch");
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (ground.empty() || !ground[i]) out.push_back(i);
  return out;
}

/// Dynamic mask with ground points cleared.
inline PointMask without_ground(std::span<const std::uint8_t> mask,
                                std::span<const std::uint8_t> ground) {
  PointMask out(mask.begin(), mask.end());
  if (!ground.empty()) {
    if (ground.size() != mask.size()) throw std::invalid_argument("ground mask size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i)
      if (ground[i]) out[i] = 0;
  }
  return out;
}

inline PreparedPair prepare_pair(const PairInputs& in) {
  if (in.source_dynamic.size() != in.source.size() || in.target_dynamic.size() != in.target.size())
    throw std::invalid_argument("mask/cloud size mismatch");
  PreparedPair out;
  out.source_index = kept_indices(in.source.size(), in.source_ground);
  out.target_index = kept_indices(in.target.size(), in.target_ground);

  std::vector<std::ptrdiff_t> remap(in.source.size(), -1);
  for (std::size_t k = 0; k < out.source_index.size(); ++k)
    remap[out.source_index[k]] = static_cast<std::ptrdiff_t>(k);

  auto& p = out.pair;
  p.source = in.source.select(std::span<const std::size_t>(out.source_index));
  p.target = in.target.select(std::span<const std::size_t>(out.target_index));
  for (auto i : out.source_index) p.source_dynamic.push_back(in.source_dynamic[i]);
  for (auto i : out.target_index) p.target_dynamic.push_back(in.target_dynamic[i]);
  const auto map_list = [&](const std::vector<std::size_t>& list) {
    std::vector<std::size_t> v;
    for (auto i : list) {
      if (i >= remap.size()) throw std::invalid_argument("cluster index out of range");
      if (remap[i] >= 0) v.push_back(static_cast<std::size_t>(remap[i]));
    }
    return v;
  };
  for (const auto& c : in.clusters.clusters) {
    auto m = map_list(c);
    if (!m.empty()) p.clusters.clusters.push_back(std::move(m));
  }
  p.clusters.noise = map_list(in.clusters.noise);
  p.ego = in.ego;
  return out;
}

/// Full-frame flow: `subset_flow` on kept points, pure ego flow elsewhere.
inline FlowField scatter_flow(const PreparedPair& prep, const PointCloud& full_source,
                              std::span<const Vec3> subset_flow) {
  if (subset_flow.size() != prep.source_index.size())
    throw std::invalid_argument("flow length mismatch");
  FlowField out = ego_flow(full_source, prep.pair.ego);
  for (std::size_t k = 0; k < subset_flow.size(); ++k) out[prep.source_index[k]] = subset_flow[k];
  return out;
}

inline FlowField gather_flow(const PreparedPair& prep, std::span<const Vec3> full_flow) {
  FlowField out;
  out.reserve(prep.source_index.size());
  for (auto i : prep.source_index) {
    if (i >= full_flow.size()) throw std::invalid_argument("flow length mismatch");
    out.push_back(full_flow[i]);
  }
  return out;
}

// ---------------------------------------------------------------- synthetic runs

/// A generated sequence after classification: per-frame dynamic masks from
/// the occupancy grid over all frames.
struct ClassifiedScene {
  std::vector<LabeledFrame> frames;
  std::vector<Classification> masks;
};

inline ClassifiedScene classify_scene(std::vector<LabeledFrame> frames,
                                      const ClassifierConfig& cfg) {
  std::vector<PointCloud> clouds;
  std::vector<RigidTransform> poses;
  for (const auto& f : frames) {
    clouds.push_back(f.cloud);
    poses.push_back(f.pose);
  }
  auto result = classify_sequence(clouds, poses, cfg);
  return {std::move(frames), std::move(result.frames)};
}

/// Pair (k, k+1) of a classified scene with ground removed and frame-k
/// dynamic points clustered.
inline PreparedPair prepare_scene_pair(const ClassifiedScene& scene, std::size_t k,
                                       const ClusterConfig& cluster_cfg) {
  if (k + 1 >= scene.frames.size()) throw std::invalid_argument("pair index out of range");
  const auto& f0 = scene.frames[k];
  const auto& f1 = scene.frames[k + 1];
  PairInputs in;
  in.source = f0.cloud;
  in.target = f1.cloud;
  in.source_ground = f0.ground;
  in.target_ground = f1.ground;
  in.source_dynamic = without_ground(scene.masks[k].dynamic, f0.ground);
  in.target_dynamic = without_ground(scene.masks[k + 1].dynamic, f1.ground);
  in.clusters = cluster_dynamic(f0.cloud, in.source_dynamic, cluster_cfg);
  in.ego = f0.ego_to_next;
  return prepare_pair(in);
}

/// Three-way EPE of a subset flow on the kept (non-ground) points of `frame`.
inline EpeReport evaluate_pair(const LabeledFrame& frame, const PreparedPair& prep,
                               std::span<const Vec3> subset_flow, const EvalConfig& cfg) {
  std::vector<Point3> pts;
  FlowField gt, ego;
  PointMask fg;
  const auto& T = prep.pair.ego;
  for (auto i : prep.source_index) {
    pts.push_back(frame.cloud[i]);
    gt.push_back(frame.gt_flow[i]);
    ego.push_back(T.apply(frame.cloud[i]) - frame.cloud[i]);
    fg.push_back(frame.foreground[i]);
  }
  EvalFrame ef{pts, subset_flow, gt, ego, fg, Point3::Zero()};
  return epe_three_way(ef, cfg);
}

// ---------------------------------------------------------------- ablations

struct AblationCase {
  std::string name;
  LossConfig loss;
};

/// Loss-term ablation ladder followed by the reweighting and cluster-target
/// variants, all with unit weights.
inline std::vector<AblationCase> ablation_cases() {
  std::vector<AblationCase> out;
  const auto with = [](bool cham, bool dcham, bool stat, bool dcls) {
    LossConfig c;
    c.switches = {cham, dcham, stat, dcls};
    return c;
  };
  out.push_back({"cham", with(true, false, false, false)});
  out.push_back({"cham+dcham", with(true, true, false, false)});
  out.push_back({"cham+dcham+static", with(true, true, true, false)});
  out.push_back({"all", with(true, true, true, true)});
  auto scaled = with(true, true, true, true);
  scaled.ds_strategy = DsStrategy::scaled;
  out.push_back({"ds_scaled", scaled});
  auto unweighted = with(true, true, true, true);
  unweighted.ds_strategy = DsStrategy::unweighted;
  out.push_back({"ds_unweighted", unweighted});
  auto avg = with(true, true, true, true);
  avg.selector = ClusterSelector::avg;
  out.push_back({"target_avg", avg});
  auto max = with(true, true, true, true);
  max.selector = ClusterSelector::max;
  out.push_back({"target_max", max});
  return out;
}

}  // namespace sceneflow
