#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sceneflow/clustering.hpp"
#include "sceneflow/geometry.hpp"
#include "sceneflow/nn_index.hpp"

namespace sceneflow {

/// Everything a loss evaluation needs except the optimisation variable.
/// Source points live in frame t, target points in frame t+1; `ego` maps
/// frame t coordinates into frame t+1 (F_ego = ego(p) - p).
struct FramePair {
  PointCloud source;
  PointCloud target;
  PointMask source_dynamic;
  PointMask target_dynamic;
  ClusterSet clusters;  // over dynamic source points
  RigidTransform ego;

  void validate() const {
    if (source_dynamic.size() != source.size())
      throw std::invalid_argument("source mask/cloud size mismatch");
    if (target_dynamic.size() != target.size())
      throw std::invalid_argument("target mask/cloud size mismatch");
    for (const auto& c : clusters.clusters)
      for (auto i : c)
        if (i >= source.size()) throw std::invalid_argument("cluster index out of range");
  }
};

/// A frame pair plus the residual flow at which the losses are evaluated.
struct LossInputs {
  const FramePair& pair;
  std::span<const Vec3> residual;
};

enum class DsStrategy { separate, scaled, unweighted };
enum class ClusterSelector { upper_bound, avg, max };

struct LossSwitches {
  bool cham = true;
  bool dcham = true;
  bool stat = true;
  bool dcls = true;
};

struct LossWeights {
  double cham = 1.0;
  double dcham = 1.0;
  double stat = 1.0;
  double dcls = 1.0;
};

struct LossConfig {
  LossSwitches switches;
  LossWeights weights;
  // Anything but `separate` replaces the dynamic-Chamfer and static terms with a
  // single reweighted one-directional Chamfer term (reported as l_ds).
  DsStrategy ds_strategy = DsStrategy::separate;
  ClusterSelector selector = ClusterSelector::upper_bound;
};

struct ClusterTarget {
  std::size_t cluster = 0;
  Vec3 flow = Vec3::Zero();
  // Upper-bound targets only: the source point with the largest distance to
  // the next frame's dynamic points, and its neighbour there.
  std::optional<std::size_t> source_index;
  std::optional<std::size_t> target_index;
  Point3 target_point = Point3::Zero();
};

struct TermValue {
  double value = 0.0;
  FlowField grad;  // d value / d residual, one entry per source point
};

struct LossReport {
  double l_cham = 0.0;
  double l_dcham = 0.0;
  double l_static = 0.0;
  double l_dcls = 0.0;
  double l_ds = 0.0;
  double l_total = 0.0;
  FlowField grad;
  // Per-point scalar s.t. the Hessian of l_total is curvature[i] * I when
  // nearest-neighbour correspondences and cluster targets are held fixed.
  std::vector<double> curvature;
  std::vector<ClusterTarget> targets;
};

/// Precomputed view of a frame pair: ego flow, target-side indices, dynamic
/// and static subsets, and the upper-bound cluster targets (which depend only
/// on raw geometry). Losses at many residuals reuse one instance.
class LossProblem {
 public:
  explicit LossProblem(FramePair pair) : pair_(std::move(pair)) {
    pair_.validate();
    const auto& src = pair_.source;
    const auto& tgt = pair_.target;
    base_.reserve(src.size());
    ego_.reserve(src.size());
    for (const auto& p : src) {
      base_.push_back(pair_.ego.apply(p));
      ego_.push_back(base_.back() - p);
    }
    for (std::size_t i = 0; i < src.size(); ++i)
      (pair_.source_dynamic[i] ? dyn_src_ : static_src_).push_back(i);
    for (std::size_t j = 0; j < tgt.size(); ++j)
      if (pair_.target_dynamic[j]) {
        dyn_tgt_.push_back(j);
        dyn_tgt_pts_.push_back(tgt[j]);
      }
    if (!tgt.empty()) target_index_.emplace(tgt.points());
    if (!dyn_tgt_pts_.empty()) dyn_target_index_.emplace(dyn_tgt_pts_);
    upper_bound_ = compute_upper_bound_targets();
  }

  [[nodiscard]] const FramePair& pair() const { return pair_; }
  [[nodiscard]] std::size_t size() const { return pair_.source.size(); }
  [[nodiscard]] const FlowField& ego_flow() const { return ego_; }
  [[nodiscard]] std::span<const std::size_t> dynamic_source() const { return dyn_src_; }
  [[nodiscard]] std::span<const std::size_t> static_source() const { return static_src_; }
  [[nodiscard]] const std::vector<ClusterTarget>& upper_bound_targets() const {
    return upper_bound_;
  }

  /// Predicted next-frame positions P_t + F_ego + residual.
  [[nodiscard]] std::vector<Point3> predict(std::span<const Vec3> residual) const {
    check_residual(residual);
    std::vector<Point3> out(base_.size());
    for (std::size_t i = 0; i < base_.size(); ++i) out[i] = base_[i] + residual[i];
    return out;
  }

  // Each term adds weight * d(term)/d(residual) into grad and the matching
  // scalar curvature into curv (either span may be empty to skip), and
  // returns the unweighted term value.

  double chamfer(std::span<const Point3> pred, std::span<Vec3> grad, std::span<double> curv,
                 double weight) const {
    if (pred.empty() || !target_index_) throw std::invalid_argument("chamfer undefined");
    return chamfer_between(pred, nullptr, pair_.target.points(), *target_index_, grad, curv,
                           weight);
  }

  double dynamic_chamfer(std::span<const Point3> pred, std::span<Vec3> grad,
                         std::span<double> curv, double weight) const {
    if (dyn_src_.empty() || dyn_tgt_.empty()) return 0.0;
    std::vector<Point3> pred_d;
    pred_d.reserve(dyn_src_.size());
    for (auto i : dyn_src_) pred_d.push_back(pred[i]);
    return chamfer_between(pred_d, &dyn_src_, dyn_tgt_pts_, *dyn_target_index_, grad, curv,
                           weight);
  }

  double static_flow(std::span<const Vec3> residual, std::span<Vec3> grad,
                     std::span<double> curv, double weight) const {
    check_residual(residual);
    if (static_src_.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(static_src_.size());
    double sum = 0.0;
    for (auto i : static_src_) {
      sum += residual[i].squaredNorm();
      if (!grad.empty()) grad[i] += weight * 2.0 * inv * residual[i];
      if (!curv.empty()) curv[i] += weight * 2.0 * inv;
    }
    return sum * inv;
  }

  /// Targets for the chosen selector; avg/max read the current total flow.
  [[nodiscard]] std::vector<ClusterTarget> targets(ClusterSelector selector,
                                                   std::span<const Vec3> residual) const {
    if (selector == ClusterSelector::upper_bound) return upper_bound_;
    check_residual(residual);
    std::vector<ClusterTarget> out;
    const auto& clusters = pair_.clusters.clusters;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      if (clusters[c].empty()) continue;
      ClusterTarget t;
      t.cluster = c;
      if (selector == ClusterSelector::avg) {
        Vec3 sum = Vec3::Zero();
        for (auto j : clusters[c]) sum += ego_[j] + residual[j];
        t.flow = sum / static_cast<double>(clusters[c].size());
      } else {
        Vec3 mx = Vec3::Constant(-std::numeric_limits<double>::infinity());
        for (auto j : clusters[c]) mx = mx.cwiseMax(ego_[j] + residual[j]);
        t.flow = mx;
      }
      out.push_back(t);
    }
    return out;
  }

  double cluster_flow(std::span<const Vec3> residual, std::span<const ClusterTarget> targets,
                      std::span<Vec3> grad, std::span<double> curv, double weight) const {
    check_residual(residual);
    if (dyn_src_.empty() || targets.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(dyn_src_.size());
    double sum = 0.0;
    for (const auto& t : targets) {
      for (auto j : pair_.clusters.clusters.at(t.cluster)) {
        const Vec3 diff = ego_[j] + residual[j] - t.flow;
        sum += diff.squaredNorm();
        if (!grad.empty()) grad[j] += weight * 2.0 * inv * diff;
        if (!curv.empty()) curv[j] += weight * 2.0 * inv;
      }
    }
    return sum * inv;
  }

  /// One-directional Chamfer of the predicted points into P_{t+1}, reweighted
  /// by the dynamic/static split.
  double ds_alternative(DsStrategy strategy, std::span<const Point3> pred, std::span<Vec3> grad,
                        std::span<double> curv, double weight) const {
    if (strategy == DsStrategy::separate)
      throw std::invalid_argument("ds_alternative needs the scaled or unweighted strategy");
    if (pred.empty() || !target_index_) throw std::invalid_argument("chamfer undefined");
    const auto& tgt = pair_.target;
    const std::size_t n = pred.size();
    std::vector<double> coef(n);
    if (strategy == DsStrategy::scaled) {
      for (std::size_t i = 0; i < n; ++i)
        coef[i] = (pair_.source_dynamic[i] ? 0.9 : 0.1) / static_cast<double>(n);
    } else {
      const double inv_d = dyn_src_.empty() ? 0.0 : 1.0 / static_cast<double>(dyn_src_.size());
      const double inv_s =
          static_src_.empty() ? 0.0 : 1.0 / static_cast<double>(static_src_.size());
      for (std::size_t i = 0; i < n; ++i) coef[i] = pair_.source_dynamic[i] ? inv_d : inv_s;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto nb = target_index_->nearest(pred[i]);
      sum += coef[i] * nb.squared;
      if (!grad.empty()) grad[i] += weight * 2.0 * coef[i] * (pred[i] - tgt[nb.index]);
      if (!curv.empty()) curv[i] += weight * 2.0 * coef[i];
    }
    return sum;
  }

  [[nodiscard]] LossReport evaluate(std::span<const Vec3> residual, const LossConfig& cfg,
                                    const std::vector<ClusterTarget>* fixed_targets = nullptr) const {
    const auto pred = predict(residual);
    LossReport r;
    r.grad.assign(size(), Vec3::Zero());
    r.curvature.assign(size(), 0.0);
    const auto& sw = cfg.switches;
    const auto& w = cfg.weights;
    if (sw.cham) r.l_cham = chamfer(pred, r.grad, r.curvature, w.cham);
    if (cfg.ds_strategy == DsStrategy::separate) {
      if (sw.dcham) r.l_dcham = dynamic_chamfer(pred, r.grad, r.curvature, w.dcham);
      if (sw.stat) r.l_static = static_flow(residual, r.grad, r.curvature, w.stat);
    } else {
      r.l_ds = ds_alternative(cfg.ds_strategy, pred, r.grad, r.curvature, 1.0);
    }
    if (sw.dcls) {
      r.targets = fixed_targets ? *fixed_targets : targets(cfg.selector, residual);
      r.l_dcls = cluster_flow(residual, r.targets, r.grad, r.curvature, w.dcls);
    }
    r.l_total = w.cham * r.l_cham + w.dcham * r.l_dcham + w.stat * r.l_static + r.l_ds +
                w.dcls * r.l_dcls;
    return r;
  }

 private:
  void check_residual(std::span<const Vec3> residual) const {
    if (residual.size() != base_.size())
      throw std::invalid_argument("residual flow size differs from source cloud");
  }

  // Symmetric squared-NN Chamfer between `pred` and `tgt`. `map` sends
  // positions in `pred` back to source indices (identity when null).
  static double chamfer_between(std::span<const Point3> pred,
                                const std::vector<std::size_t>* map,
                                std::span<const Point3> tgt, const NearestNeighborIndex& tgt_index,
                                std::span<Vec3> grad, std::span<double> curv, double weight) {
    const double inv_p = 1.0 / static_cast<double>(pred.size());
    const double inv_t = 1.0 / static_cast<double>(tgt.size());
    const auto src_of = [&](std::size_t k) { return map ? (*map)[k] : k; };

    double forward = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const auto nb = tgt_index.nearest(pred[k]);
      forward += nb.squared;
      const auto i = src_of(k);
      if (!grad.empty()) grad[i] += weight * 2.0 * inv_p * (pred[k] - tgt[nb.index]);
      if (!curv.empty()) curv[i] += weight * 2.0 * inv_p;
    }

    const NearestNeighborIndex pred_index(pred);
    double backward = 0.0;
    for (std::size_t j = 0; j < tgt.size(); ++j) {
      const auto nb = pred_index.nearest(tgt[j]);
      backward += nb.squared;
      const auto i = src_of(nb.index);
      if (!grad.empty()) grad[i] += weight * 2.0 * inv_t * (pred[nb.index] - tgt[j]);
      if (!curv.empty()) curv[i] += weight * 2.0 * inv_t;
    }
    return forward * inv_p + backward * inv_t;
  }

  // For each cluster: the member farthest from the next frame's dynamic
  // points (first such member on ties) and its displacement to its neighbour.
  [[nodiscard]] std::vector<ClusterTarget> compute_upper_bound_targets() const {
    std::vector<ClusterTarget> out;
    if (!dyn_target_index_) return out;
    const auto& clusters = pair_.clusters.clusters;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      double best = -1.0;
      ClusterTarget t;
      t.cluster = c;
      for (auto k : clusters[c]) {
        const auto nb = dyn_target_index_->nearest(pair_.source[k]);
        if (nb.squared > best) {
          best = nb.squared;
          t.source_index = k;
          t.target_index = dyn_tgt_[nb.index];
          t.target_point = dyn_tgt_pts_[nb.index];
        }
      }
      if (!t.source_index) continue;
      t.flow = t.target_point - pair_.source[*t.source_index];
      out.push_back(t);
    }
    return out;
  }

  FramePair pair_;
  std::vector<Point3> base_;
  FlowField ego_;
  std::vector<std::size_t> dyn_src_, static_src_, dyn_tgt_;
  std::vector<Point3> dyn_tgt_pts_;
  std::optional<NearestNeighborIndex> target_index_;
  std::optional<NearestNeighborIndex> dyn_target_index_;
  std::vector<ClusterTarget> upper_bound_;
};

// Single-shot entry points over LossInputs. Each builds a LossProblem; loops
// that evaluate many residuals on one pair should hold a LossProblem instead.

inline TermValue chamfer_loss(const LossInputs& in) {
  LossProblem prob(in.pair);
  TermValue t;
  t.grad.assign(prob.size(), Vec3::Zero());
  t.value = prob.chamfer(prob.predict(in.residual), t.grad, {}, 1.0);
  return t;
}

inline TermValue dynamic_chamfer_loss(const LossInputs& in) {
  LossProblem prob(in.pair);
  TermValue t;
  t.grad.assign(prob.size(), Vec3::Zero());
  t.value = prob.dynamic_chamfer(prob.predict(in.residual), t.grad, {}, 1.0);
  return t;
}

inline TermValue static_loss(const LossInputs& in) {
  LossProblem prob(in.pair);
  TermValue t;
  t.grad.assign(prob.size(), Vec3::Zero());
  t.value = prob.static_flow(in.residual, t.grad, {}, 1.0);
  return t;
}

inline std::vector<ClusterTarget> cluster_targets(const LossInputs& in) {
  return LossProblem(in.pair).upper_bound_targets();
}

inline TermValue cluster_loss(const LossInputs& in, std::span<const ClusterTarget> targets) {
  LossProblem prob(in.pair);
  TermValue t;
  t.grad.assign(prob.size(), Vec3::Zero());
  t.value = prob.cluster_flow(in.residual, targets, t.grad, {}, 1.0);
  return t;
}

inline LossReport total_loss(const LossInputs& in, const LossConfig& cfg = {}) {
  return LossProblem(in.pair).evaluate(in.residual, cfg);
}

inline TermValue ablation_ds_loss(const LossInputs& in, DsStrategy strategy) {
  LossProblem prob(in.pair);
  TermValue t;
  t.grad.assign(prob.size(), Vec3::Zero());
  t.value = prob.ds_alternative(strategy, prob.predict(in.residual), t.grad, {}, 1.0);
  return t;
}

inline std::vector<ClusterTarget> ablation_cluster_target(const LossInputs& in,
                                                          ClusterSelector selector) {
  return LossProblem(in.pair).targets(selector, in.residual);
}

inline std::string to_string(DsStrategy s) {
  switch (s) {
    case DsStrategy::separate: return "separate";
    case DsStrategy::scaled: return "scaled";
    case DsStrategy::unweighted: return "unweighted";
  }
  return "?";
}

inline std::string to_string(ClusterSelector s) {
  switch (s) {
    case ClusterSelector::upper_bound: return "upper_bound";
    case ClusterSelector::avg: return "avg";
    case ClusterSelector::max: return "max";
  }
  return "?";
}

inline DsStrategy parse_ds_strategy(const std::string& s) {
  if (s == "separate") return DsStrategy::separate;
  if (s == "scaled") return DsStrategy::scaled;
  if (s == "unweighted") return DsStrategy::unweighted;
  throw std::invalid_argument("unknown ds strategy: " + s);
}

inline ClusterSelector parse_cluster_selector(const std::string& s) {
  if (s == "upper_bound") return ClusterSelector::upper_bound;
  if (s == "avg") return ClusterSelector::avg;
  if (s == "max") return ClusterSelector::max;
  throw std::invalid_argument("unknown cluster selector: " + s);
}

}  // namespace sceneflow
