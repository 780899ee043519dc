#pragma once

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "sceneflow/losses.hpp"

namespace sceneflow {

struct SolverConfig {
  std::size_t max_iterations = 500;
  double learning_rate = 0.05;      // m; largest per-point displacement in one step
  double convergence_tol = 1e-7;    // stop once an accepted step lowers l_total by less
  std::size_t max_backtracks = 30;  // step halvings tried before declaring a stall
  LossConfig loss;
  std::uint64_t seed = 0;
  double init_jitter = 0.0;  // m; uniform noise on the initial residual (0 = start at zero)

  void validate() const {
    if (max_iterations == 0) throw std::invalid_argument("max_iterations must be > 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(convergence_tol >= 0.0)) throw std::invalid_argument("convergence_tol must be >= 0");
    if (!(init_jitter >= 0.0)) throw std::invalid_argument("init_jitter must be >= 0");
  }
};

struct TraceEntry {
  std::size_t iteration = 0;
  double l_cham = 0, l_dcham = 0, l_static = 0, l_dcls = 0, l_ds = 0, l_total = 0;
  double step_scale = 0;  // accepted fraction of the preconditioned step
};

enum class SolveStatus { converged, max_iterations, stalled, non_finite };

struct SolveTrace {
  std::vector<TraceEntry> entries;
  FlowField final_flow;
  double wall_seconds = 0.0;
  SolveStatus status = SolveStatus::max_iterations;
};

struct SolveResult {
  FlowField flow;      // total flow F_ego + residual
  FlowField residual;  // optimised residual
  SolveTrace trace;
};

inline std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iterations: return "max_iterations";
    case SolveStatus::stalled: return "stalled";
    case SolveStatus::non_finite: return "non_finite";
  }
  return "?";
}

/// Direct optimisation of a per-point residual flow against the configured
/// loss.
///
/// Each iteration takes a diagonally preconditioned gradient step: with the
/// nearest-neighbour correspondences frozen every term is an isotropic
/// quadratic per point, so -grad_i / curvature_i is the exact minimiser of the
/// local model. Steps are clipped to `learning_rate` per point and halved until
/// l_total does not increase. Correspondences are recomputed at every
/// evaluation; upper-bound cluster targets are fixed for the whole solve
/// while avg/max targets are refreshed once per iteration.
inline SolveResult solve(const LossProblem& problem, const SolverConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = problem.size();
  SolveResult res;
  res.residual.assign(n, Vec3::Zero());
  if (cfg.init_jitter > 0.0) {
    std::mt19937_64 rng(cfg.seed);
    const auto uni = [&] {
      return (static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0) * cfg.init_jitter;
    };
    for (auto& r : res.residual) r = Vec3(uni(), uni(), uni());
  }

  const bool refresh_targets =
      cfg.loss.switches.dcls && cfg.loss.selector != ClusterSelector::upper_bound;
  auto targets = problem.targets(cfg.loss.selector, res.residual);
  auto report = problem.evaluate(res.residual, cfg.loss, &targets);

  const auto record = [&](std::size_t it, const LossReport& r, double scale) {
    res.trace.entries.push_back(
        {it, r.l_cham, r.l_dcham, r.l_static, r.l_dcls, r.l_ds, r.l_total, scale});
  };
  record(0, report, 0.0);

  if (!std::isfinite(report.l_total)) {
    res.trace.status = SolveStatus::non_finite;
  } else {
    res.trace.status = SolveStatus::max_iterations;
    FlowField direction(n), candidate(n);
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
      if (refresh_targets && it > 1) {
        targets = problem.targets(cfg.loss.selector, res.residual);
        report = problem.evaluate(res.residual, cfg.loss, &targets);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double h = report.curvature[i];
        direction[i] = h > 0.0 ? Vec3(-report.grad[i] / h) : Vec3::Zero();
      }
      double scale = 1.0;
      bool accepted = false;
      LossReport next;
      for (std::size_t bt = 0; bt <= cfg.max_backtracks; ++bt, scale *= 0.5) {
        for (std::size_t i = 0; i < n; ++i) {
          Vec3 step = scale * direction[i];
          const double len = step.norm();
          if (len > cfg.learning_rate) step *= cfg.learning_rate / len;
          candidate[i] = res.residual[i] + step;
        }
        next = problem.evaluate(candidate, cfg.loss, &targets);
        if (!std::isfinite(next.l_total)) {
          res.trace.status = SolveStatus::non_finite;
          break;
        }
        if (next.l_total <= report.l_total) {
          accepted = true;
          break;
        }
      }
      if (res.trace.status == SolveStatus::non_finite) break;
      if (!accepted) {
        res.trace.status = SolveStatus::stalled;
        break;
      }
      const double decrease = report.l_total - next.l_total;
      res.residual.swap(candidate);
      report = std::move(next);
      record(it, report, scale);
      if (decrease < cfg.convergence_tol) {
        res.trace.status = SolveStatus::converged;
        break;
      }
    }
  }

  const auto& ego = problem.ego_flow();
  res.flow.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.flow[i] = ego[i] + res.residual[i];
  res.trace.final_flow = res.flow;
  res.trace.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline SolveResult solve(const FramePair& pair, const SolverConfig& cfg) {
  return solve(LossProblem(pair), cfg);
}

}  // namespace sceneflow
