// Command-line pipeline: synth -> classify -> cluster -> solve -> eval, plus
// loss inspection and the ablation table.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sceneflow/sceneflow.hpp"

namespace fs = std::filesystem;
using namespace sceneflow;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;

  [[nodiscard]] io::RunConfig load() const {
    io::RunConfig c = config_file.empty() ? io::RunConfig{} : io::read_run_config(config_file);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      io::set_config_value(c, io::detail::trim(kv.substr(0, eq)), io::detail::trim(kv.substr(eq + 1)));
    }
    c.validate();
    return c;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key = value run configuration")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
}

// Frame index encoded in a sequence file name (000042.sfpc -> 42).
std::optional<std::size_t> frame_index(const fs::path& p) {
  const auto stem = p.stem().string();
  if (stem.empty() || stem.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return static_cast<std::size_t>(std::stoull(stem));
}

// Ego motion t -> t+1: from a label sidecar if given, else from the poses.txt
// next to frame t.
RigidTransform resolve_ego(const fs::path& frame_t, const fs::path& frame_t1,
                           const std::string& labels) {
  if (!labels.empty()) return io::read_labels(labels).ego_to_next;
  const auto poses_path = frame_t.parent_path() / "poses.txt";
  const auto i0 = frame_index(frame_t), i1 = frame_index(frame_t1);
  if (!fs::exists(poses_path) || !i0 || !i1)
    throw UsageError("cannot infer ego motion: pass --ego-labels or use a sequence directory");
  const auto poses = io::read_poses(poses_path, &std::cerr);
  if (*i0 >= poses.size() || *i1 >= poses.size())
    throw io::DataError(poses_path.string() + ": frame index beyond pose list");
  return poses[*i1].pose.inverse() * poses[*i0].pose;
}

struct PairArgs {
  std::string frame_t, frame_t1, mask_t, mask_t1, clusters, ego_labels;
  bool keep_ground = false;
};

void add_pair_args(CLI::App* app, PairArgs& a) {
  app->add_option("frame_t", a.frame_t, "source frame (.sfpc)")->required()->check(CLI::ExistingFile);
  app->add_option("frame_t1", a.frame_t1, "target frame (.sfpc)")->required()->check(CLI::ExistingFile);
  app->add_option("--mask-t", a.mask_t, "dynamic mask of frame t (.sfmk)")->required()->check(CLI::ExistingFile);
  app->add_option("--mask-t1", a.mask_t1, "dynamic mask of frame t+1 (.sfmk)")->required()->check(CLI::ExistingFile);
  app->add_option("--clusters", a.clusters, "clusters of frame t (.sfcl); computed if omitted")
      ->check(CLI::ExistingFile);
  app->add_option("--ego-labels", a.ego_labels, "label sidecar supplying the ego motion")
      ->check(CLI::ExistingFile);
  app->add_flag("--keep-ground", a.keep_ground, "do not drop ground-flagged points");
}

struct LoadedPair {
  io::FrameRecord source;
  PreparedPair prepared;
};

LoadedPair load_pair(const PairArgs& a, const io::RunConfig& cfg) {
  LoadedPair out;
  out.source = io::read_frame(a.frame_t);
  auto target = io::read_frame(a.frame_t1);
  PairInputs in;
  in.source = out.source.cloud;
  in.target = target.cloud;
  in.source_dynamic = io::read_mask(a.mask_t);
  in.target_dynamic = io::read_mask(a.mask_t1);
  if (in.source_dynamic.size() != in.source.size() || in.target_dynamic.size() != in.target.size())
    throw io::DataError("mask length does not match its frame");
  if (!a.keep_ground) {
    in.source_ground = out.source.ground;
    in.target_ground = target.ground;
    in.source_dynamic = without_ground(in.source_dynamic, in.source_ground);
    in.target_dynamic = without_ground(in.target_dynamic, in.target_ground);
  }
  if (a.clusters.empty()) {
    in.clusters = cluster_dynamic(in.source, in.source_dynamic, cfg.cluster);
  } else {
    std::size_t n = 0;
    in.clusters = io::read_clusters(a.clusters, &n);
    if (n != in.source.size()) throw io::DataError(a.clusters + ": cluster file is for another frame");
  }
  in.ego = resolve_ego(a.frame_t, a.frame_t1, a.ego_labels);
  out.prepared = prepare_pair(in);
  return out;
}

// ---------------------------------------------------------------- subcommands

int run_classify(const std::string& seq_dir, const std::string& out_dir, const std::string& grid_in,
                 bool from_labels, const Common& common) {
  const auto cfg = common.load();
  const auto seq = io::read_sequence(seq_dir, &std::cerr);
  if (from_labels) {
    std::size_t dynamic = 0, total = 0;
    for (std::size_t k = 0; k < seq.frames.size(); ++k) {
      io::write_mask(io::frame_path(out_dir, k, ".sfmk"), seq.frames[k].dynamic);
      dynamic += count_set(seq.frames[k].dynamic);
      total += seq.frames[k].dynamic.size();
    }
    std::printf("frames %zu\npoints %zu\ndynamic %zu\nunobserved 0\n", seq.frames.size(), total,
                dynamic);
    return kOk;
  }
  const auto clouds = seq.clouds();
  const auto poses = seq.transforms();
  OccupancyGrid grid;
  if (!grid_in.empty()) {
    auto cache = io::read_grid(grid_in);
    const auto& c = cache.config;
    const auto& w = cfg.classifier;
    if (c.voxel_size != w.voxel_size || c.hit_padding != w.hit_padding ||
        c.free_margin != w.free_margin || c.max_range != w.max_range)
      throw io::DataError(grid_in + ": grid cache was built with different classifier settings");
    grid = std::move(cache.grid);
  } else {
    grid = integrate_sequence(clouds, poses, cfg.classifier);
    io::write_grid(fs::path(out_dir) / "grid.sfog", grid, cfg.classifier);
  }
  const auto masks = classify_sequence(grid, clouds, poses);
  std::size_t dynamic = 0, unobserved = 0, total = 0;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    io::write_mask(io::frame_path(out_dir, k, ".sfmk"), masks[k].dynamic);
    dynamic += count_set(masks[k].dynamic);
    unobserved += masks[k].unobserved;
    total += masks[k].dynamic.size();
  }
  std::printf("frames %zu\npoints %zu\ndynamic %zu\nunobserved %zu\n", masks.size(), total, dynamic,
              unobserved);
  return kOk;
}

int run_cluster(const std::string& seq_dir, const std::string& mask_dir, std::string out_dir,
                bool keep_ground, const Common& common) {
  const auto cfg = common.load();
  if (out_dir.empty()) out_dir = mask_dir;
  const auto n = io::count_frames(seq_dir);
  if (n == 0) throw io::DataError("no frames in " + seq_dir);
  std::size_t clusters = 0, clustered = 0, noise = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto frame = io::read_frame(io::frame_path(seq_dir, k, ".sfpc"));
    auto mask = io::read_mask(io::frame_path(mask_dir, k, ".sfmk"));
    if (mask.size() != frame.cloud.size())
      throw io::DataError("mask " + std::to_string(k) + " does not match its frame");
    if (!keep_ground) mask = without_ground(mask, frame.ground);
    const auto set = cluster_dynamic(frame.cloud, mask, cfg.cluster);
    io::write_clusters(io::frame_path(out_dir, k, ".sfcl"), set, frame.cloud.size());
    clusters += set.clusters.size();
    clustered += set.clustered_count();
    noise += set.noise.size();
  }
  std::printf("frames %zu\nclusters %zu\nclustered_points %zu\nnoise_points %zu\n", n, clusters,
              clustered, noise);
  return kOk;
}

int run_loss(const PairArgs& a, const std::string& flow_path, const Common& common) {
  const auto cfg = common.load();
  const auto lp = load_pair(a, cfg);
  const auto flow = io::read_flow(flow_path);
  if (flow.size() != lp.source.cloud.size())
    throw io::DataError(flow_path + ": flow length does not match frame t");
  const LossProblem problem(lp.prepared.pair);
  const auto total = gather_flow(lp.prepared, flow);
  FlowField residual(total.size());
  for (std::size_t i = 0; i < total.size(); ++i) residual[i] = total[i] - problem.ego_flow()[i];
  const auto report = problem.evaluate(residual, cfg.solver.loss);
  std::cout << io::format_loss_report(report);
  if (!std::isfinite(report.l_total)) throw NumericError("loss is not finite");
  return kOk;
}

int run_solve(const PairArgs& a, const std::string& out, const std::string& trace,
              const Common& common) {
  const auto cfg = common.load();
  const auto lp = load_pair(a, cfg);
  const auto res = solve(lp.prepared.pair, cfg.solver);
  io::write_flow(out, scatter_flow(lp.prepared, lp.source.cloud, res.flow));
  if (!trace.empty()) io::write_atomic(trace, io::format_trace_csv(res.trace));
  const auto& last = res.trace.entries.back();
  std::printf("status %s\niterations %zu\nl_total %s\n", to_string(res.trace.status).c_str(),
              last.iteration, io::fmt_real(last.l_total).c_str());
  std::fprintf(stderr, "solve wall time %.3f s\n", res.trace.wall_seconds);
  if (res.trace.status == SolveStatus::non_finite) throw NumericError("non-finite loss during solve");
  return kOk;
}

int run_eval(const std::string& pred_path, const std::string& labels_path, std::string frame_path,
             std::optional<double> ground_z, const Common& common) {
  const auto cfg = common.load();
  if (frame_path.empty()) frame_path = fs::path(labels_path).replace_extension(".sfpc").string();
  const auto frame = io::read_frame(frame_path);
  const auto labels = io::read_labels(labels_path);
  const auto pred = io::read_flow(pred_path);
  const auto n = frame.cloud.size();
  if (labels.gt_flow.size() != n) throw io::DataError(labels_path + ": label count differs from frame");
  if (pred.size() != n) throw io::DataError(pred_path + ": flow length differs from frame");
  std::vector<Point3> pts;
  FlowField p, gt, ego;
  PointMask fg;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& q = frame.cloud[i];
    if (frame.ground[i] || (ground_z && q.z() < *ground_z)) continue;
    pts.push_back(q);
    p.push_back(pred[i]);
    gt.push_back(labels.gt_flow[i]);
    ego.push_back(labels.ego_to_next.apply(q) - q);
    fg.push_back(frame.foreground[i]);
  }
  const EvalFrame ef{pts, p, gt, ego, fg, Point3::Zero()};
  std::cout << io::format_epe_report(epe_three_way(ef, cfg.eval));
  return kOk;
}

std::vector<LabeledFrame> scene_by_name(const std::string& name) {
  if (name == "fig3") return fig3_scenario();
  if (name.rfind("suite:", 0) == 0) {
    const auto k = name.substr(6);
    if (k.empty() || k.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("suite scene index must be a number: " + name);
    return generate(suite_scene(std::stoul(k)));
  }
  if (!fs::exists(name)) throw UsageError("no such scene spec file or builtin: " + name);
  return generate(io::parse_scene_spec(io::read_text(name), name));
}

int run_synth(const std::string& spec, const std::string& out) {
  const auto frames = scene_by_name(spec);
  io::write_scene(out, frames);
  std::size_t pts = 0;
  for (const auto& f : frames) pts += f.cloud.size();
  std::printf("frames %zu\npoints %zu\n", frames.size(), pts);
  return kOk;
}

// Sequence on disk back into labelled frames (object ids are not stored).
std::vector<LabeledFrame> read_labeled_sequence(const std::string& dir) {
  const auto seq = io::read_sequence(dir, &std::cerr);
  std::vector<LabeledFrame> out;
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    const auto& f = seq.frames[k];
    LabeledFrame lf;
    lf.cloud = f.cloud;
    lf.ground = f.ground;
    lf.foreground = f.foreground;
    lf.gt_dynamic = f.dynamic;
    lf.pose = seq.poses[k].pose;
    const auto labels_path = io::frame_path(dir, k, ".sfgt");
    if (fs::exists(labels_path)) {
      auto labels = io::read_labels(labels_path);
      if (labels.gt_flow.size() != f.cloud.size())
        throw io::DataError(labels_path.string() + ": label count differs from frame");
      lf.gt_flow = std::move(labels.gt_flow);
      lf.ego_to_next = labels.ego_to_next;
    } else if (k + 1 < seq.frames.size()) {
      lf.ego_to_next = seq.poses[k + 1].pose.inverse() * seq.poses[k].pose;
    }
    out.push_back(std::move(lf));
  }
  return out;
}

int run_ablate(const std::string& seq_dir, std::optional<std::size_t> frame, const std::string& out,
               const Common& common) {
  const auto cfg = common.load();
  auto frames = read_labeled_sequence(seq_dir);
  if (frames.size() < 2) throw io::DataError("ablation needs at least two frames");
  const std::size_t k = frame.value_or((frames.size() - 1) / 2);
  if (k + 1 >= frames.size()) throw UsageError("--frame must leave a following frame");
  if (frames[k].gt_flow.empty()) throw io::DataError("frame " + std::to_string(k) + " has no labels");
  const auto scene = classify_scene(std::move(frames), cfg.classifier);
  const auto prep = prepare_scene_pair(scene, k, cfg.cluster);
  const LossProblem problem(prep.pair);

  std::string table = "config\tepe_3way\tepe_fd\tepe_fs\tepe_bs\titerations\tstatus\n";
  bool non_finite = false;
  for (const auto& c : ablation_cases()) {
    auto sc = cfg.solver;
    sc.loss.switches = c.loss.switches;
    sc.loss.ds_strategy = c.loss.ds_strategy;
    sc.loss.selector = c.loss.selector;
    const auto res = solve(problem, sc);
    non_finite |= res.trace.status == SolveStatus::non_finite;
    const auto e = evaluate_pair(scene.frames[k], prep, res.flow, cfg.eval);
    table += c.name + "\t" + io::fmt_real(e.epe_3way) + "\t" + io::fmt_real(e.fd.epe) + "\t" +
             io::fmt_real(e.fs.epe) + "\t" + io::fmt_real(e.bs.epe) + "\t" +
             std::to_string(res.trace.entries.back().iteration) + "\t" +
             to_string(res.trace.status) + "\n";
  }
  std::cout << table;
  if (!out.empty()) io::write_atomic(out, table);
  if (non_finite) throw NumericError("a solve produced a non-finite loss");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised scene flow losses on LiDAR sequences"};
  app.require_subcommand(1);
  Common common;

  std::string seq_dir, out_dir, grid_in, mask_dir, flow_path, trace_path, labels_path, frame_file,
      spec;
  bool keep_ground = false, from_labels = false;
  std::optional<double> ground_z;
  std::optional<std::size_t> ablate_frame;
  PairArgs pair;

  auto* classify = app.add_subcommand("classify", "dynamic/static masks for a sequence");
  classify->add_option("seq_dir", seq_dir)->required()->check(CLI::ExistingDirectory);
  classify->add_option("--out", out_dir, "cache directory for masks and grid")->required();
  classify->add_option("--grid", grid_in, "reuse an existing grid cache")->check(CLI::ExistingFile);
  classify->add_flag("--from-labels", from_labels, "copy the dynamic flags stored in the frames");
  add_common(classify, common);

  auto* cluster = app.add_subcommand("cluster", "cluster dynamic points of every frame");
  cluster->add_option("seq_dir", seq_dir)->required()->check(CLI::ExistingDirectory);
  cluster->add_option("--masks", mask_dir, "directory written by classify")->required()->check(CLI::ExistingDirectory);
  cluster->add_option("--out", out_dir, "output directory (default: the mask directory)");
  cluster->add_flag("--keep-ground", keep_ground, "cluster ground-flagged points too");
  add_common(cluster, common);

  auto* loss = app.add_subcommand("loss", "print the loss report for a given flow");
  add_pair_args(loss, pair);
  loss->add_option("--flow", flow_path, "total flow of frame t (.sffl)")->required()->check(CLI::ExistingFile);
  add_common(loss, common);

  auto* solve_cmd = app.add_subcommand("solve", "optimise the flow of one frame pair");
  add_pair_args(solve_cmd, pair);
  solve_cmd->add_option("--out", flow_path, "predicted flow (.sffl)")->required();
  solve_cmd->add_option("--trace", trace_path, "per-iteration trace (.csv)");
  add_common(solve_cmd, common);

  auto* eval = app.add_subcommand("eval", "three-way EPE of a predicted flow");
  eval->add_option("pred_flow", flow_path)->required()->check(CLI::ExistingFile);
  eval->add_option("gt_labels", labels_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--frame", frame_file, "frame file (default: labels path with .sfpc)")->check(CLI::ExistingFile);
  eval->add_option("--ground-z", ground_z, "also drop points below this sensor-frame z");
  add_common(eval, common);

  auto* synth = app.add_subcommand("synth", "generate a labelled synthetic sequence");
  synth->add_option("spec", spec, "fig3, suite:<k> or a scene spec file")->required();
  synth->add_option("--out", out_dir)->required();

  auto* ablate = app.add_subcommand("ablate", "loss ablation table on one frame pair");
  ablate->add_option("seq_dir", seq_dir)->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--frame", ablate_frame, "source frame index (default: middle)");
  ablate->add_option("--out", out_dir, "also write the table to this file");
  add_common(ablate, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*classify) return run_classify(seq_dir, out_dir, grid_in, from_labels, common);
    if (*cluster) return run_cluster(seq_dir, mask_dir, out_dir, keep_ground, common);
    if (*loss) return run_loss(pair, flow_path, common);
    if (*solve_cmd) return run_solve(pair, flow_path, trace_path, common);
    if (*eval) return run_eval(flow_path, labels_path, frame_file, ground_z, common);
    if (*synth) return run_synth(spec, out_dir);
    if (*ablate) return run_ablate(seq_dir, ablate_frame, out_dir, common);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const io::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
