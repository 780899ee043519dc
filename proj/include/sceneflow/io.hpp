#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sceneflow/clustering.hpp"
#include "sceneflow/geometry.hpp"
#include "sceneflow/losses.hpp"
#include "sceneflow/metrics.hpp"
#include "sceneflow/occupancy.hpp"
#include "sceneflow/solver.hpp"
#include "sceneflow/synthetic.hpp"

namespace sceneflow::io {

namespace fs = std::filesystem;

/// Malformed, missing or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kFormatVersion = 1;

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v), 4); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  [[nodiscard]] const std::vector<char>& bytes() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}
  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::string_view(buf_.data() + pos_, magic.size()) != magic)
      throw DataError(what_ + ": bad magic, expected " + std::string(magic));
    pos_ += magic.size();
  }
  void expect_version() {
    const auto v = u16();
    if (v != kFormatVersion)
      throw DataError(what_ + ": unsupported version " + std::to_string(v));
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(static_cast<std::uint32_t>(le(4))); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(le(4))); }
  double f64() { return std::bit_cast<double>(le(8)); }
  [[nodiscard]] std::size_t remaining() const { return buf_.size() - pos_; }
  void expect_payload(std::size_t bytes) const {
    if (remaining() != bytes)
      throw DataError(what_ + ": payload is " + std::to_string(remaining()) + " bytes, expected " +
                      std::to_string(bytes));
  }
  void expect_end() const { expect_payload(0); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw DataError(what_ + ": truncated file");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<char>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void put_transform(ByteWriter& w, const RigidTransform& t) {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.f64(t.rotation()(r, c));
    w.f64(t.translation()[r]);
  }
}

inline RigidTransform get_transform(ByteReader& r, const std::string& what) {
  Eigen::Matrix3d rot;
  Vec3 t;
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) rot(i, c) = r.f64();
    t[i] = r.f64();
  }
  if (!RigidTransform::is_rotation(rot, 1e-9) || !t.allFinite())
    throw DataError(what + ": stored transform is not rigid");
  return {rot, t};
}

inline std::uint32_t checked_count(std::size_t n) {
  if (n > 0xFFFFFFFFULL) throw std::invalid_argument("too many elements for u32 count");
  return static_cast<std::uint32_t>(n);
}

}  // namespace detail

inline std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_atomic(const fs::path& path, const char* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(data, static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_atomic(const fs::path& path, const std::vector<char>& bytes) {
  write_atomic(path, bytes.data(), bytes.size());
}

inline void write_atomic(const fs::path& path, const std::string& text) {
  write_atomic(path, text.data(), text.size());
}

// ---------------------------------------------------------------- frames

/// Point cloud plus per-point flag bits as stored on disk.
struct FrameRecord {
  PointCloud cloud;
  PointMask ground;
  PointMask dynamic;
  PointMask foreground;
};

inline constexpr std::uint8_t kFlagGround = 1U << 0;
inline constexpr std::uint8_t kFlagDynamic = 1U << 1;
inline constexpr std::uint8_t kFlagForeground = 1U << 2;

/// Points are stored as f32; masks may be empty (all flags clear).
inline std::vector<char> encode_frame(const FrameRecord& f) {
  const auto n = f.cloud.size();
  for (const auto* m : {&f.ground, &f.dynamic, &f.foreground})
    if (!m->empty() && m->size() != n) throw std::invalid_argument("frame mask size mismatch");
  detail::ByteWriter w;
  w.raw("SFPC");
  w.u16(kFormatVersion);
  w.u32(detail::checked_count(n));
  w.f64(f.cloud.timestamp());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = f.cloud[i];
    w.f32(static_cast<float>(p.x()));
    w.f32(static_cast<float>(p.y()));
    w.f32(static_cast<float>(p.z()));
    std::uint8_t flags = 0;
    if (!f.ground.empty() && f.ground[i]) flags |= kFlagGround;
    if (!f.dynamic.empty() && f.dynamic[i]) flags |= kFlagDynamic;
    if (!f.foreground.empty() && f.foreground[i]) flags |= kFlagForeground;
    w.u8(flags);
  }
  return w.bytes();
}

inline FrameRecord decode_frame(const std::vector<char>& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  r.expect_magic("SFPC");
  r.expect_version();
  const auto n = r.u32();
  const double ts = r.f64();
  r.expect_payload(static_cast<std::size_t>(n) * 13);
  FrameRecord f;
  std::vector<Point3> pts(n);
  f.ground.resize(n);
  f.dynamic.resize(n);
  f.foreground.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double x = r.f32(), y = r.f32(), z = r.f32();
    pts[i] = Point3(x, y, z);
    const auto flags = r.u8();
    f.ground[i] = (flags & kFlagGround) ? 1 : 0;
    f.dynamic[i] = (flags & kFlagDynamic) ? 1 : 0;
    f.foreground[i] = (flags & kFlagForeground) ? 1 : 0;
  }
  try {
    f.cloud = PointCloud(std::move(pts), "sensor", ts);
  } catch (const std::invalid_argument& e) {
    throw DataError(what + ": " + e.what());
  }
  return f;
}

inline void write_frame(const fs::path& path, const FrameRecord& f) {
  write_atomic(path, encode_frame(f));
}

inline FrameRecord read_frame(const fs::path& path) {
  return decode_frame(read_bytes(path), path.string());
}

// ---------------------------------------------------------------- poses

struct PoseEntry {
  double timestamp = 0.0;
  RigidTransform pose;
};

/// One line per frame: timestamp and the row-major 3x4 [R|t].
inline std::string format_poses(std::span<const PoseEntry> poses) {
  std::string out;
  for (const auto& e : poses) {
    out += fmt_real(e.timestamp);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out += ' ' + fmt_real(e.pose.rotation()(r, c));
      out += ' ' + fmt_real(e.pose.translation()[r]);
    }
    out += '\n';
  }
  return out;
}

/// Rotations off SO(3) by more than 1e-6 are projected back and reported on
/// `warn`; anything that is not close to a rotation at all is rejected.
inline std::vector<PoseEntry> parse_poses(const std::string& text, const std::string& what,
                                          std::ostream* warn = nullptr) {
  std::vector<PoseEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    double v[13];
    for (double& x : v)
      if (!(ls >> x)) throw DataError(what + ":" + std::to_string(lineno) + ": expected 13 reals");
    std::string extra;
    if (ls >> extra) throw DataError(what + ":" + std::to_string(lineno) + ": trailing data");
    Eigen::Matrix3d rot;
    Vec3 t;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rot(r, c) = v[1 + 4 * r + c];
      t[r] = v[4 + 4 * r];
    }
    if (!rot.allFinite() || !t.allFinite() || !std::isfinite(v[0]))
      throw DataError(what + ":" + std::to_string(lineno) + ": non-finite pose");
    if (!RigidTransform::is_rotation(rot, 1e-9)) {
      const Eigen::Matrix3d fixed = RigidTransform::orthonormalize(rot);
      const double dev = (fixed - rot).cwiseAbs().maxCoeff();
      if (dev > 1e-2 || rot.determinant() <= 0.0)
        throw DataError(what + ":" + std::to_string(lineno) + ": rotation is not orthonormal");
      if (!RigidTransform::is_rotation(rot, 1e-6) && warn)
        *warn << "warning: " << what << ":" << lineno << ": rotation re-orthonormalized (deviation "
              << dev << ")\n";
      rot = fixed;
    }
    out.push_back({v[0], RigidTransform(rot, t)});
  }
  return out;
}

inline void write_poses(const fs::path& path, std::span<const PoseEntry> poses) {
  write_atomic(path, format_poses(poses));
}

inline std::vector<PoseEntry> read_poses(const fs::path& path, std::ostream* warn = nullptr) {
  return parse_poses(read_text(path), path.string(), warn);
}

// ---------------------------------------------------------------- flows, masks

inline std::vector<char> encode_flow(std::span<const Vec3> flow) {
  detail::ByteWriter w;
  w.raw("SFFL");
  w.u16(kFormatVersion);
  w.u32(detail::checked_count(flow.size()));
  for (const auto& f : flow)
    for (int k = 0; k < 3; ++k) w.f32(static_cast<float>(f[k]));
  return w.bytes();
}

inline FlowField decode_flow(const std::vector<char>& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  r.expect_magic("SFFL");
  r.expect_version();
  const auto n = r.u32();
  r.expect_payload(static_cast<std::size_t>(n) * 12);
  FlowField out(n);
  for (auto& f : out) {
    const double x = r.f32(), y = r.f32(), z = r.f32();
    f = Vec3(x, y, z);
    if (!is_finite(f)) throw DataError(what + ": non-finite flow");
  }
  return out;
}

inline void write_flow(const fs::path& path, std::span<const Vec3> flow) {
  write_atomic(path, encode_flow(flow));
}
inline FlowField read_flow(const fs::path& path) {
  return decode_flow(read_bytes(path), path.string());
}

inline void write_mask(const fs::path& path, std::span<const std::uint8_t> mask) {
  detail::ByteWriter w;
  w.raw("SFMK");
  w.u16(kFormatVersion);
  w.u32(detail::checked_count(mask.size()));
  for (auto m : mask) w.u8(m ? 1 : 0);
  write_atomic(path, w.bytes());
}

inline PointMask read_mask(const fs::path& path) {
  const auto bytes = read_bytes(path);
  detail::ByteReader r(bytes, path.string());
  r.expect_magic("SFMK");
  r.expect_version();
  const auto n = r.u32();
  r.expect_payload(n);
  PointMask out(n);
  for (auto& m : out) {
    m = r.u8();
    if (m > 1) throw DataError(path.string() + ": mask byte is not 0/1");
  }
  return out;
}

// ---------------------------------------------------------------- labels

/// Ground-truth sidecar: ego motion to the next frame and per-point flow.
struct FrameLabels {
  RigidTransform ego_to_next;
  FlowField gt_flow;
};

inline void write_labels(const fs::path& path, const FrameLabels& l) {
  detail::ByteWriter w;
  w.raw("SFGT");
  w.u16(kFormatVersion);
  w.u32(detail::checked_count(l.gt_flow.size()));
  detail::put_transform(w, l.ego_to_next);
  for (const auto& f : l.gt_flow)
    for (int k = 0; k < 3; ++k) w.f64(f[k]);
  write_atomic(path, w.bytes());
}

inline FrameLabels read_labels(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const auto what = path.string();
  detail::ByteReader r(bytes, what);
  r.expect_magic("SFGT");
  r.expect_version();
  const auto n = r.u32();
  r.expect_payload(96 + static_cast<std::size_t>(n) * 24);
  FrameLabels l;
  l.ego_to_next = detail::get_transform(r, what);
  l.gt_flow.resize(n);
  for (auto& f : l.gt_flow) {
    const double x = r.f64(), y = r.f64(), z = r.f64();
    f = Vec3(x, y, z);
  }
  return l;
}

// ---------------------------------------------------------------- clusters

inline std::string format_clusters(const ClusterSet& set, std::size_t point_count) {
  std::string out = "SFCL 1\npoints " + std::to_string(point_count) + "\nclusters " +
                    std::to_string(set.clusters.size()) + "\n";
  for (const auto& c : set.clusters) {
    out += "cluster " + std::to_string(c.size());
    for (auto i : c) out += ' ' + std::to_string(i);
    out += '\n';
  }
  out += "noise " + std::to_string(set.noise.size());
  for (auto i : set.noise) out += ' ' + std::to_string(i);
  out += '\n';
  return out;
}

/// Parses a cluster file; `point_count` is returned through the pointer.
inline ClusterSet parse_clusters(const std::string& text, const std::string& what,
                                 std::size_t* point_count = nullptr) {
  std::istringstream in(text);
  std::string magic, word;
  int version = 0;
  std::size_t points = 0, count = 0;
  if (!(in >> magic >> version) || magic != "SFCL" || version != 1)
    throw DataError(what + ": not a cluster file");
  if (!(in >> word >> points) || word != "points") throw DataError(what + ": missing points");
  if (!(in >> word >> count) || word != "clusters") throw DataError(what + ": missing clusters");
  const auto read_list = [&](const char* tag) {
    std::size_t len = 0;
    if (!(in >> word >> len) || word != tag) throw DataError(what + ": expected " + tag);
    std::vector<std::size_t> v(len);
    for (auto& i : v)
      if (!(in >> i) || i >= points) throw DataError(what + ": bad index in " + tag);
    return v;
  };
  ClusterSet set;
  for (std::size_t k = 0; k < count; ++k) set.clusters.push_back(read_list("cluster"));
  set.noise = read_list("noise");
  if (point_count) *point_count = points;
  return set;
}

inline void write_clusters(const fs::path& path, const ClusterSet& set, std::size_t point_count) {
  write_atomic(path, format_clusters(set, point_count));
}

inline ClusterSet read_clusters(const fs::path& path, std::size_t* point_count = nullptr) {
  return parse_clusters(read_text(path), path.string(), point_count);
}

// ---------------------------------------------------------------- grid cache

/// Grid plus the classifier settings it was built with. Blocks are written in
/// key order so equal grids give byte-identical files.
inline std::vector<char> encode_grid(const OccupancyGrid& grid, const ClassifierConfig& cfg) {
  detail::ByteWriter w;
  w.raw("SFOG");
  w.u16(kFormatVersion);
  w.f64(cfg.voxel_size);
  w.i32(cfg.hit_padding);
  w.f64(cfg.free_margin);
  w.f64(cfg.max_range);
  const auto& ts = grid.frame_timestamps();
  w.u32(detail::checked_count(ts.size()));
  for (double t : ts) w.f64(t);
  std::vector<std::size_t> order(grid.block_count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return grid.block_key_at(a) < grid.block_key_at(b); });
  w.u64(order.size());
  for (auto i : order) {
    w.u64(grid.block_key_at(i));
    const auto& b = grid.block_at(i);
    for (auto word : b.hit) w.u64(word);
    for (auto word : b.free) w.u64(word);
  }
  return w.bytes();
}

struct GridCache {
  OccupancyGrid grid;
  ClassifierConfig config;
};

inline GridCache decode_grid(const std::vector<char>& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  r.expect_magic("SFOG");
  r.expect_version();
  ClassifierConfig cfg;
  cfg.voxel_size = r.f64();
  cfg.hit_padding = r.i32();
  cfg.free_margin = r.f64();
  cfg.max_range = r.f64();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(what + ": " + e.what());
  }
  GridCache out{OccupancyGrid(cfg.voxel_size), cfg};
  const auto frames = r.u32();
  for (std::uint32_t i = 0; i < frames; ++i) out.grid.record_frame(r.f64());
  const auto blocks = r.u64();
  constexpr std::size_t block_bytes = 8 + 2 * 8 * sceneflow::detail::kBlockWords;
  if (blocks > r.remaining() / block_bytes) throw DataError(what + ": truncated file");
  r.expect_payload(blocks * block_bytes);
  for (std::uint64_t i = 0; i < blocks; ++i) {
    auto& b = out.grid.block(r.u64());
    for (auto& word : b.hit) word = r.u64();
    for (auto& word : b.free) word = r.u64();
  }
  return out;
}

inline void write_grid(const fs::path& path, const OccupancyGrid& grid,
                       const ClassifierConfig& cfg) {
  write_atomic(path, encode_grid(grid, cfg));
}

inline GridCache read_grid(const fs::path& path) {
  return decode_grid(read_bytes(path), path.string());
}

// ---------------------------------------------------------------- run config

struct RunConfig {
  ClassifierConfig classifier;
  ClusterConfig cluster;
  SolverConfig solver;
  EvalConfig eval;

  void validate() const {
    classifier.validate();
    cluster.validate();
    solver.validate();
    eval.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_real(const std::string& v, const std::string& key) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(out))
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline long long parse_integer(const std::string& v, const std::string& key) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size())
    throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

inline std::size_t parse_count(const std::string& v, const std::string& key) {
  const auto n = parse_integer(v, key);
  if (n < 0) throw std::invalid_argument("config key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(n);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& l = c.solver.loss;
  if (key == "voxel_size") c.classifier.voxel_size = parse_real(v, key);
  else if (key == "d_p") c.classifier.hit_padding = static_cast<int>(parse_integer(v, key));
  else if (key == "d_s") c.classifier.free_margin = parse_real(v, key);
  else if (key == "max_range") c.classifier.max_range = parse_real(v, key);
  else if (key == "min_size") c.cluster.min_cluster_size = parse_count(v, key);
  else if (key == "epsilon") c.cluster.epsilon = parse_real(v, key);
  else if (key == "max_iterations") c.solver.max_iterations = parse_count(v, key);
  else if (key == "learning_rate") c.solver.learning_rate = parse_real(v, key);
  else if (key == "convergence_tol") c.solver.convergence_tol = parse_real(v, key);
  else if (key == "max_backtracks") c.solver.max_backtracks = parse_count(v, key);
  else if (key == "seed") c.solver.seed = static_cast<std::uint64_t>(parse_count(v, key));
  else if (key == "init_jitter") c.solver.init_jitter = parse_real(v, key);
  else if (key == "dynamic_threshold") c.eval.dynamic_threshold = parse_real(v, key);
  else if (key == "roi_half_extent") c.eval.roi_half_extent = parse_real(v, key);
  else if (key == "loss.cham") l.switches.cham = parse_bool(v, key);
  else if (key == "loss.dcham") l.switches.dcham = parse_bool(v, key);
  else if (key == "loss.static") l.switches.stat = parse_bool(v, key);
  else if (key == "loss.dcls") l.switches.dcls = parse_bool(v, key);
  else if (key == "weight.cham") l.weights.cham = parse_real(v, key);
  else if (key == "weight.dcham") l.weights.dcham = parse_real(v, key);
  else if (key == "weight.static") l.weights.stat = parse_real(v, key);
  else if (key == "weight.dcls") l.weights.dcls = parse_real(v, key);
  else if (key == "ds_strategy") l.ds_strategy = parse_ds_strategy(v);
  else if (key == "cluster_selector") l.selector = parse_cluster_selector(v);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

inline RunConfig parse_run_config(const std::string& text, const std::string& what = "config") {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(what + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(c, detail::trim(std::string_view(t).substr(0, eq)),
                       detail::trim(std::string_view(t).substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(what + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig read_run_config(const fs::path& path) {
  return parse_run_config(read_text(path), path.string());
}

inline std::string format_run_config(const RunConfig& c) {
  const auto& l = c.solver.loss;
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::string out;
  const auto kv = [&](const char* k, const std::string& v) { out += std::string(k) + " = " + v + "\n"; };
  kv("voxel_size", fmt_real(c.classifier.voxel_size));
  kv("d_p", std::to_string(c.classifier.hit_padding));
  kv("d_s", fmt_real(c.classifier.free_margin));
  kv("max_range", fmt_real(c.classifier.max_range));
  kv("min_size", std::to_string(c.cluster.min_cluster_size));
  kv("epsilon", fmt_real(c.cluster.epsilon));
  kv("max_iterations", std::to_string(c.solver.max_iterations));
  kv("learning_rate", fmt_real(c.solver.learning_rate));
  kv("convergence_tol", fmt_real(c.solver.convergence_tol));
  kv("max_backtracks", std::to_string(c.solver.max_backtracks));
  kv("seed", std::to_string(c.solver.seed));
  kv("init_jitter", fmt_real(c.solver.init_jitter));
  kv("dynamic_threshold", fmt_real(c.eval.dynamic_threshold));
  kv("roi_half_extent", fmt_real(c.eval.roi_half_extent));
  kv("loss.cham", b(l.switches.cham));
  kv("loss.dcham", b(l.switches.dcham));
  kv("loss.static", b(l.switches.stat));
  kv("loss.dcls", b(l.switches.dcls));
  kv("weight.cham", fmt_real(l.weights.cham));
  kv("weight.dcham", fmt_real(l.weights.dcham));
  kv("weight.static", fmt_real(l.weights.stat));
  kv("weight.dcls", fmt_real(l.weights.dcls));
  kv("ds_strategy", to_string(l.ds_strategy));
  kv("cluster_selector", to_string(l.selector));
  return out;
}

// ---------------------------------------------------------------- reports

inline std::string format_loss_report(const LossReport& r) {
  std::string out;
  out += "l_cham " + fmt_real(r.l_cham) + "\n";
  out += "l_dcham " + fmt_real(r.l_dcham) + "\n";
  out += "l_static " + fmt_real(r.l_static) + "\n";
  out += "l_dcls " + fmt_real(r.l_dcls) + "\n";
  out += "l_ds " + fmt_real(r.l_ds) + "\n";
  out += "l_total " + fmt_real(r.l_total) + "\n";
  double gnorm = 0.0;
  for (const auto& g : r.grad) gnorm += g.squaredNorm();
  out += "grad_norm " + fmt_real(std::sqrt(gnorm)) + "\n";
  return out;
}

inline std::string format_epe_report(const EpeReport& r) {
  std::string out;
  out += "epe_3way " + fmt_real(r.epe_3way) + "\n";
  out += "epe_fd " + fmt_real(r.fd.epe) + " count " + std::to_string(r.fd.count) + "\n";
  out += "epe_fs " + fmt_real(r.fs.epe) + " count " + std::to_string(r.fs.count) + "\n";
  out += "epe_bs " + fmt_real(r.bs.epe) + " count " + std::to_string(r.bs.count) + "\n";
  out += "outside_roi " + std::to_string(r.outside_roi) + "\n";
  out += "background_dynamic " + std::to_string(r.background_dynamic) + "\n";
  return out;
}

inline std::string format_trace_csv(const SolveTrace& t) {
  std::string out = "iteration,l_cham,l_dcham,l_static,l_dcls,l_ds,l_total,step_scale\n";
  for (const auto& e : t.entries) {
    out += std::to_string(e.iteration);
    for (double v : {e.l_cham, e.l_dcham, e.l_static, e.l_dcls, e.l_ds, e.l_total, e.step_scale})
      out += ',' + fmt_real(v);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- sequences

inline fs::path frame_path(const fs::path& dir, std::size_t index, std::string_view ext) {
  char name[32];
  std::snprintf(name, sizeof name, "%06zu", index);
  return dir / (std::string(name) + std::string(ext));
}

/// Number of consecutive frames 000000.sfpc, 000001.sfpc, ... in `dir`.
inline std::size_t count_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::size_t n = 0;
  while (fs::exists(frame_path(dir, n, ".sfpc"))) ++n;
  return n;
}

/// Frames in their sensor frames and the sensor-to-world poses.
struct Sequence {
  std::vector<FrameRecord> frames;
  std::vector<PoseEntry> poses;

  [[nodiscard]] std::vector<PointCloud> clouds() const {
    std::vector<PointCloud> out;
    for (const auto& f : frames) out.push_back(f.cloud);
    return out;
  }
  [[nodiscard]] std::vector<RigidTransform> transforms() const {
    std::vector<RigidTransform> out;
    for (const auto& p : poses) out.push_back(p.pose);
    return out;
  }
};

inline Sequence read_sequence(const fs::path& dir, std::ostream* warn = nullptr) {
  Sequence s;
  const auto n = count_frames(dir);
  if (n == 0) throw DataError("no frames in " + dir.string());
  s.poses = read_poses(dir / "poses.txt", warn);
  if (s.poses.size() != n)
    throw DataError(dir.string() + ": " + std::to_string(n) + " frames but " +
                    std::to_string(s.poses.size()) + " poses");
  for (std::size_t k = 0; k < n; ++k) s.frames.push_back(read_frame(frame_path(dir, k, ".sfpc")));
  return s;
}

/// Writes a generated scene as a sequence directory: frames with their label
/// flags, per-frame ground-truth sidecars and the pose file.
inline void write_scene(const fs::path& dir, std::span<const LabeledFrame> frames) {
  fs::create_directories(dir);
  std::vector<PoseEntry> poses;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& f = frames[k];
    write_frame(frame_path(dir, k, ".sfpc"), {f.cloud, f.ground, f.gt_dynamic, f.foreground});
    write_labels(frame_path(dir, k, ".sfgt"), {f.ego_to_next, f.gt_flow});
    poses.push_back({f.cloud.timestamp(), f.pose});
  }
  write_poses(dir / "poses.txt", poses);
}

// ---------------------------------------------------------------- scene specs

/// Text scene description. Lines:
///   frames N | frequency HZ | seed S | ground HALF_EXTENT | spacing S | jitter J
///   ground_spacing S | occlusion on|off | range_noise SIGMA | max_range R
///   channels N | elevation MIN MAX | azimuth_res DEG
///   ego X Y Z YAW VX VY VZ YAW_RATE
///   box CX CY CZ L W H YAW background|foreground VX VY VZ YAW_RATE [SPACING]
///   pole X Y RADIUS HEIGHT
///   builtin fig3 | builtin suite K
inline SceneSpec parse_scene_spec(const std::string& text, const std::string& what = "scene") {
  SceneSpec s;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string cmd;
    if (!(ls >> cmd)) continue;
    const auto fail = [&](const std::string& msg) {
      return std::invalid_argument(what + ":" + std::to_string(lineno) + ": " + msg);
    };
    const auto reals = [&](std::size_t n) {
      std::vector<double> v(n);
      for (auto& x : v)
        if (!(ls >> x)) throw fail("'" + cmd + "' expects " + std::to_string(n) + " numbers");
      return v;
    };
    if (cmd == "builtin") {
      std::string name;
      ls >> name;
      if (name == "fig3") {
        s = fig3_spec();
      } else if (name == "suite") {
        std::size_t k = 0;
        if (!(ls >> k)) throw fail("builtin suite needs an index");
        s = suite_scene(k);
      } else {
        throw fail("unknown builtin '" + name + "'");
      }
    } else if (cmd == "frames") {
      s.frame_count = static_cast<std::size_t>(reals(1)[0]);
    } else if (cmd == "frequency") {
      s.frequency = reals(1)[0];
    } else if (cmd == "seed") {
      std::uint64_t seed = 0;
      if (!(ls >> seed)) throw fail("seed expects an integer");
      s.seed = seed;
    } else if (cmd == "ground") {
      s.ground_half_extent = reals(1)[0];
    } else if (cmd == "spacing") {
      s.surface_spacing = reals(1)[0];
    } else if (cmd == "jitter") {
      s.surface_jitter = reals(1)[0];
    } else if (cmd == "ground_spacing") {
      s.ground_spacing = reals(1)[0];
    } else if (cmd == "occlusion") {
      std::string v;
      ls >> v;
      s.sensor.occlusion = detail::parse_bool(v, cmd);
    } else if (cmd == "range_noise") {
      s.sensor.range_noise = reals(1)[0];
    } else if (cmd == "max_range") {
      s.sensor.max_range = reals(1)[0];
    } else if (cmd == "channels") {
      s.sensor.channels = static_cast<int>(reals(1)[0]);
    } else if (cmd == "elevation") {
      const auto v = reals(2);
      s.sensor.elevation_min_deg = v[0];
      s.sensor.elevation_max_deg = v[1];
    } else if (cmd == "azimuth_res") {
      s.sensor.azimuth_resolution_deg = reals(1)[0];
    } else if (cmd == "ego") {
      const auto v = reals(8);
      s.ego.start = RigidTransform::from_yaw(v[3], Vec3(v[0], v[1], v[2]));
      s.ego.velocity = Vec3(v[4], v[5], v[6]);
      s.ego.yaw_rate = v[7];
    } else if (cmd == "box") {
      BoxObject b;
      const auto v = reals(7);
      b.center = Vec3(v[0], v[1], v[2]);
      b.size = Vec3(v[3], v[4], v[5]);
      b.yaw = v[6];
      std::string cls;
      ls >> cls;
      if (cls == "foreground") b.surface = SurfaceClass::foreground;
      else if (cls == "background") b.surface = SurfaceClass::background;
      else throw fail("box class must be foreground or background");
      const auto m = reals(4);
      b.velocity = Vec3(m[0], m[1], m[2]);
      b.yaw_rate = m[3];
      double spacing = 0.0;
      if (ls >> spacing) b.spacing = spacing;
      s.boxes.push_back(b);
    } else if (cmd == "pole") {
      const auto v = reals(4);
      s.poles.push_back({v[0], v[1], v[2], v[3]});
    } else {
      throw fail("unknown directive '" + cmd + "'");
    }
    std::string extra;
    if (cmd != "box" && (ls >> extra)) throw fail("trailing data after '" + cmd + "'");
  }
  s.validate();
  return s;
}

}  // namespace sceneflow::io
