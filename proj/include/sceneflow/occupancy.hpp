#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sceneflow/geometry.hpp"

namespace sceneflow {

struct ClassifierConfig {
  double voxel_size = 0.2;   // m
  int hit_padding = 1;       // voxels around each endpoint that count as hit (d_p)
  double free_margin = 0.2;  // m; rays stop this far before the endpoint (d_s)
  double max_range = 70.0;   // m

  void validate() const {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel_size must be > 0");
    if (hit_padding < 0) throw std::invalid_argument("hit_padding must be >= 0");
    if (!(free_margin >= 0.0)) throw std::invalid_argument("free_margin must be >= 0");
    if (!(max_range > 0.0)) throw std::invalid_argument("max_range must be > 0");
  }
};

struct VoxelKey {
  std::int32_t x = 0, y = 0, z = 0;
  auto operator<=>(const VoxelKey&) const = default;
};

struct VoxelEvidence {
  bool ever_hit = false;
  bool ever_free = false;
};

namespace detail {

inline constexpr int kBlockShift = 4;  // 16^3 voxels per block
inline constexpr int kBlockDim = 1 << kBlockShift;
inline constexpr int kBlockMask = kBlockDim - 1;
inline constexpr int kBlockVoxels = kBlockDim * kBlockDim * kBlockDim;
inline constexpr int kBlockWords = kBlockVoxels / 64;

using BlockBits = std::array<std::uint64_t, kBlockWords>;

struct Block {
  BlockBits hit{};
  BlockBits free{};
};

inline std::uint64_t pack_block(std::int32_t bx, std::int32_t by, std::int32_t bz) {
  constexpr std::int64_t off = std::int64_t{1} << 20;
  constexpr std::uint64_t m = (std::uint64_t{1} << 21) - 1;
  return ((static_cast<std::uint64_t>(bx + off) & m) << 42) |
         ((static_cast<std::uint64_t>(by + off) & m) << 21) |
         (static_cast<std::uint64_t>(bz + off) & m);
}

inline std::array<std::int32_t, 3> unpack_block(std::uint64_t key) {
  constexpr std::int64_t off = std::int64_t{1} << 20;
  constexpr std::uint64_t m = (std::uint64_t{1} << 21) - 1;
  return {static_cast<std::int32_t>(static_cast<std::int64_t>((key >> 42) & m) - off),
          static_cast<std::int32_t>(static_cast<std::int64_t>((key >> 21) & m) - off),
          static_cast<std::int32_t>(static_cast<std::int64_t>(key & m) - off)};
}

inline int voxel_bit(std::int32_t x, std::int32_t y, std::int32_t z) {
  return ((x & kBlockMask) << (2 * kBlockShift)) | ((y & kBlockMask) << kBlockShift) |
         (z & kBlockMask);
}

/// Open-addressing map from packed block key to a dense block array.
class BlockMap {
 public:
  BlockMap() { rehash(1024); }

  Block* find(std::uint64_t key) {
    const auto slot = probe(key);
    return keys_[slot] == kEmpty ? nullptr : &blocks_[values_[slot]];
  }
  [[nodiscard]] const Block* find(std::uint64_t key) const {
    const auto slot = probe(key);
    return keys_[slot] == kEmpty ? nullptr : &blocks_[values_[slot]];
  }

  Block& get_or_insert(std::uint64_t key) {
    auto slot = probe(key);
    if (keys_[slot] != kEmpty) return blocks_[values_[slot]];
    if (2 * (blocks_.size() + 1) > keys_.size()) {
      rehash(keys_.size() * 2);
      slot = probe(key);
    }
    keys_[slot] = key;
    values_[slot] = static_cast<std::uint32_t>(blocks_.size());
    block_keys_.push_back(key);
    blocks_.emplace_back();
    return blocks_.back();
  }

  [[nodiscard]] std::size_t size() const { return blocks_.size(); }
  [[nodiscard]] std::span<const std::uint64_t> keys() const { return block_keys_; }
  [[nodiscard]] const Block& block_at(std::size_t i) const { return blocks_[i]; }

 private:
  static constexpr std::uint64_t kEmpty = ~std::uint64_t{0};

  static std::uint64_t mix(std::uint64_t k) {
    k ^= k >> 33;
    k *= 0xff51afd7ed558ccdULL;
    k ^= k >> 33;
    return k;
  }

  [[nodiscard]] std::size_t probe(std::uint64_t key) const {
    const std::size_t mask = keys_.size() - 1;
    std::size_t slot = mix(key) & mask;
    while (keys_[slot] != kEmpty && keys_[slot] != key) slot = (slot + 1) & mask;
    return slot;
  }

  void rehash(std::size_t capacity) {
    keys_.assign(capacity, kEmpty);
    values_.assign(capacity, 0);
    for (std::size_t i = 0; i < block_keys_.size(); ++i) {
      const auto slot = probe(block_keys_[i]);
      keys_[slot] = block_keys_[i];
      values_[slot] = static_cast<std::uint32_t>(i);
    }
  }

  std::vector<std::uint64_t> keys_;
  std::vector<std::uint32_t> values_;
  std::vector<std::uint64_t> block_keys_;  // insertion order, parallel to blocks_
  std::vector<Block> blocks_;
};

}  // namespace detail

/// Sparse voxel grid accumulating "seen occupied" / "seen free" evidence.
///
/// Storage is a hash of 16^3-voxel blocks holding two bitsets each. Only the
/// booleans are kept per voxel; the timestamps of integrated frames are
/// recorded at grid level.
class OccupancyGrid {
 public:
  explicit OccupancyGrid(double voxel_size = 0.2) : voxel_size_(voxel_size) {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel_size must be > 0");
  }

  [[nodiscard]] double voxel_size() const { return voxel_size_; }

  [[nodiscard]] VoxelKey key_of(const Point3& p) const {
    return {static_cast<std::int32_t>(std::floor(p.x() / voxel_size_)),
            static_cast<std::int32_t>(std::floor(p.y() / voxel_size_)),
            static_cast<std::int32_t>(std::floor(p.z() / voxel_size_))};
  }

  /// Evidence for a voxel; nullopt if the voxel was never observed.
  [[nodiscard]] std::optional<VoxelEvidence> evidence(const VoxelKey& k) const {
    const auto* b = blocks_.find(block_key(k));
    if (b == nullptr) return std::nullopt;
    const int bit = detail::voxel_bit(k.x, k.y, k.z);
    const VoxelEvidence e{test(b->hit, bit), test(b->free, bit)};
    if (!e.ever_hit && !e.ever_free) return std::nullopt;
    return e;
  }

  [[nodiscard]] std::size_t voxel_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_.block_at(i);
      for (int w = 0; w < detail::kBlockWords; ++w) n += std::popcount(b.hit[w] | b.free[w]);
    }
    return n;
  }

  [[nodiscard]] std::size_t free_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_.block_at(i);
      for (int w = 0; w < detail::kBlockWords; ++w) n += std::popcount(b.free[w]);
    }
    return n;
  }

  [[nodiscard]] const std::vector<double>& frame_timestamps() const { return timestamps_; }

  /// Same evidence booleans on every voxel (block layout and history may differ).
  [[nodiscard]] bool same_evidence(const OccupancyGrid& other) const {
    if (voxel_size_ != other.voxel_size_) return false;
    return covers(other) && other.covers(*this);
  }

  // Raw block access, used by serialization and frame integration.
  [[nodiscard]] std::size_t block_count() const { return blocks_.size(); }
  [[nodiscard]] std::uint64_t block_key_at(std::size_t i) const { return blocks_.keys()[i]; }
  [[nodiscard]] const detail::Block& block_at(std::size_t i) const { return blocks_.block_at(i); }
  detail::Block& block(std::uint64_t key) { return blocks_.get_or_insert(key); }
  void record_frame(double timestamp) { timestamps_.push_back(timestamp); }

 private:
  static bool test(const detail::BlockBits& bits, int bit) {
    return (bits[bit >> 6] >> (bit & 63)) & 1U;
  }
  static std::uint64_t block_key(const VoxelKey& k) {
    return detail::pack_block(k.x >> detail::kBlockShift, k.y >> detail::kBlockShift,
                              k.z >> detail::kBlockShift);
  }

  // Every set bit in `other` is set identically here (zero blocks ignored).
  [[nodiscard]] bool covers(const OccupancyGrid& other) const {
    static const detail::Block zero{};
    for (std::size_t i = 0; i < other.block_count(); ++i) {
      const auto& ob = other.block_at(i);
      const auto* mine = blocks_.find(other.block_key_at(i));
      const auto& b = mine ? *mine : zero;
      if (b.hit != ob.hit || b.free != ob.free) return false;
    }
    return true;
  }

  double voxel_size_;
  detail::BlockMap blocks_;
  std::vector<double> timestamps_;
};

namespace detail {

/// Per-frame scratch: padded hits and every voxel crossed by a shortened ray.
class FrameMarks {
 public:
  void set(std::int32_t x, std::int32_t y, std::int32_t z, bool hit) {
    const auto key = pack_block(x >> kBlockShift, y >> kBlockShift, z >> kBlockShift);
    if (key != cached_key_) {
      cached_ = &map_.get_or_insert(key);
      cached_key_ = key;
    }
    const int bit = voxel_bit(x, y, z);
    auto& bits = hit ? cached_->hit : cached_->free;
    bits[bit >> 6] |= std::uint64_t{1} << (bit & 63);
  }

  /// grid.hit |= hit; grid.free |= traversed & ~hit
  void merge_into(OccupancyGrid& grid) const {
    for (std::size_t i = 0; i < map_.size(); ++i) {
      const auto& src = map_.block_at(i);
      auto& dst = grid.block(map_.keys()[i]);
      for (int w = 0; w < kBlockWords; ++w) {
        dst.hit[w] |= src.hit[w];
        dst.free[w] |= src.free[w] & ~src.hit[w];
      }
    }
  }

 private:
  BlockMap map_;
  std::uint64_t cached_key_ = ~std::uint64_t{0};
  Block* cached_ = nullptr;
};

/// Visits every voxel intersected by segment [a, b] (coordinates in voxel
/// units), in order, using incremental boundary crossings (Amanatides-Woo).
template <typename Visit>
void walk_segment(const Vec3& a, const Vec3& b, Visit&& visit) {
  std::array<std::int32_t, 3> cell{}, last{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  const Vec3 d = b - a;
  for (int i = 0; i < 3; ++i) {
    cell[i] = static_cast<std::int32_t>(std::floor(a[i]));
    last[i] = static_cast<std::int32_t>(std::floor(b[i]));
    if (d[i] > 0) {
      step[i] = 1;
      t_delta[i] = 1.0 / d[i];
      t_max[i] = (cell[i] + 1 - a[i]) * t_delta[i];
    } else if (d[i] < 0) {
      step[i] = -1;
      t_delta[i] = -1.0 / d[i];
      t_max[i] = (a[i] - cell[i]) * t_delta[i];
    } else {
      step[i] = 0;
      t_delta[i] = std::numeric_limits<double>::infinity();
      t_max[i] = std::numeric_limits<double>::infinity();
    }
  }
  // The walk never takes more steps than the Manhattan distance between end cells.
  std::int64_t budget = std::abs(std::int64_t{last[0]} - cell[0]) +
                        std::abs(std::int64_t{last[1]} - cell[1]) +
                        std::abs(std::int64_t{last[2]} - cell[2]);
  visit(cell[0], cell[1], cell[2]);
  while (budget-- > 0) {
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > 1.0) break;
    cell[axis] += step[axis];
    t_max[axis] += t_delta[axis];
    visit(cell[0], cell[1], cell[2]);
  }
}

}  // namespace detail

/// Carves one frame into the grid. Points farther than max_range from the
/// origin are skipped; a ray whose endpoint coincides with the origin marks
/// its hit but traverses nothing.
inline void integrate_frame(OccupancyGrid& grid, std::span<const Point3> points,
                            const Point3& sensor_origin, const ClassifierConfig& cfg,
                            double timestamp = 0.0) {
  cfg.validate();
  if (grid.voxel_size() != cfg.voxel_size)
    throw std::invalid_argument("grid voxel size differs from classifier config");
  const double inv = 1.0 / cfg.voxel_size;
  const int pad = cfg.hit_padding;
  detail::FrameMarks marks;

  std::vector<std::uint8_t> in_range(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 ray = points[i] - sensor_origin;
    if (!is_finite(ray) || ray.norm() > cfg.max_range) continue;
    in_range[i] = 1;
    const auto vx = static_cast<std::int32_t>(std::floor(points[i].x() * inv));
    const auto vy = static_cast<std::int32_t>(std::floor(points[i].y() * inv));
    const auto vz = static_cast<std::int32_t>(std::floor(points[i].z() * inv));
    for (int dx = -pad; dx <= pad; ++dx)
      for (int dy = -pad; dy <= pad; ++dy)
        for (int dz = -pad; dz <= pad; ++dz) marks.set(vx + dx, vy + dy, vz + dz, true);
  }

  const Vec3 origin_v = sensor_origin * inv;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!in_range[i]) continue;
    const Vec3 ray = points[i] - sensor_origin;
    const double len = ray.norm();
    if (len <= cfg.free_margin || len == 0.0) continue;
    const Vec3 end = sensor_origin + ray * ((len - cfg.free_margin) / len);
    detail::walk_segment(origin_v, end * inv, [&](std::int32_t x, std::int32_t y, std::int32_t z) {
      marks.set(x, y, z, false);
    });
  }
  marks.merge_into(grid);
  grid.record_frame(timestamp);
}

inline void integrate_frame(OccupancyGrid& grid, const PointCloud& cloud,
                            const Point3& sensor_origin, const ClassifierConfig& cfg) {
  integrate_frame(grid, cloud.points(), sensor_origin, cfg, cloud.timestamp());
}

/// Partition of one frame into dynamic (true) and static points.
struct Classification {
  PointMask dynamic;
  std::size_t unobserved = 0;  // points whose voxel carries no evidence (reported static)
};

/// A point is dynamic iff its voxel was ever observed free.
inline Classification classify(const OccupancyGrid& grid, std::span<const Point3> points) {
  Classification out;
  out.dynamic.assign(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto ev = grid.evidence(grid.key_of(points[i]));
    if (!ev) {
      ++out.unobserved;
      continue;
    }
    out.dynamic[i] = ev->ever_free ? 1 : 0;
  }
  return out;
}

inline Classification classify(const OccupancyGrid& grid, const PointCloud& cloud) {
  return classify(grid, cloud.points());
}

/// Offline pass over a whole sequence: clouds in sensor frames, poses mapping
/// each sensor frame to a common world frame (sensor at the pose origin).
struct SequenceClassification {
  OccupancyGrid grid;
  std::vector<Classification> frames;
};

inline OccupancyGrid integrate_sequence(std::span<const PointCloud> clouds,
                                        std::span<const RigidTransform> poses,
                                        const ClassifierConfig& cfg) {
  if (clouds.size() != poses.size()) throw std::invalid_argument("clouds/poses size mismatch");
  OccupancyGrid grid(cfg.voxel_size);
  for (std::size_t f = 0; f < clouds.size(); ++f) {
    const auto world = apply_transform(clouds[f], poses[f]);
    integrate_frame(grid, world.points(), poses[f].translation(), cfg, clouds[f].timestamp());
  }
  return grid;
}

inline std::vector<Classification> classify_sequence(const OccupancyGrid& grid,
                                                     std::span<const PointCloud> clouds,
                                                     std::span<const RigidTransform> poses) {
  std::vector<Classification> out;
  out.reserve(clouds.size());
  for (std::size_t f = 0; f < clouds.size(); ++f)
    out.push_back(classify(grid, apply_transform(clouds[f], poses[f])));
  return out;
}

inline SequenceClassification classify_sequence(std::span<const PointCloud> clouds,
                                                std::span<const RigidTransform> poses,
                                                const ClassifierConfig& cfg) {
  auto grid = integrate_sequence(clouds, poses, cfg);
  auto frames = classify_sequence(grid, clouds, poses);
  return {std::move(grid), std::move(frames)};
}

}  // namespace sceneflow
