#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "subgmm/common.hpp"
#include "subgmm/gmm.hpp"

namespace subgmm {

struct OccupancyParams {
  float l_occ = 0.85f;   // logodds increment for a hit endpoint
  float l_free = -0.4f;  // logodds increment for a traversed cell
  float l_min = -2.0f;
  float l_max = 3.5f;
};

enum class CellState { Unknown, Free, Occupied };

// A cell is occupied above zero logodds, free below, unknown at exactly
// zero (never touched).
inline CellState classify(float logodds) {
  if (logodds > 0.0f) return CellState::Occupied;
  if (logodds < 0.0f) return CellState::Free;
  return CellState::Unknown;
}

using CellIndex = Eigen::Vector3i;

namespace detail {

// Amanatides-Woo voxel walk over the lattice anchored at `origin` with the
// given resolution. Visits the cell chain from a's cell to b's cell in
// order; `visit(cell, is_endpoint_cell)` returns false to stop early (used
// for grid-boundary clipping). Endpoint cell visited last, flagged.
template <typename Visitor>
void walk_ray(const Vec3& origin, double res, const Vec3& a, const Vec3& b,
              Visitor&& visit) {
  CellIndex ca, cb;
  for (int i = 0; i < 3; ++i) {
    ca[i] = int(std::floor((a[i] - origin[i]) / res));
    cb[i] = int(std::floor((b[i] - origin[i]) / res));
  }
  if (ca == cb) {
    visit(ca, true);
    return;
  }
  const Vec3 d = b - a;
  CellIndex step;
  Vec3 t_max, t_delta;
  for (int i = 0; i < 3; ++i) {
    if (d[i] > 0.0) {
      step[i] = 1;
      t_delta[i] = res / d[i];
      t_max[i] = (origin[i] + (ca[i] + 1) * res - a[i]) / d[i];
    } else if (d[i] < 0.0) {
      step[i] = -1;
      t_delta[i] = -res / d[i];
      t_max[i] = (origin[i] + ca[i] * res - a[i]) / d[i];
    } else {
      step[i] = 0;
      t_delta[i] = std::numeric_limits<double>::infinity();
      t_max[i] = std::numeric_limits<double>::infinity();
    }
  }
  // Manhattan cell distance bounds the step count in exact arithmetic.
  int steps_left = (ca - cb).cwiseAbs().sum() + 3;
  CellIndex cur = ca;
  while (true) {
    if (!visit(cur, false)) return;
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    cur[axis] += step[axis];
    t_max[axis] += t_delta[axis];
    if (cur == cb) {
      visit(cur, true);
      return;
    }
    if (--steps_left <= 0) return;
  }
}

inline float clamp_logodds(float v, const OccupancyParams& p) {
  return std::min(std::max(v, p.l_min), p.l_max);
}

}  // namespace detail

struct ChangeSet {
  std::array<uint32_t, 3> dims = {0, 0, 0};
  Vec3 origin = Vec3::Zero();
  // (linear cell index, new logodds), indices unique and ascending.
  std::vector<std::pair<uint32_t, float>> entries;
};

class LocalOccupancyGrid {
 public:
  LocalOccupancyGrid() = default;
  LocalOccupancyGrid(const Vec3& origin, const CellIndex& dims,
                     double resolution, OccupancyParams params = {})
      : origin_(origin), dims_(dims), resolution_(resolution),
        params_(params) {
    SUBGMM_CHECK(resolution_ > 0.0, BadConfig, "resolution must be positive");
    SUBGMM_CHECK((dims_.array() >= 1).all(), BadConfig,
                 "grid dims must be at least 1");
    const int64_t n =
        int64_t(dims_[0]) * int64_t(dims_[1]) * int64_t(dims_[2]);
    SUBGMM_CHECK(n <= (int64_t(1) << 31), BadConfig, "grid too large");
    logodds_.assign(size_t(n), 0.0f);
  }

  const Vec3& origin() const { return origin_; }
  const CellIndex& dims() const { return dims_; }
  double resolution() const { return resolution_; }
  const OccupancyParams& params() const { return params_; }
  size_t cell_count() const { return logodds_.size(); }
  const std::vector<float>& logodds() const { return logodds_; }

  Vec3 center() const {
    return origin_ + 0.5 * resolution_ * dims_.cast<double>();
  }

  CellIndex cell_of(const Vec3& p) const {
    CellIndex c;
    for (int i = 0; i < 3; ++i) {
      c[i] = int(std::floor((p[i] - origin_[i]) / resolution_));
    }
    return c;
  }

  bool in_bounds(const CellIndex& c) const {
    return (c.array() >= 0).all() && (c.array() < dims_.array()).all();
  }

  bool contains(const Vec3& p) const { return in_bounds(cell_of(p)); }

  uint32_t linear(const CellIndex& c) const {
    return uint32_t(c[0]) +
           uint32_t(dims_[0]) * (uint32_t(c[1]) + uint32_t(dims_[1]) * uint32_t(c[2]));
  }

  CellIndex unlinear(uint32_t idx) const {
    CellIndex c;
    c[0] = int(idx % uint32_t(dims_[0]));
    idx /= uint32_t(dims_[0]);
    c[1] = int(idx % uint32_t(dims_[1]));
    c[2] = int(idx / uint32_t(dims_[1]));
    return c;
  }

  Vec3 cell_center(const CellIndex& c) const {
    return origin_ + resolution_ * (c.cast<double>() + Vec3::Constant(0.5));
  }

  float at(const CellIndex& c) const { return logodds_[linear(c)]; }
  float at_linear(uint32_t idx) const { return logodds_[idx]; }

  CellState state_at(const Vec3& p) const {
    const CellIndex c = cell_of(p);
    if (!in_bounds(c)) return CellState::Unknown;
    return classify(at(c));
  }

  void set_linear(uint32_t idx, float value) { logodds_[idx] = value; }

  void add_logodds(const CellIndex& c, float delta) {
    float& v = logodds_[linear(c)];
    v = detail::clamp_logodds(v + delta, params_);
  }

  // Frees every traversed cell except the endpoint cell; marks the endpoint
  // occupied only when `hit`. Rays leaving the grid are clipped: inside
  // cells are still freed, the outside endpoint gets no mark.
  void raytrace_update(const Vec3& ray_origin, const Vec3& endpoint,
                       bool hit) {
    SUBGMM_CHECK(contains(ray_origin), OriginOutOfBounds,
                 "ray origin outside grid");
    const CellIndex end_cell = cell_of(endpoint);
    detail::walk_ray(origin_, resolution_, ray_origin, endpoint,
                     [&](const CellIndex& c, bool is_end) {
                       if (!in_bounds(c)) return false;
                       if (!is_end) add_logodds(c, params_.l_free);
                       return true;
                     });
    if (hit && in_bounds(end_cell)) add_logodds(end_cell, params_.l_occ);
  }

  // Shifts the window so the grid is centered at new_center snapped to the
  // existing cell lattice; overlapping cells keep their values, exposed
  // cells become unknown.
  void recenter(const Vec3& new_center) {
    const Vec3 desired = new_center - 0.5 * resolution_ * dims_.cast<double>();
    CellIndex shift;
    for (int i = 0; i < 3; ++i) {
      shift[i] = int(std::llround((desired[i] - origin_[i]) / resolution_));
    }
    if (shift == CellIndex::Zero()) return;
    std::vector<float> fresh(logodds_.size(), 0.0f);
    for (int z = 0; z < dims_[2]; ++z) {
      const int oz = z + shift[2];
      if (oz < 0 || oz >= dims_[2]) continue;
      for (int y = 0; y < dims_[1]; ++y) {
        const int oy = y + shift[1];
        if (oy < 0 || oy >= dims_[1]) continue;
        for (int x = 0; x < dims_[0]; ++x) {
          const int ox = x + shift[0];
          if (ox < 0 || ox >= dims_[0]) continue;
          fresh[linear({x, y, z})] = logodds_[linear({ox, oy, oz})];
        }
      }
    }
    logodds_ = std::move(fresh);
    origin_ += resolution_ * shift.cast<double>();
  }

 private:
  Vec3 origin_ = Vec3::Zero();
  CellIndex dims_ = CellIndex::Ones();
  double resolution_ = 0.1;
  OccupancyParams params_;
  std::vector<float> logodds_;
};

// Seed salt shared by every reconstruction of a given packet so sender
// loopback and receivers raytrace identical samples.
inline constexpr uint64_t kReconstructSeedSalt = 0x676d6d7265636f6eULL;

inline void reconstruct_from_packet(LocalOccupancyGrid& grid,
                                    const KeyframePacket& packet,
                                    const Pose& frame_fix) {
  const Vec3 sensor = frame_fix.apply(packet.sensor_pose.translation);
  SUBGMM_CHECK(grid.contains(sensor), OriginOutOfBounds,
               "transformed sensor pose outside local grid");
  const GaussianMixture mix =
      transform_gmm(packet.mixture, frame_fix.rotation, frame_fix.translation);
  const uint64_t seed =
      derive_seed(kReconstructSeedSalt, packet.robot_id, packet.sequence);
  const auto samples = sample_gmm(mix, packet.mixture.support_size, seed);
  for (const Vec3& s : samples) {
    grid.raytrace_update(sensor, s, true);
  }
}

inline ChangeSet integrate_cloud(LocalOccupancyGrid& grid,
                                 const Pose& sensor_pose,
                                 const std::vector<Vec3>& points) {
  std::unordered_map<uint32_t, float> before;
  const Vec3 sensor = sensor_pose.translation;
  SUBGMM_CHECK(grid.contains(sensor), OriginOutOfBounds,
               "sensor pose outside grid");
  for (const Vec3& p : points) {
    const CellIndex end_cell = grid.cell_of(p);
    detail::walk_ray(grid.origin(), grid.resolution(), sensor, p,
                     [&](const CellIndex& c, bool is_end) {
                       if (!grid.in_bounds(c)) return false;
                       const uint32_t idx = grid.linear(c);
                       before.emplace(idx, grid.at_linear(idx));
                       if (!is_end) grid.add_logodds(c, grid.params().l_free);
                       return true;
                     });
    if (grid.in_bounds(end_cell)) {
      const uint32_t idx = grid.linear(end_cell);
      before.emplace(idx, grid.at_linear(idx));
      grid.add_logodds(end_cell, grid.params().l_occ);
    }
  }
  ChangeSet cs;
  cs.dims = {uint32_t(grid.dims()[0]), uint32_t(grid.dims()[1]),
             uint32_t(grid.dims()[2])};
  cs.origin = grid.origin();
  for (const auto& [idx, old] : before) {
    if (grid.at_linear(idx) != old) {
      cs.entries.emplace_back(idx, grid.at_linear(idx));
    }
  }
  std::sort(cs.entries.begin(), cs.entries.end());
  return cs;
}

inline void apply_change_set(LocalOccupancyGrid& grid, const ChangeSet& cs) {
  const bool dims_ok = cs.dims[0] == uint32_t(grid.dims()[0]) &&
                       cs.dims[1] == uint32_t(grid.dims()[1]) &&
                       cs.dims[2] == uint32_t(grid.dims()[2]);
  SUBGMM_CHECK(dims_ok, MetaMismatch, "change set dims differ from grid");
  SUBGMM_CHECK((cs.origin - grid.origin()).cwiseAbs().maxCoeff() <
                   1e-5 * grid.resolution() + 1e-6,
               MetaMismatch, "change set origin differs from grid");
  const uint32_t n = uint32_t(grid.cell_count());
  for (const auto& [idx, value] : cs.entries) {
    SUBGMM_CHECK(idx < n, MetaMismatch, "change set index out of range");
    grid.set_linear(idx, value);
  }
}

// ---------------------------------------------------------------------------
// Octree baseline: cubic root of side resolution*2^max_depth, logodds kept
// in leaves at max depth. Untouched cells are unknown.
// ---------------------------------------------------------------------------

class OctreeMap {
 public:
  OctreeMap() = default;
  OctreeMap(const Vec3& origin, double resolution, int max_depth,
            OccupancyParams params = {})
      : origin_(origin), resolution_(resolution), max_depth_(max_depth),
        params_(params) {
    SUBGMM_CHECK(resolution_ > 0.0, BadConfig, "resolution must be positive");
    SUBGMM_CHECK(max_depth_ >= 0 && max_depth_ <= 20, BadConfig,
                 "max depth out of range");
  }

  const Vec3& origin() const { return origin_; }
  double resolution() const { return resolution_; }
  int max_depth() const { return max_depth_; }
  const OccupancyParams& params() const { return params_; }
  double extent() const { return resolution_ * double(uint64_t(1) << max_depth_); }
  size_t leaf_count() const { return leaves_.size(); }

  int cells_per_side() const { return int(uint64_t(1) << max_depth_); }

  bool in_bounds(const CellIndex& c) const {
    const int side = cells_per_side();
    return (c.array() >= 0).all() && (c.array() < side).all();
  }

  CellIndex cell_of(const Vec3& p) const {
    CellIndex c;
    for (int i = 0; i < 3; ++i) {
      c[i] = int(std::floor((p[i] - origin_[i]) / resolution_));
    }
    return c;
  }

  bool contains(const Vec3& p) const { return in_bounds(cell_of(p)); }

  static uint64_t morton(const CellIndex& c) {
    auto expand = [](uint64_t v) {
      v &= 0xfffff;  // 20 bits per axis
      v = (v | v << 32) & 0x1f00000000ffffULL;
      v = (v | v << 16) & 0x1f0000ff0000ffULL;
      v = (v | v << 8) & 0x100f00f00f00f00fULL;
      v = (v | v << 4) & 0x10c30c30c30c30c3ULL;
      v = (v | v << 2) & 0x1249249249249249ULL;
      return v;
    };
    return expand(uint64_t(c[0])) | (expand(uint64_t(c[1])) << 1) |
           (expand(uint64_t(c[2])) << 2);
  }

  float value_at(const CellIndex& c) const {
    const auto it = leaves_.find(morton(c));
    return it == leaves_.end() ? 0.0f : it->second;
  }

  CellState state_at(const Vec3& p) const {
    const CellIndex c = cell_of(p);
    if (!in_bounds(c)) return CellState::Unknown;
    return classify(value_at(c));
  }

  void add_logodds(const CellIndex& c, float delta) {
    float& v = leaves_[morton(c)];
    v = detail::clamp_logodds(v + delta, params_);
  }

  void set_leaf(const CellIndex& c, float value) { leaves_[morton(c)] = value; }

  // Leaves in Morton order; the serialized structural walk is derived from
  // this canonical ordering.
  std::vector<std::pair<uint64_t, float>> sorted_leaves() const {
    std::vector<std::pair<uint64_t, float>> out(leaves_.begin(), leaves_.end());
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  Vec3 origin_ = Vec3::Zero();
  double resolution_ = 0.1;
  int max_depth_ = 10;
  OccupancyParams params_;
  std::unordered_map<uint64_t, float> leaves_;
};

// Same ray-update semantics as the dense grid, stored sparsely.
inline void octree_integrate(OctreeMap& tree, const Pose& sensor_pose,
                             const std::vector<Vec3>& points) {
  const Vec3 sensor = sensor_pose.translation;
  SUBGMM_CHECK(tree.contains(sensor), OriginOutOfBounds,
               "sensor pose outside octree extent");
  for (const Vec3& p : points) {
    const CellIndex end_cell = tree.cell_of(p);
    detail::walk_ray(tree.origin(), tree.resolution(), sensor, p,
                     [&](const CellIndex& c, bool is_end) {
                       if (!tree.in_bounds(c)) return false;
                       if (!is_end) tree.add_logodds(c, tree.params().l_free);
                       return true;
                     });
    if (tree.in_bounds(end_cell)) {
      tree.add_logodds(end_cell, tree.params().l_occ);
    }
  }
}

}  // namespace subgmm
