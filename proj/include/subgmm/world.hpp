#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "subgmm/common.hpp"
#include "subgmm/geometry.hpp"
#include "subgmm/occupancy.hpp"

namespace subgmm {

// Dense ground-truth voxel field. Solid rock everywhere except carved
// passages; the outermost voxel shell is always solid so rays and robots
// cannot leave the volume.
struct World {
  Vec3 origin = Vec3::Zero();
  CellIndex dims = CellIndex(1, 1, 1);
  double resolution = 0.1;
  std::vector<uint8_t> occupied;  // 1 = solid

  size_t cell_count() const { return occupied.size(); }

  bool in_bounds(const CellIndex& c) const {
    return (c.array() >= 0).all() && (c.array() < dims.array()).all();
  }

  CellIndex cell_of(const Vec3& p) const {
    const Vec3 rel = (p - origin) / resolution;
    return CellIndex(int(std::floor(rel.x())), int(std::floor(rel.y())),
                     int(std::floor(rel.z())));
  }

  uint32_t linear(const CellIndex& c) const {
    return uint32_t(c[0]) +
           uint32_t(dims[0]) * (uint32_t(c[1]) + uint32_t(dims[1]) * uint32_t(c[2]));
  }

  CellIndex unlinear(uint32_t idx) const {
    CellIndex c;
    c[0] = int(idx % uint32_t(dims[0]));
    idx /= uint32_t(dims[0]);
    c[1] = int(idx % uint32_t(dims[1]));
    c[2] = int(idx / uint32_t(dims[1]));
    return c;
  }

  Vec3 cell_center(const CellIndex& c) const {
    return origin + resolution * (c.cast<double>() + Vec3(0.5, 0.5, 0.5));
  }

  bool solid(const CellIndex& c) const { return occupied[linear(c)] != 0; }

  bool solid_at(const Vec3& p) const {
    const CellIndex c = cell_of(p);
    return !in_bounds(c) || solid(c);
  }
};

enum class WorldTopology { Straight, Network };

struct WorldParams {
  Vec3 extent = Vec3(30.0, 20.0, 4.0);  // meters
  double resolution = 0.1;
  WorldTopology topology = WorldTopology::Network;
  double main_radius = 1.4;
  double branch_radius = 1.0;
  double narrow_radius = 0.7;
  double chamber_radius = 2.8;
  int branches = 4;
  std::vector<Vec3> spawns;  // connectivity seeds; carved free
  int max_retries = 5;
};

namespace detail {

inline void carve_capsule(World& w, const Vec3& a, const Vec3& b, double r) {
  const Vec3 lo = a.cwiseMin(b).array() - r;
  const Vec3 hi = a.cwiseMax(b).array() + r;
  const CellIndex clo = w.cell_of(lo);
  const CellIndex chi = w.cell_of(hi);
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  for (int z = std::max(clo[2], 0); z <= std::min(chi[2], w.dims[2] - 1); ++z) {
    for (int y = std::max(clo[1], 0); y <= std::min(chi[1], w.dims[1] - 1); ++y) {
      for (int x = std::max(clo[0], 0); x <= std::min(chi[0], w.dims[0] - 1);
           ++x) {
        const CellIndex c(x, y, z);
        const Vec3 p = w.cell_center(c);
        double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        if ((p - (a + t * ab)).norm() <= r) w.occupied[w.linear(c)] = 0;
      }
    }
  }
}

inline void carve_box(World& w, const Vec3& lo, const Vec3& hi) {
  const CellIndex clo = w.cell_of(lo);
  const CellIndex chi = w.cell_of(hi - Vec3::Constant(1e-9));
  for (int z = std::max(clo[2], 0); z <= std::min(chi[2], w.dims[2] - 1); ++z) {
    for (int y = std::max(clo[1], 0); y <= std::min(chi[1], w.dims[1] - 1); ++y) {
      for (int x = std::max(clo[0], 0); x <= std::min(chi[0], w.dims[0] - 1);
           ++x) {
        w.occupied[w.linear({x, y, z})] = 0;
      }
    }
  }
}

inline void seal_boundary(World& w) {
  for (int z = 0; z < w.dims[2]; ++z) {
    for (int y = 0; y < w.dims[1]; ++y) {
      for (int x = 0; x < w.dims[0]; ++x) {
        if (x == 0 || y == 0 || z == 0 || x == w.dims[0] - 1 ||
            y == w.dims[1] - 1 || z == w.dims[2] - 1) {
          w.occupied[w.linear({x, y, z})] = 1;
        }
      }
    }
  }
}

// 26-connected reachable free voxels from the seed positions.
inline size_t flood_fill_free(const World& w, const std::vector<Vec3>& seeds,
                              std::vector<uint8_t>* reached_out = nullptr) {
  std::vector<uint8_t> reached(w.cell_count(), 0);
  std::deque<uint32_t> queue;
  for (const Vec3& s : seeds) {
    const CellIndex c = w.cell_of(s);
    if (!w.in_bounds(c) || w.solid(c)) continue;
    const uint32_t idx = w.linear(c);
    if (!reached[idx]) {
      reached[idx] = 1;
      queue.push_back(idx);
    }
  }
  size_t count = queue.size();
  while (!queue.empty()) {
    const CellIndex c = w.unlinear(queue.front());
    queue.pop_front();
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0 && dz == 0) continue;
          const CellIndex n = c + CellIndex(dx, dy, dz);
          if (!w.in_bounds(n) || w.solid(n)) continue;
          const uint32_t idx = w.linear(n);
          if (!reached[idx]) {
            reached[idx] = 1;
            ++count;
            queue.push_back(idx);
          }
        }
      }
    }
  }
  if (reached_out) *reached_out = std::move(reached);
  return count;
}

}  // namespace detail

// Procedural tunnel worlds. Straight: one axis-aligned box corridor.
// Network: a wavy spine along x with alternating side branches, one narrow
// passage and one open chamber. Deterministic per seed.
inline World generate_world(const WorldParams& params, uint64_t seed) {
  SUBGMM_CHECK(params.resolution > 0.0 && (params.extent.array() > 0.0).all(),
               InfeasibleParams, "nonpositive world extent or resolution");
  World w;
  w.origin = Vec3::Zero();
  w.resolution = params.resolution;
  for (int i = 0; i < 3; ++i) {
    w.dims[i] = std::max(3, int(std::round(params.extent[i] / params.resolution)));
  }

  std::vector<Vec3> seeds = params.spawns;
  if (seeds.empty()) {
    seeds.push_back(Vec3(3.0, params.extent.y() / 2.0, params.extent.z() / 2.0));
  }

  for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
    w.occupied.assign(size_t(w.dims[0]) * w.dims[1] * w.dims[2], 1);
    Rng rng(derive_seed(seed, 0x776f726c64ULL, uint64_t(attempt)));
    const double cy = params.extent.y() / 2.0;
    const double cz = params.extent.z() / 2.0;

    if (params.topology == WorldTopology::Straight) {
      const double hw = params.main_radius;
      const double hh = std::min(params.main_radius, cz - 2.0 * params.resolution);
      detail::carve_box(w, Vec3(params.resolution * 2.0, cy - hw, cz - hh),
                        Vec3(params.extent.x() - params.resolution * 2.0,
                             cy + hw, cz + hh));
    } else {
      // Spine: chained capsules with lateral wobble.
      const double x0 = 2.0;
      const double x1 = params.extent.x() - 2.0;
      const int segs = std::max(3, int((x1 - x0) / 4.0));
      Vec3 prev(x0, cy, cz);
      std::vector<Vec3> joints{prev};
      for (int i = 1; i <= segs; ++i) {
        const double x = x0 + (x1 - x0) * double(i) / double(segs);
        const double y =
            std::clamp(cy + rng.uniform(-1.5, 1.5), 3.0, params.extent.y() - 3.0);
        const Vec3 next(x, i == segs ? cy : y, cz);
        detail::carve_capsule(w, prev, next,
                              params.main_radius + rng.uniform(-0.15, 0.15));
        joints.push_back(next);
        prev = next;
      }
      // Branches alternate sides; one is the narrow passage. Each ends in
      // a small room so there is something to find.
      for (int b = 0; b < params.branches; ++b) {
        const size_t ji = 1 + size_t(b) * (joints.size() - 2) /
                                  std::max(1, params.branches);
        const Vec3 base = joints[std::min(ji, joints.size() - 1)];
        const double side = (b % 2 == 0) ? 1.0 : -1.0;
        const double wall =
            side > 0 ? params.extent.y() - 2.2 : 2.2;
        const double r =
            (b == 1) ? params.narrow_radius : params.branch_radius;
        const Vec3 tip(std::clamp(base.x() + rng.uniform(-2.0, 2.0), 3.0,
                                  params.extent.x() - 3.0),
                       wall, cz);
        detail::carve_capsule(w, base, tip, r);
        detail::carve_capsule(w, tip, tip, std::max(1.2, r));
      }
      // Open chamber on the spine.
      const Vec3 chamber(x0 + (x1 - x0) * 0.65, cy, cz);
      detail::carve_capsule(
          w, chamber, chamber,
          std::min(params.chamber_radius, cz - 2.0 * params.resolution));
    }

    for (const Vec3& s : seeds) {
      // The spawn room must hold every robot of a team at mutual cylinder
      // clearance with wall clearance to spare, or the first contested plan
      // corners someone against rock before the map is open enough to yield.
      detail::carve_capsule(w, s, s, 2.2);
      // Connect the spawn bubble to the main structure.
      detail::carve_capsule(w, s, Vec3(s.x() + 2.0, cy, cz), 1.2);
    }
    detail::seal_boundary(w);

    size_t free_total = 0;
    for (uint8_t v : w.occupied) free_total += v == 0;
    const size_t reached = detail::flood_fill_free(w, seeds);
    if (free_total > 0 && double(reached) >= 0.99 * double(free_total)) {
      return w;
    }
  }
  throw InfeasibleParams("world connectivity check failed after retries");
}

// Ray density sets how far out the carved free space is gap-free: adjacent
// rays are closer than one voxel out to roughly res/(hfov/(cols-1)). The
// planner can only commit to motion through contiguous known-free space, so
// cols/rows must keep that horizon ahead of one primitive's stopping reach.
struct DepthSensor {
  double hfov = 1.5;       // radians, full angle
  double vfov = 1.0;       // radians, full angle
  double max_range = 5.0;  // meters
  int cols = 28;
  int rows = 20;
  double rate = 2.0;  // Hz
};

struct SenseResult {
  std::vector<Vec3> hits;    // first-surface points
  std::vector<Vec3> misses;  // full-range endpoints of rays that hit nothing
};

inline Frustum sensor_frustum(const DepthSensor& s, const Pose& pose) {
  Frustum f;
  f.apex = pose.translation;
  f.orientation = pose.rotation;
  f.hfov = s.hfov;
  f.vfov = s.vfov;
  f.max_range = s.max_range;
  return f;
}

// One ray per image pixel on a pinhole tangent plane; returns the entry
// point into the first solid voxel within range, or a full-range miss.
inline SenseResult sense(const World& w, const Pose& pose,
                         const DepthSensor& s) {
  SUBGMM_CHECK(s.cols >= 2 && s.rows >= 2, BadConfig,
               "depth image needs at least 2x2 rays");
  SUBGMM_CHECK(!w.solid_at(pose.translation), PoseInOccupied,
               "sensor pose inside solid voxel");
  SenseResult out;
  out.hits.reserve(size_t(s.cols) * s.rows);
  const double tu = std::tan(s.hfov / 2.0);
  const double tv = std::tan(s.vfov / 2.0);
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const double u = tu * (2.0 * c / double(s.cols - 1) - 1.0);
      const double v = tv * (2.0 * r / double(s.rows - 1) - 1.0);
      const Vec3 dir = (pose.rotation * Vec3(1.0, u, v)).normalized();
      const Vec3 o = pose.translation;
      bool hit = false;
      Vec3 point = Vec3::Zero();
      detail::walk_ray(
          w.origin, w.resolution, o, o + s.max_range * dir,
          [&](const CellIndex& cell, bool) {
            if (!w.in_bounds(cell)) return false;
            if (!w.solid(cell)) return true;
            // Slab entry time of the solid voxel's box.
            const Vec3 blo = w.origin + w.resolution * cell.cast<double>();
            double t0 = 0.0;
            for (int i = 0; i < 3; ++i) {
              if (std::abs(dir[i]) < 1e-15) continue;
              const double ta = (blo[i] - o[i]) / dir[i];
              const double tb = (blo[i] + w.resolution - o[i]) / dir[i];
              t0 = std::max(t0, std::min(ta, tb));
            }
            hit = true;
            point = o + t0 * dir;
            return false;
          });
      if (hit) {
        out.hits.push_back(point);
      } else {
        out.misses.push_back(o + s.max_range * dir);
      }
    }
  }
  return out;
}

}  // namespace subgmm
