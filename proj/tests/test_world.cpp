#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "subgmm/sim.hpp"
#include "subgmm/world.hpp"

using namespace subgmm;

namespace {

World open_world(int nx, int ny, int nz, double res = 0.1) {
  World w;
  w.origin = Vec3::Zero();
  w.dims = CellIndex(nx, ny, nz);
  w.resolution = res;
  w.occupied.assign(size_t(nx) * ny * nz, 0);
  return w;
}

}  // namespace

TEST_CASE("straight topology carves one axis-aligned corridor") {
  WorldParams params;
  params.topology = WorldTopology::Straight;
  const World w = generate_world(params, 3);

  CellIndex lo = w.dims;
  CellIndex hi = CellIndex(-1, -1, -1);
  size_t free_count = 0;
  for (uint32_t i = 0; i < w.cell_count(); ++i) {
    if (w.occupied[i]) continue;
    ++free_count;
    const CellIndex c = w.unlinear(i);
    lo = lo.cwiseMin(c);
    hi = hi.cwiseMax(c);
  }
  REQUIRE(free_count > 0);

  const CellIndex span = hi - lo + CellIndex(1, 1, 1);
  CHECK(free_count == size_t(span[0]) * span[1] * span[2]);
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        if (w.solid({x, y, z})) {
          FAIL("solid voxel inside the corridor bounding box");
        }
      }
    }
  }

  // Corridor cross-section is 2 * main_radius wide and tall, length spans
  // the volume minus end margins; allow one voxel of rounding per face.
  CHECK(std::abs(span[0] * w.resolution - 29.6) <= 2.5 * w.resolution);
  CHECK(std::abs(span[1] * w.resolution - 2.8) <= 2.5 * w.resolution);
  CHECK(std::abs(span[2] * w.resolution - 2.8) <= 2.5 * w.resolution);
}

TEST_CASE("world generation is deterministic per seed") {
  WorldParams params;
  const World a = generate_world(params, 7);
  const World b = generate_world(params, 7);
  REQUIRE(a.dims == b.dims);
  CHECK(a.occupied == b.occupied);

  const World c = generate_world(params, 8);
  CHECK(a.occupied != c.occupied);
}

TEST_CASE("network worlds are connected and structured") {
  WorldParams params;
  const double cy = params.extent.y() / 2.0;
  const double cz = params.extent.z() / 2.0;

  for (uint64_t seed : {1, 2, 3}) {
    const World w = generate_world(params, seed);

    size_t free_total = 0;
    for (uint8_t v : w.occupied) free_total += v == 0;
    const double frac = double(free_total) / double(w.cell_count());
    CHECK(frac > 0.03);
    CHECK(frac < 0.35);

    const size_t reached =
        detail::flood_fill_free(w, {Vec3(3.0, cy, cz)});
    CHECK(double(reached) >= 0.99 * double(free_total));

    // Outer shell is sealed.
    for (int x = 0; x < w.dims[0]; ++x) {
      REQUIRE(w.solid({x, 0, 0}));
      REQUIRE(w.solid({x, w.dims[1] - 1, w.dims[2] - 1}));
    }

    // Open chamber: a 1.7 m ball on the spine is entirely free.
    const Vec3 chamber(2.0 + (params.extent.x() - 4.0) * 0.65, cy, cz);
    const CellIndex clo = w.cell_of(chamber - Vec3::Constant(1.7));
    const CellIndex chi = w.cell_of(chamber + Vec3::Constant(1.7));
    for (int z = clo[2]; z <= chi[2]; ++z) {
      for (int y = clo[1]; y <= chi[1]; ++y) {
        for (int x = clo[0]; x <= chi[0]; ++x) {
          const CellIndex c(x, y, z);
          if ((w.cell_center(c) - chamber).norm() <= 1.7) {
            REQUIRE(!w.solid(c));
          }
        }
      }
    }

    // Narrow passage: some free voxel is walled on both sides at 0.8 m,
    // across either horizontal axis. Wide tunnels (radius >= 1.0) have a
    // free cell on at least one side at that offset.
    const int off = int(std::round(0.8 / w.resolution));
    bool narrow_found = false;
    for (uint32_t i = 0; i < w.cell_count() && !narrow_found; ++i) {
      if (w.occupied[i]) continue;
      const CellIndex c = w.unlinear(i);
      if (std::abs(w.cell_center(c).z() - cz) > 0.3) continue;
      const CellIndex px = c + CellIndex(off, 0, 0);
      const CellIndex mx = c - CellIndex(off, 0, 0);
      const CellIndex py = c + CellIndex(0, off, 0);
      const CellIndex my = c - CellIndex(0, off, 0);
      const auto solid = [&](const CellIndex& q) {
        return w.in_bounds(q) && w.solid(q);
      };
      if ((solid(px) && solid(mx)) || (solid(py) && solid(my))) {
        narrow_found = true;
      }
    }
    CHECK(narrow_found);
  }
}

TEST_CASE("degenerate world parameters are rejected") {
  WorldParams params;
  params.resolution = 0.0;
  CHECK_THROWS_AS(generate_world(params, 1), InfeasibleParams);
  params.resolution = 0.1;
  params.extent = Vec3(10.0, -1.0, 4.0);
  CHECK_THROWS_AS(generate_world(params, 1), InfeasibleParams);
}

TEST_CASE("sense reports a flat wall at exact depth") {
  World w = open_world(60, 40, 40);
  for (int z = 0; z < 40; ++z) {
    for (int y = 0; y < 40; ++y) {
      for (int x = 30; x < 60; ++x) {
        w.occupied[w.linear({x, y, z})] = 1;
      }
    }
  }

  DepthSensor s;
  Pose pose;
  pose.translation = Vec3(1.0, 2.0, 2.0);
  const SenseResult scan = sense(w, pose, s);

  REQUIRE(scan.hits.size() == size_t(s.cols) * s.rows);
  CHECK(scan.misses.empty());
  for (const Vec3& p : scan.hits) {
    CHECK(std::abs(p.x() - 3.0) < 1e-9);
    CHECK(p.y() > 0.0);
    CHECK(p.y() < 4.0);
  }

  pose.translation = Vec3(3.05, 2.0, 2.0);
  CHECK_THROWS_AS(sense(w, pose, s), PoseInOccupied);
}

TEST_CASE("rays that hit nothing return full-range endpoints") {
  const World w = open_world(200, 40, 40);
  DepthSensor s;
  Pose pose;
  pose.translation = Vec3(1.0, 2.0, 2.0);
  const SenseResult scan = sense(w, pose, s);

  CHECK(scan.hits.empty());
  REQUIRE(scan.misses.size() == size_t(s.cols) * s.rows);
  for (const Vec3& p : scan.misses) {
    CHECK(std::abs((p - pose.translation).norm() - s.max_range) < 1e-9);
  }
}

TEST_CASE("sense first hits match a fine-sampling oracle") {
  World w = open_world(32, 32, 32);
  Rng rng(99);
  for (uint32_t i = 0; i < w.cell_count(); ++i) {
    if (rng.uniform() < 0.02) w.occupied[i] = 1;
  }
  const Vec3 origin(1.6, 1.6, 1.6);
  // Clear the sensor's immediate neighborhood.
  const CellIndex oc = w.cell_of(origin);
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        w.occupied[w.linear(oc + CellIndex(dx, dy, dz))] = 0;
      }
    }
  }

  DepthSensor s;
  s.cols = 8;
  s.rows = 6;
  s.max_range = 2.5;

  const auto box_dist = [&](const Vec3& p, const CellIndex& c) {
    const Vec3 blo = w.origin + w.resolution * c.cast<double>();
    double d2 = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double v = std::clamp(p[i], blo[i], blo[i] + w.resolution);
      d2 += (v - p[i]) * (v - p[i]);
    }
    return std::sqrt(d2);
  };

  size_t checked_hits = 0;
  for (int trial = 0; trial < 6; ++trial) {
    const double yaw = rng.uniform(0.0, 2.0 * M_PI);
    const double pitch = rng.uniform(-0.5, 0.5);
    Pose pose;
    pose.translation = origin;
    pose.rotation =
        (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
         Eigen::AngleAxisd(pitch, Vec3::UnitY()))
            .toRotationMatrix();
    const SenseResult scan = sense(w, pose, s);
    REQUIRE(scan.hits.size() + scan.misses.size() == size_t(s.cols) * s.rows);

    const double step = w.resolution / 20.0;
    for (const Vec3& p : scan.hits) {
      const Vec3 dir = (p - origin).normalized();
      const double t_hit = (p - origin).norm();
      REQUIRE(t_hit <= s.max_range + 1e-9);

      // Nothing solid strictly before the reported hit.
      for (double t = step; t < t_hit - 1e-6; t += step) {
        const Vec3 q = origin + t * dir;
        if (!w.in_bounds(w.cell_of(q))) break;
        if (w.solid(w.cell_of(q))) {
          FAIL("sampled solid voxel before the reported hit");
        }
      }

      // The hit point lies on the surface of some solid voxel.
      const CellIndex hc = w.cell_of(p);
      double nearest = 1e9;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const CellIndex c = hc + CellIndex(dx, dy, dz);
            if (!w.in_bounds(c) || !w.solid(c)) continue;
            nearest = std::min(nearest, box_dist(p, c));
          }
        }
      }
      CHECK(nearest < 1e-9);
      ++checked_hits;
    }

    for (const Vec3& p : scan.misses) {
      const Vec3 dir = (p - origin).normalized();
      const double t_end = (p - origin).norm();
      CHECK(std::abs(t_end - s.max_range) < 1e-9);
      for (double t = step; t < t_end; t += step) {
        const Vec3 q = origin + t * dir;
        if (!w.in_bounds(w.cell_of(q))) break;
        if (w.solid(w.cell_of(q))) {
          FAIL("miss ray passes through a solid voxel");
        }
      }
    }
  }
  CHECK(checked_hits > 50);
}

TEST_CASE("coverage counts observed observable voxels") {
  WorldParams params;
  params.topology = WorldTopology::Straight;
  const World w = generate_world(params, 5);
  const auto observable = observable_mask(w);

  std::vector<uint8_t> none(w.cell_count(), 0);
  CHECK(coverage(none, w) == 0.0);
  CHECK(coverage(observable, w) == 1.0);

  // Half-space split along x lands near one half of the corridor.
  std::vector<uint8_t> half(w.cell_count(), 0);
  for (uint32_t i = 0; i < w.cell_count(); ++i) {
    if (observable[i] && w.unlinear(i)[0] < w.dims[0] / 2) half[i] = 1;
  }
  CHECK(coverage(half, w) == Catch::Approx(0.5).margin(0.02));

  // Observable = free plus the touching shell; interior rock is excluded.
  size_t observable_count = 0, free_count = 0;
  for (uint32_t i = 0; i < w.cell_count(); ++i) {
    observable_count += observable[i];
    free_count += w.occupied[i] == 0;
  }
  CHECK(observable_count > free_count);
  CHECK(observable_count < 2 * free_count);
}
