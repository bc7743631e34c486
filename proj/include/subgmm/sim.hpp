#pragma once

#include <deque>
#include <unordered_map>
#include <variant>
#include <vector>

#include "subgmm/codec.hpp"
#include "subgmm/gmm.hpp"
#include "subgmm/netsim.hpp"
#include "subgmm/occupancy.hpp"
#include "subgmm/planner.hpp"
#include "subgmm/world.hpp"

namespace subgmm {

enum class MapPipeline { Gmm, Og };

struct SpawnPose {
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;
};

// Seed splitting: the world generator derives per-attempt seeds from the
// experiment seed internally; mixture fits use
// derive_seed(derive_seed(seed, kSeedFit, robot), keyframe_index) and
// planning uses derive_seed(derive_seed(seed, kSeedPlan, robot), cycle).
inline constexpr uint64_t kSeedFit = 0x666974676d6dULL;   // "fitgmm"
inline constexpr uint64_t kSeedPlan = 0x706c616e6d63ULL;  // "planmc"

struct ExperimentConfig {
  WorldParams world;
  uint64_t seed = 1;
  int robot_count = 2;
  std::vector<SpawnPose> spawns;  // filled with defaults when empty
  MapPipeline pipeline = MapPipeline::Gmm;
  double rate_bps = 0.0;  // map channel; 0 = unconstrained
  double channel_latency = 0.02;
  double map_burst = 262144.0;
  double map_buffer = 1048576.0;
  double duration = 300.0;
  double dt = 0.1;
  double metrics_period = 1.0;
  DepthSensor sensor;
  double sensor_period = 0.5;
  int gmm_components = 50;
  double keyframe_lambda = 0.5;
  int min_fit_points = 150;
  EmConfig em;
  // Gain rays stop at the range where adjacent depth rays are still
  // closer than one voxel; past that the sensor cannot resolve what the
  // evaluator would promise, and plans would chase unrealizable gain.
  MctsConfig mcts = [] {
    MctsConfig m;
    m.budget = 120;
    m.sensor.ray_spacing_deg = 7.5;
    m.sensor.max_range = 2.5;
    return m;
  }();
  double plan_period = 1.0;
  double gain_threshold = 8.0;  // below this the frontier fallback drives
  // Vetoes run 0.3 m wider than the audited cylinders: transient control
  // slip then costs margin, not an audited overlap.
  PriorityConfig priority{.check_margin = 0.3};
  double odom_period = 0.2;
  double physical_radius = 0.3;
  // Radius verified free at deployment. Must cover the planning sphere's
  // swept tube out to where the sensor cone is wider than the sphere, or
  // no translating primitive can ever clear collision checks at start.
  double spawn_bubble = 1.3;
};

struct MetricsRow {
  double time = 0.0;
  int robot_id = 0;  // 255 = team aggregate
  double coverage = 0.0;
  uint64_t bytes_sent = 0;  // accounted payload bytes enqueued
  uint64_t bytes_delivered = 0;
  uint64_t packets_dropped = 0;
  double dist_m = 0.0;
  double max_speed_mps = 0.0;
  uint64_t collisions = 0;
};

inline constexpr int kTeamRowId = 255;

struct MetricsTimeline {
  std::vector<MetricsRow> rows;
  // Run-level audit totals, one entry per robot where applicable.
  std::vector<uint64_t> inter_robot_replans;
  std::vector<double> max_speed_xy;
  std::vector<double> max_speed_z;
  std::vector<double> max_yaw_rate;
  uint64_t cylinder_overlaps = 0;
  uint64_t env_collisions = 0;
  uint64_t unknown_cap_violations = 0;
  uint64_t reconstruct_skips = 0;
  uint64_t degenerate_fit_skips = 0;
  uint64_t stale_odometry_events = 0;
  bool byte_conservation_ok = true;
  double final_team_coverage = 0.0;
};

// First team-row time at which coverage reaches `frac`; +inf if never.
inline double time_to_coverage(const MetricsTimeline& tl, double frac) {
  for (const MetricsRow& r : tl.rows) {
    if (r.robot_id == kTeamRowId && r.coverage >= frac) return r.time;
  }
  return std::numeric_limits<double>::infinity();
}

// Ground-truth observable set: free voxels plus the face-adjacent solid
// shell. A first-surface ray enters a solid voxel through a face shared
// with free space, so solid voxels touching free space only across edges
// or corners can never be reported by any sensor pose.
inline std::vector<uint8_t> observable_mask(const World& w) {
  std::vector<uint8_t> mask(w.cell_count(), 0);
  constexpr int kFaces[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
  for (uint32_t i = 0; i < w.cell_count(); ++i) {
    if (w.occupied[i]) continue;
    mask[i] = 1;
    const CellIndex c = w.unlinear(i);
    for (const auto& d : kFaces) {
      const CellIndex n = c + CellIndex(d[0], d[1], d[2]);
      if (w.in_bounds(n) && w.solid(n)) mask[w.linear(n)] = 1;
    }
  }
  return mask;
}

inline double coverage(const std::vector<uint8_t>& observed, const World& w) {
  const auto observable = observable_mask(w);
  size_t num = 0, denom = 0;
  for (size_t i = 0; i < observable.size(); ++i) {
    if (!observable[i]) continue;
    ++denom;
    if (i < observed.size() && observed[i]) ++num;
  }
  return denom == 0 ? 0.0 : double(num) / double(denom);
}

// Test hook: map-channel traffic as sent and as received, per robot.
struct RunArtifacts {
  std::vector<std::vector<WireMessage>> sent_map;
  std::vector<std::vector<WireMessage>> recv_map;
};

namespace detail {

// Raytraces hits (occupied endpoints) and misses (free along the whole
// ray, endpoint untouched) into the grid, returning the combined change
// set in ascending index order.
inline ChangeSet integrate_scan(LocalOccupancyGrid& grid, const Vec3& sensor,
                                const SenseResult& scan) {
  SUBGMM_CHECK(grid.contains(sensor), OriginOutOfBounds,
               "sensor pose outside grid");
  std::unordered_map<uint32_t, float> before;
  auto trace = [&](const Vec3& q, bool hit) {
    // Hit points lie on the struck cell's entering face. cell_of on a
    // face coordinate floors toward the cell already traversed when the
    // ray travels along a negative axis, which would credit the hit to
    // the free cell in front of the surface. Nudging past the face keeps
    // the occupied mark in the cell the ray actually struck.
    const Vec3 p =
        hit ? Vec3(q + (q - sensor).normalized() * (grid.resolution() * 1e-6))
            : q;
    const CellIndex end_cell = grid.cell_of(p);
    walk_ray(grid.origin(), grid.resolution(), sensor, p,
             [&](const CellIndex& c, bool is_end) {
               if (!grid.in_bounds(c)) return false;
               const uint32_t idx = grid.linear(c);
               before.emplace(idx, grid.at_linear(idx));
               if (!is_end) grid.add_logodds(c, grid.params().l_free);
               return true;
             });
    if (hit && grid.in_bounds(end_cell)) {
      const uint32_t idx = grid.linear(end_cell);
      before.emplace(idx, grid.at_linear(idx));
      grid.add_logodds(end_cell, grid.params().l_occ);
    }
  };
  for (const Vec3& p : scan.hits) trace(p, true);
  for (const Vec3& p : scan.misses) trace(p, false);

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

struct PeerRecord {
  bool have = false;
  Vec3 position = Vec3::Zero();
  double time = 0.0;
  uint32_t seq = 0;
  std::vector<MotionPrimitive> trajectory;
};

struct RobotRig {
  uint8_t id = 0;
  int priority = 0;  // equals id: robot 0 has the highest priority
  RobotState state;
  MotionPrimitive current;
  double prim_t = 0.0;
  std::vector<MotionPrimitive> plan;
  size_t plan_next = 0;
  LocalOccupancyGrid grid;
  KeyframeLedger ledger;
  PlannerScratch scratch;
  std::vector<PeerRecord> peers;
  std::vector<uint8_t> own_mask;
  std::vector<int32_t> field;  // frontier BFS scratch
  uint64_t own_observed = 0;
  double dist = 0.0, vmax = 0.0, vzmax = 0.0, wmax = 0.0;
  uint64_t bytes_sent = 0, bytes_delivered = 0, pkts_dropped = 0;
  uint64_t collisions = 0;
  uint32_t kf_count = 0, plan_count = 0;
  uint32_t seq_map = 0, seq_odom = 0, seq_traj = 0;
  double evade_until = -1.0;  // sim time when the committed evade expires
};

inline bool prim_clear_cached(const LocalOccupancyGrid& g,
                              const MotionPrimitive& p, double radius,
                              CollisionCache& cache) {
  auto sweep = [&](const MotionPrimitive& q) {
    const int n = int(std::ceil(q.duration / kCollisionSampleStep));
    for (int i = 0; i <= n; ++i) {
      const double t = std::min(q.duration, i * kCollisionSampleStep);
      if (!cache.clear_at(g, state_at(q, t).position, radius)) return false;
    }
    return true;
  };
  return sweep(p) && (p.is_stopping || sweep(stopping_primitive(p)));
}

inline constexpr int kSixNeighbors[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                            {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};

// Greedy descent of a BFS hop field toward the nearest frontier, used when
// the information objective has flattened out locally. Replaces r.plan
// with a single primitive when a strictly better candidate exists.
inline void frontier_fallback(RobotRig& r, const ExperimentConfig& cfg,
                              const RootFilter& filter) {
  const LocalOccupancyGrid& g = r.grid;
  r.field.assign(g.cell_count(), -1);
  std::deque<uint32_t> queue;
  for (uint32_t i = 0; i < g.cell_count(); ++i) {
    if (classify(g.at_linear(i)) != CellState::Free) continue;
    const CellIndex c = g.unlinear(i);
    for (const auto& d : kSixNeighbors) {
      const CellIndex nb = c + CellIndex(d[0], d[1], d[2]);
      if (g.in_bounds(nb) && classify(g.at(nb)) == CellState::Unknown) {
        r.field[i] = 0;
        queue.push_back(i);
        break;
      }
    }
  }
  while (!queue.empty()) {
    const uint32_t cur = queue.front();
    queue.pop_front();
    const CellIndex c = g.unlinear(cur);
    for (const auto& d : kSixNeighbors) {
      const CellIndex nb = c + CellIndex(d[0], d[1], d[2]);
      if (!g.in_bounds(nb)) continue;
      const uint32_t ni = g.linear(nb);
      if (r.field[ni] >= 0 || classify(g.at_linear(ni)) != CellState::Free) {
        continue;
      }
      r.field[ni] = r.field[cur] + 1;
      queue.push_back(ni);
    }
  }

  bool found = false;
  MotionPrimitive best;
  double best_key[3] = {0, 0, 0};
  const auto prims = generate_primitives(r.state, cfg.mcts.limits, g,
                                         cfg.mcts.unknown_lookahead,
                                         cfg.mcts.primitive_duration);
  for (const auto& p : prims) {
    if (!prim_clear_cached(g, p, cfg.mcts.robot_radius, r.scratch.cache)) {
      continue;
    }
    if (filter && !filter(p, stopping_primitive(p))) continue;
    const RobotState end = state_at(p, p.duration);
    const CellIndex c = g.cell_of(end.position);
    if (!g.in_bounds(c)) continue;
    const int32_t f = r.field[g.linear(c)];
    if (f < 0) continue;
    // Alignment with the downhill direction breaks field ties so pure
    // rotations turn toward the exit instead of oscillating.
    int32_t down = f;
    Vec3 dir = Vec3::Zero();
    for (const auto& d : kSixNeighbors) {
      const CellIndex nb = c + CellIndex(d[0], d[1], d[2]);
      if (!g.in_bounds(nb)) continue;
      const int32_t fn = r.field[g.linear(nb)];
      if (fn >= 0 && fn < down) {
        down = fn;
        dir = Vec3(d[0], d[1], d[2]);
      }
    }
    double err = 0.0;
    if (dir.head<2>().norm() > 0.0) {
      const Vec3 h(std::cos(end.yaw), std::sin(end.yaw), 0.0);
      err = 1.0 - h.head<2>().dot(dir.head<2>().normalized());
    }
    const double key[3] = {double(f), err, -p.cmd_xy};
    if (!found || std::lexicographical_compare(key, key + 3, best_key,
                                               best_key + 3)) {
      found = true;
      best = p;
      std::copy(key, key + 3, best_key);
    }
  }
  if (found) r.plan = {best};
}

// Normalized cylinder separation between two centers: > 1 means the pair
// clears cylinders of the given radius and height.
inline double cylinder_separation(const Vec3& a, const Vec3& b, double radius,
                                  double height) {
  const double hor = std::hypot(a.x() - b.x(), a.y() - b.y());
  return std::max(hor / (2.0 * radius), std::abs(a.z() - b.z()) / height);
}

// A peer's last reported position is a physical body: an obstacle for every
// robot regardless of priority. Announced tubes stay one-sided, bodies do
// not; nothing may plan through a spot a teammate is known to occupy.
inline bool body_clear(const MotionPrimitive& candidate,
                       const MotionPrimitive& stopping,
                       const std::vector<PeerState>& peers,
                       const PriorityConfig& pc) {
  const auto own = cylinder_centers({candidate, stopping}, pc.max_cylinders);
  for (const PeerState& peer : peers) {
    for (const Vec3& a : own) {
      if (cylinders_collide(a, peer.position,
                            pc.cylinder_radius + pc.check_margin,
                            pc.cylinder_height + pc.check_margin)) {
        return false;
      }
    }
  }
  return true;
}

// When every primitive conflicts with a higher-priority tube or a peer's
// body, parking in place can leave the robot dead in that tube's path.
// Best effort escape: take the environment-safe primitive whose swept
// samples maximize the worst-case separation from the peers' sampled
// cylinders. Tube priority semantics stay intact; bodies repel everyone.
inline bool evade_conflict(RobotRig& r, const ExperimentConfig& cfg,
                           const std::vector<PeerState>& peers,
                           bool trace_detail = false) {
  if (peers.empty()) return false;
  std::vector<Vec3> peer_cyls;
  for (const PeerState& peer : peers) {
    if (peer.priority < r.priority) {
      auto cyls =
          cylinder_centers(peer.trajectory, cfg.priority.max_cylinders);
      peer_cyls.insert(peer_cyls.end(), cyls.begin(), cyls.end());
    }
    peer_cyls.push_back(peer.position);
  }
  if (peer_cyls.empty()) return false;
  // Fresh verdict epoch: evades also run between planning cycles, after
  // scans have already mutated the grid under the cached verdicts.
  r.scratch.cache.begin(r.grid);
  const auto prims = generate_primitives(r.state, cfg.mcts.limits, r.grid,
                                         cfg.mcts.unknown_lookahead,
                                         cfg.mcts.primitive_duration);
  // Every candidate shares the conflicted start pose, so a single min over
  // the swept tube ties across primitives and cannot rank them. Class the
  // candidates instead: paths that never enter the audited footprint beat
  // everything, with those also reaching a margin-clear rest point first,
  // and cutting through a peer is the last resort. A robot blocked inside a
  // pocket must wait at the back of it, not dash through the blocker toward
  // open space.
  const double base_r = cfg.priority.cylinder_radius;
  const double base_h = cfg.priority.cylinder_height;
  const double wide_r = base_r + cfg.priority.check_margin;
  const double wide_h = base_h + cfg.priority.check_margin;
  if (trace_detail) {
    for (const Vec3& b : peer_cyls) {
      std::fprintf(stderr, "    PEERCYL (%.2f %.2f %.2f)\n", b.x(), b.y(),
                   b.z());
    }
  }
  bool found = false;
  MotionPrimitive best;
  int best_class = -1;
  double best_primary = -1.0;
  double best_secondary = -1.0;
  for (const auto& p : prims) {
    const bool env_ok = prim_clear_cached(r.grid, p, cfg.mcts.robot_radius,
                                          r.scratch.cache);
    if (!env_ok) continue;
    const MotionPrimitive stop = stopping_primitive(p);
    const auto own = cylinder_centers({p, stop}, cfg.priority.max_cylinders);
    double path_base = std::numeric_limits<double>::infinity();
    double path_wide = std::numeric_limits<double>::infinity();
    for (const Vec3& a : own) {
      for (const Vec3& b : peer_cyls) {
        path_base =
            std::min(path_base, cylinder_separation(a, b, base_r, base_h));
        path_wide =
            std::min(path_wide, cylinder_separation(a, b, wide_r, wide_h));
      }
    }
    const Vec3 rest = state_at(stop, stop.duration).position;
    double end_wide = std::numeric_limits<double>::infinity();
    for (const Vec3& b : peer_cyls) {
      end_wide =
          std::min(end_wide, cylinder_separation(rest, b, wide_r, wide_h));
    }
    const int cls = path_base > 1.0 ? (end_wide > 1.0 ? 2 : 1) : 0;
    const double primary = cls == 0 ? path_base : end_wide;
    const double secondary = cls == 0 ? end_wide : path_wide;
    if (trace_detail) {
      std::fprintf(stderr,
                   "    PRIM xy%.2f z%.2f w%.2f end=(%.2f %.2f %.2f) cls=%d "
                   "end_wide=%.3f path_base=%.3f\n",
                   p.cmd_xy, p.cmd_z, p.cmd_yaw_rate, rest.x(), rest.y(),
                   rest.z(), cls, end_wide, path_base);
    }
    const bool take =
        cls > best_class ||
        (cls == best_class &&
         (primary > best_primary + 1e-9 ||
          (primary > best_primary - 1e-9 && secondary > best_secondary)));
    if (take) {
      best_class = cls;
      best_primary = primary;
      best_secondary = secondary;
      best = p;
      found = true;
    }
  }
  if (std::getenv("SUBGMM_TRACE2")) {
    std::fprintf(stderr,
                 "  EVADE r%d prims=%zu found=%d cls=%d primary=%.3f "
                 "best={xy%.2f z%.2f w%.2f} pos=(%.2f %.2f %.2f) "
                 "peer0=(%.2f %.2f %.2f) npeer=%zu\n",
                 r.id, prims.size(), int(found), best_class, best_primary,
                 best.cmd_xy, best.cmd_z, best.cmd_yaw_rate,
                 r.state.position.x(), r.state.position.y(),
                 r.state.position.z(), peer_cyls[0].x(), peer_cyls[0].y(),
                 peer_cyls[0].z(), peer_cyls.size());
  }
  if (found) r.plan = {best};
  return found;
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& cfg) {
  SUBGMM_CHECK(cfg.robot_count >= 1 && cfg.robot_count <= 2, BadConfig,
               "robot count must be 1 or 2");
  SUBGMM_CHECK(cfg.rate_bps >= 0.0, BadConfig, "negative channel rate");
  SUBGMM_CHECK(cfg.duration >= 0.0, BadConfig, "negative duration");
  SUBGMM_CHECK(cfg.dt > 0.0, BadConfig, "timestep must be positive");
  SUBGMM_CHECK(cfg.metrics_period >= cfg.dt && cfg.sensor_period >= cfg.dt &&
                   cfg.plan_period >= cfg.dt && cfg.odom_period >= cfg.dt,
               BadConfig, "periods must be at least one timestep");
  SUBGMM_CHECK(cfg.sensor.cols >= 2 && cfg.sensor.rows >= 2, BadConfig,
               "depth image needs at least 2x2 rays");
  SUBGMM_CHECK(cfg.gmm_components >= 1, BadConfig, "need at least 1 component");
  SUBGMM_CHECK(cfg.min_fit_points >= cfg.gmm_components, BadConfig,
               "min fit points below component count");
  SUBGMM_CHECK(cfg.spawns.empty() || int(cfg.spawns.size()) == cfg.robot_count,
               BadConfig, "spawn count must match robot count");
  SUBGMM_CHECK(cfg.mcts.horizon >= 1 && cfg.mcts.budget >= 1, BadConfig,
               "planner horizon and budget must be positive");
}

inline std::vector<SpawnPose> default_spawns(const ExperimentConfig& cfg) {
  if (!cfg.spawns.empty()) return cfg.spawns;
  const double cy = cfg.world.extent.y() / 2.0;
  const double cz = cfg.world.extent.z() / 2.0;
  std::vector<SpawnPose> out;
  out.push_back({Vec3(3.0, cy - 1.5, cz), 0.0});
  if (cfg.robot_count > 1) out.push_back({Vec3(3.0, cy + 1.5, cz), 0.0});
  return out;
}

// Deterministic lockstep two-robot exploration run. Per step: sense and
// integrate, publish map/odometry traffic, deliver queued messages, plan,
// advance kinematics, audit safety, sample metrics. Map traffic flows
// through rate-limited channels; odometry and trajectories use a separate
// unconstrained side channel (the studied rate constrains map data only).
inline MetricsTimeline run_experiment(const ExperimentConfig& config,
                                      RunArtifacts* artifacts = nullptr) {
  ExperimentConfig cfg = config;
  validate_config(cfg);
  cfg.spawns = default_spawns(cfg);

  WorldParams wp = cfg.world;
  for (const SpawnPose& s : cfg.spawns) wp.spawns.push_back(s.position);
  const World world = generate_world(wp, cfg.seed);

  const int n = cfg.robot_count;
  const auto observable = observable_mask(world);
  uint64_t observable_count = 0;
  for (uint8_t v : observable) observable_count += v;
  std::vector<uint8_t> team_mask(world.cell_count(), 0);
  uint64_t team_observed = 0;

  MetricsTimeline tl;
  tl.inter_robot_replans.assign(n, 0);
  tl.max_speed_xy.assign(n, 0.0);
  tl.max_speed_z.assign(n, 0.0);
  tl.max_yaw_rate.assign(n, 0.0);
  if (artifacts) {
    artifacts->sent_map.assign(n, {});
    artifacts->recv_map.assign(n, {});
  }

  std::vector<detail::RobotRig> rigs(n);
  for (int i = 0; i < n; ++i) {
    detail::RobotRig& r = rigs[i];
    r.id = uint8_t(i);
    r.priority = i;
    r.state.position = cfg.spawns[i].position;
    r.state.yaw = cfg.spawns[i].yaw;
    r.grid = LocalOccupancyGrid(world.origin, world.dims, world.resolution);
    r.ledger.lambda = cfg.keyframe_lambda;
    r.peers.resize(n);
    r.own_mask.assign(world.cell_count(), 0);
    r.current = stopping_from_state(r.state);

    // Deployment prior: the spawn bubble is known free.
    const CellIndex lo = r.grid.cell_of(r.state.position -
                                        Vec3::Constant(cfg.spawn_bubble));
    const CellIndex hi = r.grid.cell_of(r.state.position +
                                        Vec3::Constant(cfg.spawn_bubble));
    for (int z = std::max(lo[2], 0); z <= std::min(hi[2], world.dims[2] - 1);
         ++z) {
      for (int y = std::max(lo[1], 0); y <= std::min(hi[1], world.dims[1] - 1);
           ++y) {
        for (int x = std::max(lo[0], 0);
             x <= std::min(hi[0], world.dims[0] - 1); ++x) {
          const CellIndex c(x, y, z);
          if ((r.grid.cell_center(c) - r.state.position).norm() >
              cfg.spawn_bubble) {
            continue;
          }
          if (world.solid(c)) continue;
          const uint32_t idx = r.grid.linear(c);
          r.grid.set_linear(idx, r.grid.params().l_free);
          if (observable[idx] && !r.own_mask[idx]) {
            r.own_mask[idx] = 1;
            ++r.own_observed;
            if (!team_mask[idx]) {
              team_mask[idx] = 1;
              ++team_observed;
            }
          }
        }
      }
    }
  }

  // channels[from][to]; only off-diagonal entries are used.
  ChannelConfig map_cc;
  map_cc.rate = cfg.rate_bps;
  map_cc.burst = cfg.map_burst;
  map_cc.buffer_capacity = cfg.map_buffer;
  map_cc.latency = cfg.channel_latency;
  ChannelConfig ctrl_cc;
  ctrl_cc.rate = 0.0;
  ctrl_cc.latency = cfg.channel_latency;
  std::vector<RateLimitedChannel> map_ch, ctrl_ch;
  for (int i = 0; i < n * n; ++i) {
    map_ch.emplace_back(map_cc);
    ctrl_ch.emplace_back(ctrl_cc);
  }

  const auto mark_observed = [&](detail::RobotRig& r, uint32_t idx) {
    if (!observable[idx] || r.own_mask[idx]) return;
    r.own_mask[idx] = 1;
    ++r.own_observed;
    if (!team_mask[idx]) {
      team_mask[idx] = 1;
      ++team_observed;
    }
  };

  const auto emit_rows = [&](double time) {
    MetricsRow team;
    team.time = time;
    team.robot_id = kTeamRowId;
    for (int i = 0; i < n; ++i) {
      const detail::RobotRig& r = rigs[i];
      MetricsRow row;
      row.time = time;
      row.robot_id = i;
      row.coverage = observable_count
                         ? double(r.own_observed) / double(observable_count)
                         : 0.0;
      row.bytes_sent = r.bytes_sent;
      row.bytes_delivered = r.bytes_delivered;
      row.packets_dropped = r.pkts_dropped;
      row.dist_m = r.dist;
      row.max_speed_mps = r.vmax;
      row.collisions = r.collisions;
      tl.rows.push_back(row);
      team.bytes_sent += row.bytes_sent;
      team.bytes_delivered += row.bytes_delivered;
      team.packets_dropped += row.packets_dropped;
      team.dist_m += row.dist_m;
      team.max_speed_mps = std::max(team.max_speed_mps, row.max_speed_mps);
      team.collisions += row.collisions;
    }
    team.coverage = observable_count
                        ? double(team_observed) / double(observable_count)
                        : 0.0;
    tl.rows.push_back(team);
  };

  const auto send_map = [&](int from, const WireMessage& msg, double now) {
    detail::RobotRig& r = rigs[from];
    for (int to = 0; to < n; ++to) {
      if (to == from) continue;
      r.bytes_sent += msg.accounted_bytes();
      if (map_ch[from * n + to].send(msg, now) == SendResult::Dropped) {
        ++r.pkts_dropped;
      } else if (artifacts) {
        artifacts->sent_map[from].push_back(msg);
      }
    }
  };

  const int steps = int(std::llround(cfg.duration / cfg.dt));
  const int sensor_every = std::max(1, int(std::llround(cfg.sensor_period / cfg.dt)));
  const int plan_every = std::max(1, int(std::llround(cfg.plan_period / cfg.dt)));
  const int odom_every = std::max(1, int(std::llround(cfg.odom_period / cfg.dt)));
  const int metrics_every =
      std::max(1, int(std::llround(cfg.metrics_period / cfg.dt)));

  emit_rows(0.0);

  for (int k = 0; k < steps; ++k) {
    const double t = k * cfg.dt;

    // Sense and integrate, then publish map traffic.
    if (k % sensor_every == 0) {
      for (detail::RobotRig& r : rigs) {
        const Pose pose = pose_of(r.state);
        const SenseResult scan = sense(world, pose, cfg.sensor);
        const ChangeSet cs = detail::integrate_scan(r.grid, pose.translation, scan);
        for (const auto& [idx, value] : cs.entries) {
          if (value != 0.0f) mark_observed(r, idx);
        }
        if (cfg.pipeline == MapPipeline::Og) {
          if (!cs.entries.empty() && n > 1) {
            send_map(r.id, encode_og(cs, r.id, r.seq_map++), t);
          }
        } else {
          const Frustum f = sensor_frustum(cfg.sensor, pose);
          if (n > 1 && int(scan.hits.size()) >= cfg.min_fit_points &&
              is_keyframe(f, r.ledger)) {
            try {
              GaussianMixture mix = fit_gmm(
                  scan.hits, cfg.gmm_components, cfg.em,
                  derive_seed(derive_seed(cfg.seed, kSeedFit, r.id),
                              r.kf_count));
              mix.support_size = uint32_t(scan.hits.size());
              r.ledger.frustums.push_back(f);
              ++r.kf_count;
              if (n > 1) {
                KeyframePacket pkt;
                pkt.mixture = std::move(mix);
                pkt.sensor_pose = pose;
                pkt.robot_id = r.id;
                pkt.sequence = r.seq_map++;
                send_map(r.id, encode_gmm(pkt), t);
              }
            } catch (const Error&) {
              ++tl.degenerate_fit_skips;
            }
          }
        }
      }
    }

    // Odometry heartbeat on the side channel.
    if (k % odom_every == 0 && n > 1) {
      for (detail::RobotRig& r : rigs) {
        OdometryMsg odo;
        odo.pose = pose_of(r.state);
        odo.seq = r.seq_odom;
        const WireMessage msg = encode_odometry(odo, r.id, r.seq_odom);
        ++r.seq_odom;
        for (int to = 0; to < n; ++to) {
          if (to != r.id) ctrl_ch[r.id * n + to].send(msg, t);
        }
      }
    }

    // Deliver queued traffic.
    for (int from = 0; from < n; ++from) {
      for (int to = 0; to < n; ++to) {
        if (from == to) continue;
        for (const Delivery& d : map_ch[from * n + to].poll(t)) {
          rigs[from].bytes_delivered += d.msg.accounted_bytes();
          if (artifacts) artifacts->recv_map[to].push_back(d.msg);
          const DecodedMessage decoded = decode(d.msg);
          if (const auto* pkt = std::get_if<KeyframePacket>(&decoded)) {
            try {
              reconstruct_from_packet(rigs[to].grid, *pkt, Pose{});
            } catch (const OriginOutOfBounds&) {
              ++tl.reconstruct_skips;
            }
          } else if (const auto* cs = std::get_if<ChangeSet>(&decoded)) {
            apply_change_set(rigs[to].grid, *cs);
          }
        }
        for (const Delivery& d : ctrl_ch[from * n + to].poll(t)) {
          const DecodedMessage decoded = decode(d.msg);
          detail::PeerRecord& rec = rigs[to].peers[from];
          if (const auto* odo = std::get_if<OdometryMsg>(&decoded)) {
            if (!rec.have || odo->seq >= rec.seq) {
              rec.have = true;
              rec.position = odo->pose.translation;
              rec.time = d.time;
              rec.seq = odo->seq;
            }
          } else if (const auto* traj = std::get_if<TrajectoryMsg>(&decoded)) {
            rec.trajectory.clear();
            for (const auto& e : traj->primitives) {
              MotionPrimitive p;
              p.start.position = Vec3(e[0], e[1], e[2]);
              p.start.yaw = e[3];
              p.cmd_xy = e[4];
              p.cmd_z = e[5];
              p.cmd_yaw_rate = e[6];
              p.duration = cfg.mcts.primitive_duration;
              rec.trajectory.push_back(p);
            }
          }
        }
      }
    }

    const auto build_peers = [&](const detail::RobotRig& r) {
      std::vector<PeerState> peers;
      for (int j = 0; j < n; ++j) {
        if (j == r.id || !r.peers[j].have) continue;
        PeerState ps;
        ps.robot_id = uint8_t(j);
        ps.priority = j;
        ps.position = r.peers[j].position;
        ps.odom_time = r.peers[j].time;
        ps.trajectory = r.peers[j].trajectory;
        peers.push_back(std::move(ps));
      }
      return peers;
    };
    const auto broadcast_traj = [&](detail::RobotRig& r) {
      if (n <= 1) return;
      TrajectoryMsg tm;
      for (const auto& p : r.plan) {
        tm.primitives.push_back(
            {float(p.start.position.x()), float(p.start.position.y()),
             float(p.start.position.z()), float(p.start.yaw), float(p.cmd_xy),
             float(p.cmd_z), float(p.cmd_yaw_rate)});
      }
      const WireMessage msg = encode_trajectory(tm, r.id, r.seq_traj++);
      for (int to = 0; to < n; ++to) {
        if (to != r.id) ctrl_ch[r.id * n + to].send(msg, t);
      }
    };

    // Plan.
    if (k % plan_every == 0) {
      for (detail::RobotRig& r : rigs) {
        const std::vector<PeerState> peers = build_peers(r);
        bool vetoed = false;
        RootFilter filter;
        if (!peers.empty()) {
          filter = [&](const MotionPrimitive& cand,
                       const MotionPrimitive& stop) {
            bool ok = true;
            try {
              ok = inter_robot_check(cand, stop, r.priority, peers,
                                     cfg.priority, t);
            } catch (const StaleOdometry&) {
              ++tl.stale_odometry_events;
              ok = false;
            }
            if (ok) ok = detail::body_clear(cand, stop, peers, cfg.priority);
            if (!ok) vetoed = true;
            return ok;
          };
        }
        const uint64_t plan_seed =
            derive_seed(derive_seed(cfg.seed, kSeedPlan, r.id), r.plan_count);
        ++r.plan_count;
        r.plan = mcts_plan(r.grid, r.state, cfg.mcts, plan_seed, filter,
                           &r.scratch);

        std::vector<Pose> poses;
        for (const auto& p : r.plan) {
          poses.push_back(pose_of(state_at(p, p.duration)));
        }
        const double gain =
            r.scratch.evaluator.gain(r.grid, poses, cfg.mcts.sensor);
        if (gain < cfg.gain_threshold) {
          detail::frontier_fallback(r, cfg, filter);
        }
        if (vetoed) ++tl.inter_robot_replans[r.id];
        bool evaded = false;
        if (vetoed && r.plan.size() == 1 && r.plan[0].is_stopping) {
          const bool td = std::getenv("SUBGMM_TRACE3") &&
                          t > atof(std::getenv("SUBGMM_TRACE3")) && r.id == 1;
          evaded = detail::evade_conflict(r, cfg, peers, td);
        }

        // Belt-and-braces audit of the toward-unknown speed cap.
        if (!r.plan.empty() && !r.plan[0].is_stopping &&
            r.plan[0].cmd_xy > cfg.mcts.limits.max_toward_unknown + 1e-12 &&
            detail::heading_enters_unknown(
                r.grid, state_at(r.plan[0], r.plan[0].duration),
                cfg.mcts.unknown_lookahead)) {
          ++tl.unknown_cap_violations;
        }

        r.current = r.plan.empty() ? stopping_from_state(r.state) : r.plan[0];
        r.plan_next = r.plan.empty() ? 0 : 1;
        r.prim_t = 0.0;
        r.evade_until = evaded ? t + r.current.duration : -1.0;

        broadcast_traj(r);
      }
    }

    // Re-validate the executing primitive against fresh peer tubes every
    // step. A tube announced mid-cycle would otherwise go unchecked until
    // the next planning cycle, long enough to be run over while parked.
    if (n > 1) {
      for (detail::RobotRig& r : rigs) {
        const std::vector<PeerState> peers = build_peers(r);
        if (peers.empty()) continue;
        MotionPrimitive rem = r.current;
        rem.start = r.state;
        rem.duration = std::max(r.current.duration - r.prim_t, cfg.dt);
        // A committed evade runs to completion as long as the map still
        // clears it. Re-picking every step oscillates between near-tied
        // escapes and slows the retreat below the peer's approach speed.
        if (t < r.evade_until) {
          r.scratch.cache.begin(r.grid);
          if (detail::prim_clear_cached(r.grid, rem, cfg.mcts.robot_radius,
                                        r.scratch.cache)) {
            continue;
          }
          r.evade_until = -1.0;
        }
        const MotionPrimitive rem_stop = stopping_primitive(rem);
        bool ok = true;
        try {
          ok = inter_robot_check(rem, rem_stop, r.priority, peers,
                                 cfg.priority, t);
        } catch (const StaleOdometry&) {
          ++tl.stale_odometry_events;
          ok = false;
        }
        if (ok) ok = detail::body_clear(rem, rem_stop, peers, cfg.priority);
        if (std::getenv("SUBGMM_TRACE2") &&
            t > atof(std::getenv("SUBGMM_TRACE2")) &&
            t < atof(std::getenv("SUBGMM_TRACE2")) + 4.0) {
          std::fprintf(stderr, "REVAL t=%.1f r%d ok=%d cur={xy%.2f z%.2f w%.2f stop%d}\n",
                       t, r.id, int(ok), r.current.cmd_xy, r.current.cmd_z,
                       r.current.cmd_yaw_rate, int(r.current.is_stopping));
        }
        const bool td = std::getenv("SUBGMM_TRACE3") &&
                        t > atof(std::getenv("SUBGMM_TRACE3")) && r.id == 1;
        if (!ok && detail::evade_conflict(r, cfg, peers, td)) {
          ++tl.inter_robot_replans[r.id];
          r.current = r.plan[0];
          r.plan_next = 1;
          r.prim_t = 0.0;
          r.evade_until = t + r.current.duration;
          broadcast_traj(r);
        }
      }
    }

    // Advance kinematics.
    for (detail::RobotRig& r : rigs) {
      r.prim_t += cfg.dt;
      while (r.prim_t > r.current.duration + 1e-9) {
        const double extra = r.prim_t - r.current.duration;
        const RobotState end = state_at(r.current, r.current.duration);
        if (r.plan_next < r.plan.size()) {
          r.current = r.plan[r.plan_next++];
        } else {
          r.current = stopping_from_state(end);
        }
        r.prim_t = extra;
      }
      const RobotState prev = r.state;
      r.state = state_at(r.current, r.prim_t);
      const Vec3 d = r.state.position - prev.position;
      const double vxy = std::hypot(d.x(), d.y()) / cfg.dt;
      r.dist += d.norm();
      r.vmax = std::max(r.vmax, vxy);
      r.vzmax = std::max(r.vzmax, std::abs(d.z()) / cfg.dt);
      r.wmax = std::max(r.wmax, std::abs(r.state.yaw - prev.yaw) / cfg.dt);
    }

    // Safety audit against ground truth.
    for (detail::RobotRig& r : rigs) {
      const Vec3 p = r.state.position;
      const CellIndex lo = world.cell_of(p - Vec3::Constant(cfg.physical_radius));
      const CellIndex hi = world.cell_of(p + Vec3::Constant(cfg.physical_radius));
      bool colliding = false;
      for (int z = lo[2]; z <= hi[2] && !colliding; ++z) {
        for (int y = lo[1]; y <= hi[1] && !colliding; ++y) {
          for (int x = lo[0]; x <= hi[0] && !colliding; ++x) {
            const CellIndex c(x, y, z);
            if (world.in_bounds(c) && !world.solid(c)) continue;
            const Vec3 blo = world.origin + world.resolution * c.cast<double>();
            double d2 = 0.0;
            for (int i = 0; i < 3; ++i) {
              const double v = std::clamp(p[i], blo[i], blo[i] + world.resolution);
              d2 += (v - p[i]) * (v - p[i]);
            }
            if (d2 <= cfg.physical_radius * cfg.physical_radius) {
              colliding = true;
            }
          }
        }
      }
      if (colliding) {
        ++r.collisions;
        ++tl.env_collisions;
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const Vec3 a = rigs[i].state.position;
        const Vec3 b = rigs[j].state.position;
        if (std::hypot(a.x() - b.x(), a.y() - b.y()) <
                2.0 * cfg.priority.cylinder_radius &&
            std::abs(a.z() - b.z()) < cfg.priority.cylinder_height) {
          ++tl.cylinder_overlaps;
          if (std::getenv("SUBGMM_TRACE")) {
            std::fprintf(stderr,
                         "OVERLAP t=%.1f a=(%.2f %.2f %.2f) b=(%.2f %.2f "
                         "%.2f) dxy=%.2f dz=%.2f\n",
                         t, a.x(), a.y(), a.z(), b.x(), b.y(), b.z(),
                         std::hypot(a.x() - b.x(), a.y() - b.y()),
                         std::abs(a.z() - b.z()));
          }
        }
      }
    }

    if ((k + 1) % metrics_every == 0 || k + 1 == steps) {
      emit_rows((k + 1) * cfg.dt);
    }
  }

  for (int i = 0; i < n; ++i) {
    tl.max_speed_xy[i] = rigs[i].vmax;
    tl.max_speed_z[i] = rigs[i].vzmax;
    tl.max_yaw_rate[i] = rigs[i].wmax;
  }
  tl.final_team_coverage = observable_count
                               ? double(team_observed) / double(observable_count)
                               : 0.0;

  // Cross-check byte conservation against the channel bookkeeping.
  for (const RateLimitedChannel& ch : map_ch) {
    const ChannelStats& s = ch.stats();
    const uint64_t queued = uint64_t(std::llround(ch.queued_bytes()));
    if (s.enqueued_bytes != s.delivered_bytes + s.dropped_bytes + queued) {
      tl.byte_conservation_ok = false;
    }
  }
  return tl;
}

}  // namespace subgmm
