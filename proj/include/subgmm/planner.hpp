#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "subgmm/common.hpp"
#include "subgmm/geometry.hpp"
#include "subgmm/occupancy.hpp"

namespace subgmm {

struct RobotState {
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;       // radians
  double speed = 0.0;     // commanded planar speed, m/s
  double yaw_rate = 0.0;  // rad/s
  double time = 0.0;      // seconds
};

struct SpeedLimits {
  double max_xy = 2.0;             // m/s
  double max_toward_unknown = 1.0;  // m/s
  double max_z = 0.25;             // m/s
  double max_yaw_rate = 0.5;       // rad/s
};

// Constant-command arc; stopping primitives decelerate linearly to hover
// over the duration while holding heading.
struct MotionPrimitive {
  RobotState start;
  double cmd_xy = 0.0;
  double cmd_z = 0.0;
  double cmd_yaw_rate = 0.0;
  double duration = 2.0;
  bool is_stopping = false;
};

inline Pose pose_of(const RobotState& s) {
  Pose p;
  p.rotation = rot_z(s.yaw);
  p.translation = s.position;
  return p;
}

inline RobotState state_at(const MotionPrimitive& p, double t) {
  const double tau = std::clamp(t, 0.0, p.duration);
  RobotState s = p.start;
  s.time = p.start.time + tau;
  if (p.is_stopping) {
    // Linear deceleration from the initial speeds to rest, heading fixed.
    const double travel =
        p.cmd_xy * (tau - tau * tau / (2.0 * p.duration));
    s.position.x() += travel * std::cos(p.start.yaw);
    s.position.y() += travel * std::sin(p.start.yaw);
    s.position.z() += p.cmd_z * (tau - tau * tau / (2.0 * p.duration));
    s.speed = p.cmd_xy * (1.0 - tau / p.duration);
    s.yaw_rate = 0.0;
    return s;
  }
  const double w = p.cmd_yaw_rate;
  const double y0 = p.start.yaw;
  if (std::abs(w) < 1e-9) {
    s.position.x() += p.cmd_xy * tau * std::cos(y0);
    s.position.y() += p.cmd_xy * tau * std::sin(y0);
  } else {
    // Exact constant-twist arc of radius cmd_xy / w.
    s.position.x() += p.cmd_xy / w * (std::sin(y0 + w * tau) - std::sin(y0));
    s.position.y() += p.cmd_xy / w * (std::cos(y0) - std::cos(y0 + w * tau));
    s.yaw = y0 + w * tau;
  }
  s.position.z() += p.cmd_z * tau;
  s.speed = p.cmd_xy;
  s.yaw_rate = w;
  return s;
}

inline MotionPrimitive stopping_from_state(const RobotState& s,
                                           double duration = 1.0) {
  MotionPrimitive p;
  p.start = s;
  p.cmd_xy = s.speed;
  p.cmd_z = 0.0;
  p.cmd_yaw_rate = 0.0;
  p.duration = duration;
  p.is_stopping = true;
  return p;
}

inline MotionPrimitive stopping_primitive(const MotionPrimitive& p,
                                          double duration = 1.0) {
  MotionPrimitive stop = stopping_from_state(state_at(p, p.duration), duration);
  stop.cmd_z = p.cmd_z;  // vertical motion decelerates too
  return stop;
}

// Exact sphere test: every cell whose box comes within `radius` of p must
// be known free; out-of-grid space counts as unknown.
inline bool position_clear(const LocalOccupancyGrid& g, const Vec3& p,
                           double radius) {
  CellIndex lo, hi;
  for (int i = 0; i < 3; ++i) {
    lo[i] = int(std::floor((p[i] - radius - g.origin()[i]) / g.resolution()));
    hi[i] = int(std::floor((p[i] + radius - g.origin()[i]) / g.resolution()));
  }
  const double r2 = radius * radius;
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const CellIndex c(x, y, z);
        const Vec3 blo = g.origin() + g.resolution() * c.cast<double>();
        double d2 = 0.0;
        for (int i = 0; i < 3; ++i) {
          const double v =
              std::clamp(p[i], blo[i], blo[i] + g.resolution());
          d2 += (v - p[i]) * (v - p[i]);
        }
        if (d2 > r2) continue;
        if (!g.in_bounds(c)) return false;
        if (classify(g.at(c)) != CellState::Free) return false;
      }
    }
  }
  return true;
}

inline constexpr double kCollisionSampleStep = 0.1;  // seconds

inline bool collision_free(const LocalOccupancyGrid& g,
                           const MotionPrimitive& prim, double radius) {
  auto sweep = [&](const MotionPrimitive& p) {
    const int n = int(std::ceil(p.duration / kCollisionSampleStep));
    for (int i = 0; i <= n; ++i) {
      const double t = std::min(p.duration, i * kCollisionSampleStep);
      if (!position_clear(g, state_at(p, t).position, radius)) return false;
    }
    return true;
  };
  if (!sweep(prim)) return false;
  if (!prim.is_stopping && !sweep(stopping_primitive(prim))) return false;
  return true;
}

namespace detail {

// True when the first informative cell along the endpoint heading is
// unknown (or the ray leaves the grid) before hitting anything occupied.
inline bool heading_enters_unknown(const LocalOccupancyGrid& g,
                                   const RobotState& end, double lookahead) {
  const Vec3 dir(std::cos(end.yaw), std::sin(end.yaw), 0.0);
  bool unknown = false;
  walk_ray(g.origin(), g.resolution(), end.position,
           end.position + lookahead * dir, [&](const CellIndex& c, bool) {
             if (!g.in_bounds(c)) {
               unknown = true;
               return false;
             }
             const CellState st = classify(g.at(c));
             if (st == CellState::Unknown) {
               unknown = true;
               return false;
             }
             return st != CellState::Occupied;
           });
  return unknown;
}

}  // namespace detail

// Discrete constant-command library. Primitives faster than the
// toward-unknown limit are dropped when their endpoint heading runs into
// unknown space (their capped twin is already in the library).
inline std::vector<MotionPrimitive> generate_primitives(
    const RobotState& s, const SpeedLimits& limits,
    const LocalOccupancyGrid& grid, double unknown_lookahead = 2.0,
    double duration = 2.0) {
  static constexpr double kSpeeds[] = {0.0, 0.5, 1.0, 1.5, 2.0};
  static constexpr double kYawRates[] = {-0.5, -0.25, 0.0, 0.25, 0.5};
  static constexpr double kZSpeeds[] = {-0.25, 0.0, 0.25};
  std::vector<MotionPrimitive> out;
  for (double v : kSpeeds) {
    if (v > limits.max_xy + 1e-12) continue;
    for (double w : kYawRates) {
      if (std::abs(w) > limits.max_yaw_rate + 1e-12) continue;
      for (double vz : kZSpeeds) {
        if (std::abs(vz) > limits.max_z + 1e-12) continue;
        MotionPrimitive p;
        p.start = s;
        p.cmd_xy = v;
        p.cmd_z = vz;
        p.cmd_yaw_rate = w;
        p.duration = duration;
        if (v > limits.max_toward_unknown + 1e-12 &&
            detail::heading_enters_unknown(grid, state_at(p, duration),
                                           unknown_lookahead)) {
          continue;
        }
        out.push_back(p);
      }
    }
  }
  return out;
}

struct SensorModel {
  double hfov = 1.5;        // radians
  double vfov = 1.0;        // radians
  double max_range = 5.0;   // meters
  double ray_spacing_deg = 5.0;
};

inline Frustum sensor_frustum(const SensorModel& sm, const Pose& pose) {
  Frustum f;
  f.apex = pose.translation;
  f.orientation = pose.rotation;
  f.hfov = sm.hfov;
  f.vfov = sm.vfov;
  f.max_range = sm.max_range;
  return f;
}

// Frontier-surface objective: each frustum raycast earns the first
// unknown cell it crosses and terminates there, as it does at occupied
// cells. Unknown space is treated as opaque; counting cells behind it
// would promise gain no sensor ray is guaranteed to realize, and the
// receding-horizon loop fixates on poses whose promised gain never
// materializes. Cells are deduplicated across the whole pose sequence.
class InfoGainEvaluator {
 public:
  double gain(const LocalOccupancyGrid& g, const std::vector<Pose>& poses,
              const SensorModel& sm) {
    if (stamps_.size() != g.cell_count()) {
      stamps_.assign(g.cell_count(), 0);
      epoch_ = 0;
    }
    ++epoch_;
    const double step = sm.ray_spacing_deg * std::numbers::pi / 180.0;
    size_t count = 0;
    for (const Pose& pose : poses) {
      const int naz = int(std::floor(sm.hfov / 2.0 / step));
      const int nel = int(std::floor(sm.vfov / 2.0 / step));
      for (int ia = -naz; ia <= naz; ++ia) {
        for (int ie = -nel; ie <= nel; ++ie) {
          const double az = ia * step;
          const double el = ie * step;
          const Vec3 dir = pose.rotation *
                           Vec3(std::cos(el) * std::cos(az),
                                std::cos(el) * std::sin(az), std::sin(el));
          detail::walk_ray(
              g.origin(), g.resolution(), pose.translation,
              pose.translation + sm.max_range * dir,
              [&](const CellIndex& c, bool) {
                if (!g.in_bounds(c)) return false;
                const uint32_t idx = g.linear(c);
                const CellState st = classify(g.at_linear(idx));
                if (st == CellState::Occupied) return false;
                if (st == CellState::Unknown) {
                  if (stamps_[idx] != epoch_) {
                    stamps_[idx] = epoch_;
                    ++count;
                  }
                  return false;
                }
                return true;
              });
        }
      }
    }
    return double(count);
  }

 private:
  std::vector<uint32_t> stamps_;
  uint32_t epoch_ = 0;
};

inline double info_gain(const LocalOccupancyGrid& g,
                        const std::vector<MotionPrimitive>& sequence,
                        const SensorModel& sm) {
  std::vector<Pose> poses;
  poses.reserve(sequence.size());
  for (const auto& p : sequence) {
    poses.push_back(pose_of(state_at(p, p.duration)));
  }
  InfoGainEvaluator eval;
  return eval.gain(g, poses, sm);
}

// Memoizes position safety at cell granularity for one planning epoch.
// Queries are inflated by half a cell diagonal so a cached "clear" verdict
// implies the exact per-position test also passes.
class CollisionCache {
 public:
  void begin(const LocalOccupancyGrid& g) {
    if (stamps_.size() != g.cell_count()) {
      stamps_.assign(g.cell_count(), 0);
      safe_.assign(g.cell_count(), 0);
      epoch_ = 0;
    }
    ++epoch_;
  }

  bool clear_at(const LocalOccupancyGrid& g, const Vec3& p, double radius) {
    const CellIndex c = g.cell_of(p);
    if (!g.in_bounds(c)) return false;
    const uint32_t idx = g.linear(c);
    if (stamps_[idx] != epoch_) {
      const double inflate = 0.5 * std::sqrt(3.0) * g.resolution();
      stamps_[idx] = epoch_;
      safe_[idx] =
          position_clear(g, g.cell_center(c), radius + inflate) ? 1 : 0;
    }
    return safe_[idx] != 0;
  }

 private:
  std::vector<uint32_t> stamps_;
  std::vector<uint8_t> safe_;
  uint32_t epoch_ = 0;
};

struct MctsConfig {
  int budget = 200;   // tree iterations (at most one expansion each)
  int horizon = 3;    // primitive depths
  double uct_c = 1.0;
  double discount = 0.7;  // per-depth weight on marginal gain
  double robot_radius = 0.5;
  SpeedLimits limits;
  SensorModel sensor;
  double unknown_lookahead = 2.0;
  double primitive_duration = 2.0;
};

// Reusable buffers so repeated planning calls do not reallocate
// grid-sized scratch.
struct PlannerScratch {
  InfoGainEvaluator evaluator;
  CollisionCache cache;
};

using RootFilter =
    std::function<bool(const MotionPrimitive&, const MotionPrimitive&)>;

namespace detail {

struct MctsNode {
  int parent = -1;
  MotionPrimitive prim;
  RobotState end;
  int depth = 0;
  double path_gain = 0.0;  // undiscounted deduplicated cells, root to here
  double disc_gain = 0.0;  // discounted sum of per-depth marginal gains
  int visits = 0;
  double value_sum = 0.0;
  std::vector<int> children;
  std::vector<MotionPrimitive> untried;
};

}  // namespace detail

// UCT over collision-free primitives; node value is the deduplicated
// unknown-cell gain accumulated from the root, each depth's marginal
// weighted by discount^(depth-1). The receding-horizon loop executes only
// the first primitive, so equal-total plans must rank by how soon they
// realize gain or a deferred plan can stall the robot in place. No
// rollouts: leaves score their own path. Returns the best explored
// root-to-leaf sequence, or the bare stopping primitive when nothing at
// the root is feasible.
inline std::vector<MotionPrimitive> mcts_plan(
    const LocalOccupancyGrid& grid, const RobotState& s0,
    const MctsConfig& cfg, uint64_t seed, const RootFilter& root_filter = {},
    PlannerScratch* scratch = nullptr) {
  PlannerScratch local;
  PlannerScratch& sc = scratch ? *scratch : local;
  sc.cache.begin(grid);
  Rng rng(seed);

  auto prim_clear = [&](const MotionPrimitive& p) {
    const auto sweep = [&](const MotionPrimitive& q) {
      const int n = int(std::ceil(q.duration / kCollisionSampleStep));
      for (int i = 0; i <= n; ++i) {
        const double t = std::min(q.duration, i * kCollisionSampleStep);
        if (!sc.cache.clear_at(grid, state_at(q, t).position,
                               cfg.robot_radius)) {
          return false;
        }
      }
      return true;
    };
    return sweep(p) && sweep(stopping_primitive(p));
  };

  auto feasible = [&](const RobotState& s, int depth) {
    auto prims = generate_primitives(s, cfg.limits, grid,
                                     cfg.unknown_lookahead,
                                     cfg.primitive_duration);
    std::vector<MotionPrimitive> out;
    for (const auto& p : prims) {
      if (!prim_clear(p)) continue;
      if (depth == 0 && root_filter &&
          !root_filter(p, stopping_primitive(p))) {
        continue;
      }
      out.push_back(p);
    }
    // Expansion order is randomized per seed, drawn by pop_back.
    for (size_t i = out.size(); i > 1; --i) {
      std::swap(out[i - 1], out[rng.uniform_index(i)]);
    }
    return out;
  };

  std::vector<detail::MctsNode> nodes(1);
  nodes[0].end = s0;
  nodes[0].untried = feasible(s0, 0);
  if (nodes[0].untried.empty()) {
    return {stopping_from_state(s0)};
  }

  int best_node = -1;
  double best_value = -1.0;
  int best_depth = 0;

  std::vector<Pose> pose_buf;
  for (int iter = 0; iter < cfg.budget; ++iter) {
    int cur = 0;
    while (nodes[cur].untried.empty() && !nodes[cur].children.empty()) {
      const double scale = std::max(1.0, best_value);
      double best_ucb = -std::numeric_limits<double>::infinity();
      int pick = nodes[cur].children.front();
      for (int child : nodes[cur].children) {
        const auto& n = nodes[child];
        const double ucb =
            n.value_sum / double(n.visits) / scale +
            cfg.uct_c *
                std::sqrt(std::log(double(nodes[cur].visits + 1)) /
                          double(n.visits));
        if (ucb > best_ucb) {
          best_ucb = ucb;
          pick = child;
        }
      }
      cur = pick;
    }

    if (!nodes[cur].untried.empty() && nodes[cur].depth < cfg.horizon) {
      detail::MctsNode child;
      child.parent = cur;
      child.prim = nodes[cur].untried.back();
      nodes[cur].untried.pop_back();
      child.end = state_at(child.prim, child.prim.duration);
      child.depth = nodes[cur].depth + 1;

      // Endpoint poses root-to-child; the evaluator deduplicates across
      // the whole sequence.
      pose_buf.clear();
      pose_buf.push_back(pose_of(child.end));
      for (int p = cur; p != 0; p = nodes[p].parent) {
        pose_buf.push_back(pose_of(nodes[p].end));
      }
      std::reverse(pose_buf.begin(), pose_buf.end());
      child.path_gain = sc.evaluator.gain(grid, pose_buf, cfg.sensor);
      child.disc_gain =
          nodes[cur].disc_gain +
          std::pow(cfg.discount, child.depth - 1) *
              (child.path_gain - nodes[cur].path_gain);
      if (child.depth < cfg.horizon) {
        child.untried = feasible(child.end, child.depth);
      }
      const int child_idx = int(nodes.size());
      nodes.push_back(std::move(child));
      nodes[cur].children.push_back(child_idx);
      cur = child_idx;
    }

    const double value = nodes[cur].disc_gain;
    const int depth = nodes[cur].depth;
    if (depth > 0 &&
        (value > best_value ||
         (value == best_value && depth > best_depth))) {
      best_value = value;
      best_node = cur;
      best_depth = depth;
    }
    for (int p = cur; p != -1; p = nodes[p].parent) {
      nodes[p].visits += 1;
      nodes[p].value_sum += value;
    }
  }

  std::vector<MotionPrimitive> seq;
  for (int p = best_node; p > 0; p = nodes[p].parent) {
    seq.push_back(nodes[p].prim);
  }
  std::reverse(seq.begin(), seq.end());
  if (seq.empty()) return {stopping_from_state(s0)};
  return seq;
}

// ---------------------------------------------------------------------------
// Priority-based inter-robot collision checking.
// ---------------------------------------------------------------------------

struct PriorityConfig {
  double activation_radius = 10.0;  // meters
  int max_cylinders = 8;
  double cylinder_radius = 0.6;  // meters
  double cylinder_height = 0.5;  // meters, full height
  double staleness_bound = 1.0;  // seconds
  // Inflation applied to the cylinders during vetoes so that control lag,
  // odometry quantization, and replan latency land inside the margin rather
  // than inside the protected footprint itself.
  double check_margin = 0.0;  // meters
};

struct PeerState {
  uint8_t robot_id = 0;
  int priority = 0;  // smaller value = higher priority
  Vec3 position = Vec3::Zero();
  double odom_time = 0.0;
  std::vector<MotionPrimitive> trajectory;
};

namespace detail {

// Positions sampled uniformly in time over the whole primitive sequence,
// endpoints included.
inline std::vector<Vec3> cylinder_centers(
    const std::vector<MotionPrimitive>& prims, int max_cylinders) {
  std::vector<Vec3> out;
  if (prims.empty() || max_cylinders <= 0) return out;
  double total = 0.0;
  for (const auto& p : prims) total += p.duration;
  const int n = max_cylinders;
  for (int i = 0; i < n; ++i) {
    double t = n > 1 ? total * double(i) / double(n - 1) : 0.0;
    for (const auto& p : prims) {
      if (t <= p.duration || &p == &prims.back()) {
        out.push_back(state_at(p, t).position);
        break;
      }
      t -= p.duration;
    }
  }
  return out;
}

inline bool cylinders_collide(const Vec3& a, const Vec3& b, double radius,
                              double height) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  return std::sqrt(dx * dx + dy * dy) < 2.0 * radius &&
         std::abs(a.z() - b.z()) < height;
}

}  // namespace detail

// Safe (true) when every higher-priority robot is either outside the
// activation radius or clear of all sampled cylinder pairs. Lower-priority
// peers never constrain this robot.
inline bool inter_robot_check(const MotionPrimitive& candidate,
                              const MotionPrimitive& stopping,
                              int own_priority,
                              const std::vector<PeerState>& peers,
                              const PriorityConfig& cfg, double now) {
  std::vector<MotionPrimitive> own = {candidate, stopping};
  const auto own_cyls = detail::cylinder_centers(own, cfg.max_cylinders);
  for (const auto& peer : peers) {
    if (peer.priority >= own_priority) continue;
    SUBGMM_CHECK(now - peer.odom_time <= cfg.staleness_bound, StaleOdometry,
                 "peer odometry too old for a safe check");
    if ((peer.position - candidate.start.position).norm() >
        cfg.activation_radius) {
      continue;
    }
    std::vector<Vec3> peer_cyls =
        detail::cylinder_centers(peer.trajectory, cfg.max_cylinders);
    if (peer_cyls.empty()) peer_cyls.push_back(peer.position);
    for (const Vec3& a : own_cyls) {
      for (const Vec3& b : peer_cyls) {
        if (detail::cylinders_collide(a, b,
                                      cfg.cylinder_radius + cfg.check_margin,
                                      cfg.cylinder_height + cfg.check_margin)) {
          return false;
        }
      }
    }
  }
  return true;
}

}  // namespace subgmm
