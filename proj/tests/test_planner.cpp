#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "subgmm/planner.hpp"

using namespace subgmm;

namespace {

void fill_free(LocalOccupancyGrid& g) {
  for (uint32_t i = 0; i < g.cell_count(); ++i) g.set_linear(i, -0.4f);
}

void set_occupied(LocalOccupancyGrid& g, const Vec3& p) {
  g.set_linear(g.linear(g.cell_of(p)), 3.0f);
}

Vec3 euler_endpoint(const MotionPrimitive& p, double dt) {
  Vec3 pos = p.start.position;
  double yaw = p.start.yaw;
  const int n = int(std::round(p.duration / dt));
  for (int i = 0; i < n; ++i) {
    pos.x() += p.cmd_xy * std::cos(yaw) * dt;
    pos.y() += p.cmd_xy * std::sin(yaw) * dt;
    pos.z() += p.cmd_z * dt;
    yaw += p.cmd_yaw_rate * dt;
  }
  return pos;
}

MotionPrimitive make_prim(const RobotState& s, double v, double w, double vz,
                          double dur = 2.0) {
  MotionPrimitive p;
  p.start = s;
  p.cmd_xy = v;
  p.cmd_z = vz;
  p.cmd_yaw_rate = w;
  p.duration = dur;
  return p;
}

}  // namespace

TEST_CASE("arc endpoints match fine-step euler integration") {
  RobotState s;
  s.position = Vec3(0.3, -0.2, 1.0);
  s.yaw = 0.7;

  struct Case {
    double v, w, vz;
  };
  for (const Case& c : {Case{1.0, 0.5, 0.0}, Case{2.0, -0.25, 0.25},
                        Case{0.5, 0.0, -0.25}, Case{1.5, 0.5, 0.0},
                        Case{0.0, 0.5, 0.0}}) {
    const MotionPrimitive p = make_prim(s, c.v, c.w, c.vz);
    const Vec3 exact = state_at(p, p.duration).position;
    const Vec3 approx = euler_endpoint(p, 1e-3);
    INFO("v=" << c.v << " w=" << c.w << " vz=" << c.vz);
    REQUIRE((exact - approx).norm() < 1e-3);
  }
}

TEST_CASE("state_at clamps time and starts at the start state") {
  RobotState s;
  s.position = Vec3(1, 2, 3);
  s.yaw = 0.5;
  const MotionPrimitive p = make_prim(s, 1.0, 0.25, 0.1);
  REQUIRE((state_at(p, 0.0).position - s.position).norm() == 0.0);
  REQUIRE((state_at(p, 99.0).position - state_at(p, p.duration).position)
              .norm() == 0.0);
  REQUIRE(state_at(p, 1.0).time == Catch::Approx(s.time + 1.0));
}

TEST_CASE("stopping primitive decelerates to hover with fixed heading") {
  RobotState s;
  s.yaw = 0.3;
  const MotionPrimitive p = make_prim(s, 2.0, 0.5, 0.25);
  const RobotState end = state_at(p, p.duration);
  const MotionPrimitive stop = stopping_primitive(p);

  REQUIRE((stop.start.position - end.position).norm() < 1e-12);
  REQUIRE(stop.is_stopping);
  const RobotState rest = state_at(stop, stop.duration);
  REQUIRE(rest.speed == 0.0);
  REQUIRE(rest.yaw == Catch::Approx(end.yaw));
  // Linear deceleration from v over T covers v*T/2.
  const Vec3 d = rest.position - end.position;
  REQUIRE(Vec3(d.x(), d.y(), 0.0).norm() ==
          Catch::Approx(p.cmd_xy * stop.duration / 2.0).margin(1e-9));
  REQUIRE(d.z() == Catch::Approx(p.cmd_z * stop.duration / 2.0).margin(1e-9));
}

TEST_CASE("primitive library spans the lattice and keeps hover") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  fill_free(g);
  RobotState s;
  s.position = Vec3(0, 0, 1);

  const auto prims = generate_primitives(s, SpeedLimits{}, g);
  REQUIRE(prims.size() == 75);  // 5 speeds x 5 yaw rates x 3 climb rates

  bool has_hover = false;
  double max_speed = 0.0;
  for (const auto& p : prims) {
    max_speed = std::max(max_speed, p.cmd_xy);
    if (p.cmd_xy == 0.0 && p.cmd_yaw_rate == 0.0 && p.cmd_z == 0.0) {
      has_hover = true;
    }
  }
  REQUIRE(has_hover);
  REQUIRE(max_speed == 2.0);
}

TEST_CASE("fully unknown surroundings cap the library speed") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  RobotState s;
  s.position = Vec3(0, 0, 1);

  const auto prims = generate_primitives(s, SpeedLimits{}, g);
  REQUIRE(!prims.empty());
  for (const auto& p : prims) {
    REQUIRE(p.cmd_xy <= 1.0);
  }
}

TEST_CASE("speed limits prune the lattice") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  fill_free(g);
  RobotState s;
  s.position = Vec3(0, 0, 1);
  SpeedLimits limits;
  limits.max_xy = 0.5;
  limits.max_yaw_rate = 0.25;
  limits.max_z = 0.1;

  const auto prims = generate_primitives(s, limits, g);
  REQUIRE(prims.size() == 6);  // {0, 0.5} x {-0.25, 0, 0.25} x {0}
  for (const auto& p : prims) {
    REQUIRE(p.cmd_xy <= 0.5);
    REQUIRE(std::abs(p.cmd_yaw_rate) <= 0.25);
    REQUIRE(p.cmd_z == 0.0);
  }
}

TEST_CASE("info gain scores the frontier surface, not the unknown volume") {
  LocalOccupancyGrid g(Vec3::Zero(), {30, 7, 7}, 1.0, {});
  fill_free(g);
  // Unknown corridor segment of 10 cells along +x at (y=3, z=3).
  for (int x = 5; x <= 14; ++x) {
    g.set_linear(g.linear({x, 3, 3}), 0.0f);
  }
  set_occupied(g, Vec3(15.5, 3.5, 3.5));

  SensorModel sm;
  sm.hfov = 0.01;  // single central ray
  sm.vfov = 0.01;
  sm.max_range = 25.0;

  RobotState s;
  s.position = Vec3(1.5, 3.5, 3.5);
  const MotionPrimitive hover = make_prim(s, 0, 0, 0);

  SECTION("a ray earns the first unknown cell and stops there") {
    REQUIRE(info_gain(g, {hover}, sm) == 1.0);
  }
  SECTION("unknown space is opaque to deeper unknown cells") {
    // Second unknown gap behind a known-free stretch: still only the
    // first frontier cell counts.
    for (int x = 6; x <= 9; ++x) {
      g.set_linear(g.linear({x, 3, 3}), -0.4f);
    }
    REQUIRE(info_gain(g, {hover}, sm) == 1.0);
  }
  SECTION("solid wall directly ahead yields zero") {
    set_occupied(g, Vec3(2.5, 3.5, 3.5));
    REQUIRE(info_gain(g, {hover}, sm) == 0.0);
  }
  SECTION("revealing cells pushes the frontier deeper, never adds gain") {
    for (int x = 5; x <= 7; ++x) {
      g.set_linear(g.linear({x, 3, 3}), -0.4f);
    }
    REQUIRE(info_gain(g, {hover}, sm) == 1.0);  // frontier now at x = 8
    for (int x = 8; x <= 14; ++x) {
      g.set_linear(g.linear({x, 3, 3}), -0.4f);
    }
    REQUIRE(info_gain(g, {hover}, sm) == 0.0);  // ray runs to the wall
  }
  SECTION("repeated poses are deduplicated") {
    REQUIRE(info_gain(g, {hover, hover}, sm) == 1.0);
  }
}

TEST_CASE("collision checks follow the sphere-to-cell arithmetic") {
  const double radius = 0.5;
  RobotState s;
  s.position = Vec3(0, 0, 1);
  const MotionPrimitive straight = make_prim(s, 1.0, 0.0, 0.0);

  SECTION("all-free surroundings pass, centerline obstacle fails") {
    LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
    fill_free(g);
    REQUIRE(collision_free(g, straight, radius));
    set_occupied(g, Vec3(1.05, 0.05, 1.05));
    REQUIRE(!collision_free(g, straight, radius));
  }
  SECTION("unknown cells block like occupied ones") {
    LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
    fill_free(g);
    g.set_linear(g.linear(g.cell_of(Vec3(1.05, 0.05, 1.05))), 0.0f);
    REQUIRE(!collision_free(g, straight, radius));
  }
  SECTION("obstacle at radius plus 1.5 cells of lateral clearance passes") {
    LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
    fill_free(g);
    set_occupied(g, Vec3(1.05, radius + 0.15, 1.05));
    REQUIRE(collision_free(g, straight, radius));
  }
  SECTION("obstacle at radius minus one cell of offset fails") {
    // Origin shifted so a cell center lands exactly at y = 0.4.
    LocalOccupancyGrid g(Vec3(-10, -10.05, -1), {200, 201, 40}, 0.1, {});
    fill_free(g);
    set_occupied(g, Vec3(1.05, radius - 0.1, 1.05));
    REQUIRE(!collision_free(g, straight, radius));
  }
  SECTION("the paired stopping primitive is part of the check") {
    LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
    fill_free(g);
    // Wall just beyond the stopping distance of the slow primitive but
    // inside that of the fast one.
    for (int y = 0; y < 200; ++y) {
      for (int z = 0; z < 40; ++z) {
        g.set_linear(g.linear({126, y, z}), 3.0f);  // x in [2.6, 2.7)
      }
    }
    const MotionPrimitive slow = make_prim(s, 0.5, 0.0, 0.0);
    REQUIRE(collision_free(g, slow, radius));       // reaches x = 1.25
    REQUIRE(!collision_free(g, straight, radius));  // stop ends at x = 2.5
  }
}

TEST_CASE("mcts returns the forced sequence when only hover is feasible") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  fill_free(g);
  RobotState s;
  s.position = Vec3(0, 0, 1);

  MctsConfig cfg;
  cfg.budget = 50;
  cfg.horizon = 3;
  cfg.limits.max_xy = 0.3;      // below the smallest nonzero lattice speed
  cfg.limits.max_yaw_rate = 0.1;
  cfg.limits.max_z = 0.1;

  const auto plan = mcts_plan(g, s, cfg, 7);
  REQUIRE(plan.size() == 3);
  for (const auto& p : plan) {
    REQUIRE(p.cmd_xy == 0.0);
    REQUIRE(p.cmd_yaw_rate == 0.0);
    REQUIRE(p.cmd_z == 0.0);
  }
}

TEST_CASE("mcts falls back to the stopping primitive when boxed in") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  RobotState s;  // fully unknown grid: even hover has unknown inside radius
  s.position = Vec3(0, 0, 1);
  s.speed = 1.0;

  MctsConfig cfg;
  cfg.budget = 20;
  const auto plan = mcts_plan(g, s, cfg, 3);
  REQUIRE(plan.size() == 1);
  REQUIRE(plan[0].is_stopping);
  REQUIRE(plan[0].cmd_xy == 1.0);
}

TEST_CASE("mcts prefers the arm that reveals unknown space") {
  // Free and known up to x = 3.5, unknown beyond; a short sensor only
  // reaches the unknown region from the advanced endpoint.
  LocalOccupancyGrid g(Vec3::Zero(), {40, 32, 16}, 0.25, {});
  for (uint32_t i = 0; i < g.cell_count(); ++i) {
    if (g.cell_center(g.unlinear(i)).x() < 3.5) g.set_linear(i, -0.4f);
  }
  RobotState s;
  s.position = Vec3(1.0, 4.0, 2.0);

  MctsConfig cfg;
  cfg.budget = 64;
  cfg.horizon = 1;
  cfg.limits.max_xy = 0.5;
  cfg.limits.max_yaw_rate = 0.1;
  cfg.limits.max_z = 0.1;
  cfg.sensor.hfov = 0.01;
  cfg.sensor.vfov = 0.01;
  cfg.sensor.max_range = 2.0;

  // Enumeration oracle over the two-primitive library.
  const MotionPrimitive hover = make_prim(s, 0, 0, 0);
  const MotionPrimitive straight = make_prim(s, 0.5, 0, 0);
  REQUIRE(info_gain(g, {hover}, cfg.sensor) == 0.0);
  REQUIRE(info_gain(g, {straight}, cfg.sensor) > 0.0);

  const auto plan = mcts_plan(g, s, cfg, 11);
  REQUIRE(plan.size() == 1);
  REQUIRE(plan[0].cmd_xy == 0.5);
  REQUIRE(plan[0].cmd_yaw_rate == 0.0);
  REQUIRE(collision_free(g, plan[0], cfg.robot_radius));
}

TEST_CASE("mcts matches exhaustive search on a small tree") {
  LocalOccupancyGrid g(Vec3::Zero(), {40, 40, 16}, 0.25, {});
  for (uint32_t i = 0; i < g.cell_count(); ++i) {
    const Vec3 c = g.cell_center(g.unlinear(i));
    if (c.x() < 6.0 || c.y() > 5.0) g.set_linear(i, -0.4f);
  }
  RobotState s;
  s.position = Vec3(2.0, 7.0, 2.0);

  MctsConfig cfg;
  cfg.budget = 2000;
  cfg.horizon = 2;
  cfg.limits.max_xy = 0.5;
  cfg.limits.max_z = 0.1;
  cfg.sensor.max_range = 3.0;
  cfg.sensor.hfov = 0.6;
  cfg.sensor.vfov = 0.3;

  // Exhaustive two-level enumeration of the same feasible library.
  double best = -1.0;
  const auto roots = generate_primitives(s, cfg.limits, g);
  for (const auto& a : roots) {
    if (!collision_free(g, a, cfg.robot_radius)) continue;
    const RobotState mid = state_at(a, a.duration);
    best = std::max(best, info_gain(g, {a}, cfg.sensor));
    for (const auto& b : generate_primitives(mid, cfg.limits, g)) {
      if (!collision_free(g, b, cfg.robot_radius)) continue;
      best = std::max(best, info_gain(g, {a, b}, cfg.sensor));
    }
  }
  REQUIRE(best >= 0.0);

  const auto plan = mcts_plan(g, s, cfg, 13);
  const double plan_value = info_gain(g, plan, cfg.sensor);
  REQUIRE(plan_value == best);
  for (const auto& p : plan) {
    REQUIRE(collision_free(g, p, cfg.robot_radius));
  }
}

TEST_CASE("mcts is deterministic per seed and scratch reuse is inert") {
  LocalOccupancyGrid g(Vec3::Zero(), {40, 40, 16}, 0.25, {});
  for (uint32_t i = 0; i < g.cell_count(); ++i) {
    const Vec3 c = g.cell_center(g.unlinear(i));
    if (c.x() < 6.0) g.set_linear(i, -0.4f);
  }
  RobotState s;
  s.position = Vec3(2.0, 5.0, 2.0);

  MctsConfig cfg;
  cfg.budget = 150;

  auto key = [](const std::vector<MotionPrimitive>& plan) {
    std::vector<double> k;
    for (const auto& p : plan) {
      k.push_back(p.cmd_xy);
      k.push_back(p.cmd_yaw_rate);
      k.push_back(p.cmd_z);
    }
    return k;
  };

  const auto a = mcts_plan(g, s, cfg, 42);
  const auto b = mcts_plan(g, s, cfg, 42);
  REQUIRE(key(a) == key(b));

  PlannerScratch scratch;
  const auto c = mcts_plan(g, s, cfg, 42, {}, &scratch);
  const auto d = mcts_plan(g, s, cfg, 42, {}, &scratch);
  REQUIRE(key(c) == key(a));
  REQUIRE(key(d) == key(a));
}

TEST_CASE("root filter vetoes first-depth actions") {
  LocalOccupancyGrid g(Vec3(-10, -10, -1), {200, 200, 40}, 0.1, {});
  fill_free(g);
  RobotState s;
  s.position = Vec3(0, 0, 1);

  MctsConfig cfg;
  cfg.budget = 60;
  cfg.horizon = 1;

  // Veto everything but hover.
  const auto plan = mcts_plan(
      g, s, cfg, 5,
      [](const MotionPrimitive& p, const MotionPrimitive&) {
        return p.cmd_xy == 0.0 && p.cmd_yaw_rate == 0.0 && p.cmd_z == 0.0;
      });
  REQUIRE(plan.size() == 1);
  REQUIRE(plan[0].cmd_xy == 0.0);

  // Veto everything: stopping fallback.
  const auto none = mcts_plan(
      g, s, cfg, 5,
      [](const MotionPrimitive&, const MotionPrimitive&) { return false; });
  REQUIRE(none.size() == 1);
  REQUIRE(none[0].is_stopping);
}

TEST_CASE("inter-robot check follows priority and cylinder geometry") {
  PriorityConfig cfg;
  const double now = 10.0;

  RobotState own;
  own.position = Vec3(0, 0, 1);
  const MotionPrimitive candidate = make_prim(own, 1.0, 0.0, 0.0);
  const MotionPrimitive stopping = stopping_primitive(candidate);

  auto peer_with = [&](int priority, const Vec3& pos, double yaw) {
    PeerState peer;
    peer.robot_id = 1;
    peer.priority = priority;
    peer.position = pos;
    peer.odom_time = now - 0.1;
    RobotState ps;
    ps.position = pos;
    ps.yaw = yaw;
    peer.trajectory = {make_prim(ps, 1.0, 0.0, 0.0)};
    return peer;
  };

  SECTION("distant peers are gated out") {
    const auto peer = peer_with(0, Vec3(100, 0, 1), std::numbers::pi);
    REQUIRE(inter_robot_check(candidate, stopping, 1, {peer}, cfg, now));
  }
  SECTION("head-on conflict blocks the lower-priority robot") {
    const auto peer = peer_with(0, Vec3(3, 0, 1), std::numbers::pi);
    REQUIRE(!inter_robot_check(candidate, stopping, 1, {peer}, cfg, now));
  }
  SECTION("the higher-priority robot ignores lower-priority peers") {
    const auto peer = peer_with(1, Vec3(3, 0, 1), std::numbers::pi);
    REQUIRE(inter_robot_check(candidate, stopping, 0, {peer}, cfg, now));
  }
  SECTION("parallel paths separated by two radii plus margin pass") {
    const double sep = 2.0 * cfg.cylinder_radius + 0.1;
    const auto peer = peer_with(0, Vec3(0, sep, 1), 0.0);
    REQUIRE(inter_robot_check(candidate, stopping, 1, {peer}, cfg, now));
  }
  SECTION("vertical separation beyond the cylinder height passes") {
    const auto high =
        peer_with(0, Vec3(3, 0, 1 + cfg.cylinder_height + 0.1),
                  std::numbers::pi);
    REQUIRE(inter_robot_check(candidate, stopping, 1, {high}, cfg, now));
    const auto low = peer_with(0, Vec3(3, 0, 1.3), std::numbers::pi);
    REQUIRE(!inter_robot_check(candidate, stopping, 1, {low}, cfg, now));
  }
  SECTION("stale odometry from a constraining peer throws") {
    auto peer = peer_with(0, Vec3(3, 0, 1), std::numbers::pi);
    peer.odom_time = now - cfg.staleness_bound - 0.5;
    REQUIRE_THROWS_AS(
        inter_robot_check(candidate, stopping, 1, {peer}, cfg, now),
        StaleOdometry);
  }
  SECTION("stale odometry from a lower-priority peer is ignored") {
    auto peer = peer_with(1, Vec3(3, 0, 1), std::numbers::pi);
    peer.odom_time = now - cfg.staleness_bound - 0.5;
    REQUIRE(inter_robot_check(candidate, stopping, 0, {peer}, cfg, now));
  }
}
