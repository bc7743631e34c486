#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <variant>
#include <vector>

#include "subgmm/common.hpp"
#include "subgmm/geometry.hpp"
#include "subgmm/gmm.hpp"
#include "subgmm/occupancy.hpp"

namespace subgmm {

enum class MsgKind : uint8_t {
  GmmKeyframe = 1,
  OgChangeSet = 2,
  OctreeUpdate = 3,
  Odometry = 4,
  Trajectory = 5,
};

inline constexpr uint32_t kWireMagic = 0x4d4d4721u;
inline constexpr size_t kFrameHeaderBytes = 16;

// The frame header exists only for the channel simulation; byte accounting
// that mirrors the transmission-size formulas covers the payload alone.
struct WireMessage {
  MsgKind kind = MsgKind::Odometry;
  uint8_t robot_id = 0;
  uint32_t sequence = 0;
  std::vector<uint8_t> payload;

  size_t accounted_bytes() const { return payload.size(); }
  size_t framed_bytes() const { return payload.size() + kFrameHeaderBytes; }
};

struct OdometryMsg {
  Pose pose;
  uint32_t seq = 0;
};

// One entry per motion primitive: start x, y, z, yaw, then the commanded
// planar speed, vertical speed, and yaw rate.
struct TrajectoryMsg {
  std::vector<std::array<float, 7>> primitives;
};

using DecodedMessage =
    std::variant<KeyframePacket, ChangeSet, OctreeMap, OdometryMsg,
                 TrajectoryMsg>;

namespace wire {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
  put_u32(out, std::bit_cast<uint32_t>(v));
}

struct Reader {
  const uint8_t* data;
  size_t size;
  size_t pos = 0;

  void need(size_t n) const {
    SUBGMM_CHECK(pos + n <= size, Truncated, "payload too short");
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(data[pos]) | uint16_t(data[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(data[pos]) | uint32_t(data[pos + 1]) << 8 |
                 uint32_t(data[pos + 2]) << 16 | uint32_t(data[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  size_t remaining() const { return size - pos; }
};

// Intrinsic XYZ factorization: R = Rx(a) * Ry(b) * Rz(c).
inline Vec3 euler_from_rotation(const Mat3& R) {
  const double sb = std::clamp(R(0, 2), -1.0, 1.0);
  const double b = std::asin(sb);
  if (std::abs(sb) > 1.0 - 1e-12) {
    // Pitch at +-90 deg: only a+-c is determined; pin c to zero.
    return Vec3(std::atan2(R(2, 1), R(1, 1)), b, 0.0);
  }
  return Vec3(std::atan2(-R(1, 2), R(2, 2)), b, std::atan2(-R(0, 1), R(0, 0)));
}

inline Mat3 rotation_from_euler(const Vec3& abc) {
  return rot_x(abc[0]) * rot_y(abc[1]) * rot_z(abc[2]);
}

inline void put_pose(std::vector<uint8_t>& out, const Pose& p) {
  for (int i = 0; i < 3; ++i) put_f32(out, float(p.translation[i]));
  const Vec3 abc = euler_from_rotation(p.rotation);
  for (int i = 0; i < 3; ++i) put_f32(out, float(abc[i]));
}

inline Pose get_pose(Reader& r) {
  Pose p;
  for (int i = 0; i < 3; ++i) p.translation[i] = double(r.f32());
  Vec3 abc;
  for (int i = 0; i < 3; ++i) abc[i] = double(r.f32());
  p.rotation = rotation_from_euler(abc);
  return p;
}

}  // namespace wire

// Payload layout: M components of 10 float32 (covariance upper triangle
// row-major, mean, weight), the sensor pose as 6 float32, support uint32.
inline WireMessage encode_gmm(const KeyframePacket& packet) {
  const size_t M = packet.mixture.components.size();
  SUBGMM_CHECK(M <= 65535, ComponentCountOverflow,
               "too many mixture components for the wire format");
  WireMessage msg;
  msg.kind = MsgKind::GmmKeyframe;
  msg.robot_id = packet.robot_id;
  msg.sequence = packet.sequence;
  msg.payload.reserve(40 * M + 28);
  for (const auto& c : packet.mixture.components) {
    wire::put_f32(msg.payload, float(c.cov(0, 0)));
    wire::put_f32(msg.payload, float(c.cov(0, 1)));
    wire::put_f32(msg.payload, float(c.cov(0, 2)));
    wire::put_f32(msg.payload, float(c.cov(1, 1)));
    wire::put_f32(msg.payload, float(c.cov(1, 2)));
    wire::put_f32(msg.payload, float(c.cov(2, 2)));
    for (int i = 0; i < 3; ++i) wire::put_f32(msg.payload, float(c.mean[i]));
    wire::put_f32(msg.payload, float(c.weight));
  }
  wire::put_pose(msg.payload, packet.sensor_pose);
  wire::put_u32(msg.payload, packet.mixture.support_size);
  return msg;
}

inline KeyframePacket decode_gmm(const WireMessage& msg) {
  SUBGMM_CHECK(msg.payload.size() >= 28, Truncated, "gmm payload too short");
  SUBGMM_CHECK((msg.payload.size() - 28) % 40 == 0, Truncated,
               "gmm payload not component aligned");
  const size_t M = (msg.payload.size() - 28) / 40;
  wire::Reader r{msg.payload.data(), msg.payload.size()};
  KeyframePacket packet;
  packet.robot_id = msg.robot_id;
  packet.sequence = msg.sequence;
  packet.mixture.components.resize(M);
  for (auto& c : packet.mixture.components) {
    const float sxx = r.f32(), sxy = r.f32(), sxz = r.f32();
    const float syy = r.f32(), syz = r.f32(), szz = r.f32();
    c.cov << sxx, sxy, sxz, sxy, syy, syz, sxz, syz, szz;
    for (int i = 0; i < 3; ++i) c.mean[i] = double(r.f32());
    c.weight = double(r.f32());
  }
  packet.sensor_pose = wire::get_pose(r);
  packet.mixture.support_size = r.u32();
  return packet;
}

// Payload layout: 3 uint32 dims, 3 float32 origin, then N pairs of
// (uint32 cell index, float32 logodds).
inline WireMessage encode_og(const ChangeSet& cs, uint8_t robot_id = 0,
                             uint32_t sequence = 0) {
  WireMessage msg;
  msg.kind = MsgKind::OgChangeSet;
  msg.robot_id = robot_id;
  msg.sequence = sequence;
  msg.payload.reserve(8 * cs.entries.size() + 24);
  for (int i = 0; i < 3; ++i) wire::put_u32(msg.payload, cs.dims[i]);
  for (int i = 0; i < 3; ++i) wire::put_f32(msg.payload, float(cs.origin[i]));
  for (const auto& [idx, v] : cs.entries) {
    wire::put_u32(msg.payload, idx);
    wire::put_f32(msg.payload, v);
  }
  return msg;
}

inline ChangeSet decode_og(const WireMessage& msg) {
  SUBGMM_CHECK(msg.payload.size() >= 24, Truncated, "og payload too short");
  SUBGMM_CHECK((msg.payload.size() - 24) % 8 == 0, Truncated,
               "og payload not entry aligned");
  wire::Reader r{msg.payload.data(), msg.payload.size()};
  ChangeSet cs;
  for (int i = 0; i < 3; ++i) cs.dims[i] = r.u32();
  for (int i = 0; i < 3; ++i) cs.origin[i] = double(r.f32());
  const size_t n = (msg.payload.size() - 24) / 8;
  cs.entries.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const uint32_t idx = r.u32();
    cs.entries.emplace_back(idx, r.f32());
  }
  return cs;
}

namespace wire {

inline void encode_octree_range(
    const std::vector<std::pair<uint64_t, float>>& leaves, size_t lo,
    size_t hi, int depth, int max_depth, std::vector<uint8_t>& out) {
  if (depth == max_depth) {
    if (lo < hi) put_f32(out, leaves[lo].second);
    return;
  }
  const int shift = 3 * (max_depth - 1 - depth);
  std::array<size_t, 9> split;
  split[0] = lo;
  size_t cursor = lo;
  for (int child = 0; child < 8; ++child) {
    while (cursor < hi &&
           int((leaves[cursor].first >> shift) & 7) == child) {
      ++cursor;
    }
    split[child + 1] = cursor;
  }
  uint8_t mask = 0;
  for (int child = 0; child < 8; ++child) {
    if (split[child + 1] > split[child]) mask |= uint8_t(1) << child;
  }
  out.push_back(mask);
  for (int child = 0; child < 8; ++child) {
    if (split[child + 1] > split[child]) {
      encode_octree_range(leaves, split[child], split[child + 1], depth + 1,
                          max_depth, out);
    }
  }
}

inline void decode_octree_range(Reader& r, uint64_t prefix, int depth,
                                int max_depth, OctreeMap& tree,
                                uint32_t& leaves_seen) {
  if (depth == max_depth) {
    const float v = r.f32();
    CellIndex c;
    // De-interleave the Morton path accumulated along the descent.
    auto compact = [](uint64_t v) {
      v &= 0x1249249249249249ULL;
      v = (v | v >> 2) & 0x10c30c30c30c30c3ULL;
      v = (v | v >> 4) & 0x100f00f00f00f00fULL;
      v = (v | v >> 8) & 0x1f0000ff0000ffULL;
      v = (v | v >> 16) & 0x1f00000000ffffULL;
      v = (v | v >> 32) & 0xfffffULL;
      return v;
    };
    c[0] = int(compact(prefix));
    c[1] = int(compact(prefix >> 1));
    c[2] = int(compact(prefix >> 2));
    tree.set_leaf(c, v);
    ++leaves_seen;
    return;
  }
  const uint8_t mask = r.u8();
  const int shift = 3 * (max_depth - 1 - depth);
  for (int child = 0; child < 8; ++child) {
    if (mask & (uint8_t(1) << child)) {
      decode_octree_range(r, prefix | (uint64_t(child) << shift), depth + 1,
                          max_depth, tree, leaves_seen);
    }
  }
}

}  // namespace wire

// Payload layout: float32 extent, 3 float32 origin, uint32 max depth,
// uint32 leaf count, then a depth-first structural stream of one child-mask
// byte per inner node and one float32 per max-depth leaf. No explicit
// coordinates appear; positions are implied by the tree structure.
inline WireMessage encode_octree(const OctreeMap& tree, uint8_t robot_id = 0,
                                 uint32_t sequence = 0) {
  WireMessage msg;
  msg.kind = MsgKind::OctreeUpdate;
  msg.robot_id = robot_id;
  msg.sequence = sequence;
  wire::put_f32(msg.payload, float(tree.extent()));
  for (int i = 0; i < 3; ++i) {
    wire::put_f32(msg.payload, float(tree.origin()[i]));
  }
  wire::put_u32(msg.payload, uint32_t(tree.max_depth()));
  wire::put_u32(msg.payload, uint32_t(tree.leaf_count()));
  const auto leaves = tree.sorted_leaves();
  wire::encode_octree_range(leaves, 0, leaves.size(), 0, tree.max_depth(),
                            msg.payload);
  return msg;
}

inline OctreeMap decode_octree(const WireMessage& msg) {
  wire::Reader r{msg.payload.data(), msg.payload.size()};
  const float extent = r.f32();
  Vec3 origin;
  for (int i = 0; i < 3; ++i) origin[i] = double(r.f32());
  const uint32_t max_depth = r.u32();
  const uint32_t leaf_count = r.u32();
  SUBGMM_CHECK(max_depth <= 20, Truncated, "octree depth out of range");
  const double resolution =
      double(extent) / double(uint64_t(1) << max_depth);
  OctreeMap tree(origin, resolution, int(max_depth));
  uint32_t seen = 0;
  if (max_depth == 0) {
    if (leaf_count > 0) {
      wire::decode_octree_range(r, 0, 0, 0, tree, seen);
    }
  } else {
    wire::decode_octree_range(r, 0, 0, int(max_depth), tree, seen);
  }
  SUBGMM_CHECK(seen == leaf_count, Truncated, "octree leaf count mismatch");
  SUBGMM_CHECK(r.remaining() == 0, Truncated, "trailing octree bytes");
  return tree;
}

inline WireMessage encode_odometry(const OdometryMsg& odo,
                                   uint8_t robot_id = 0,
                                   uint32_t sequence = 0) {
  WireMessage msg;
  msg.kind = MsgKind::Odometry;
  msg.robot_id = robot_id;
  msg.sequence = sequence;
  wire::put_pose(msg.payload, odo.pose);
  wire::put_u32(msg.payload, odo.seq);
  return msg;
}

inline OdometryMsg decode_odometry(const WireMessage& msg) {
  SUBGMM_CHECK(msg.payload.size() == 28, Truncated, "odometry payload size");
  wire::Reader r{msg.payload.data(), msg.payload.size()};
  OdometryMsg odo;
  odo.pose = wire::get_pose(r);
  odo.seq = r.u32();
  return odo;
}

inline WireMessage encode_trajectory(const TrajectoryMsg& traj,
                                     uint8_t robot_id = 0,
                                     uint32_t sequence = 0) {
  WireMessage msg;
  msg.kind = MsgKind::Trajectory;
  msg.robot_id = robot_id;
  msg.sequence = sequence;
  msg.payload.reserve(28 * traj.primitives.size());
  for (const auto& p : traj.primitives) {
    for (float v : p) wire::put_f32(msg.payload, v);
  }
  return msg;
}

inline TrajectoryMsg decode_trajectory(const WireMessage& msg) {
  SUBGMM_CHECK(msg.payload.size() % 28 == 0, Truncated,
               "trajectory payload not primitive aligned");
  wire::Reader r{msg.payload.data(), msg.payload.size()};
  TrajectoryMsg traj;
  traj.primitives.resize(msg.payload.size() / 28);
  for (auto& p : traj.primitives) {
    for (float& v : p) v = r.f32();
  }
  return traj;
}

inline std::vector<uint8_t> frame_bytes(const WireMessage& msg) {
  std::vector<uint8_t> out;
  out.reserve(msg.framed_bytes());
  wire::put_u32(out, kWireMagic);
  out.push_back(uint8_t(msg.kind));
  out.push_back(msg.robot_id);
  wire::put_u16(out, 0);
  wire::put_u32(out, msg.sequence);
  wire::put_u32(out, uint32_t(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  return out;
}

inline WireMessage parse_frame(const std::vector<uint8_t>& bytes) {
  wire::Reader r{bytes.data(), bytes.size()};
  SUBGMM_CHECK(bytes.size() >= kFrameHeaderBytes, Truncated,
               "frame shorter than header");
  SUBGMM_CHECK(r.u32() == kWireMagic, BadMagic, "bad frame magic");
  const uint8_t kind = r.u8();
  SUBGMM_CHECK(kind >= 1 && kind <= 5, BadKind, "unknown message kind");
  WireMessage msg;
  msg.kind = MsgKind(kind);
  msg.robot_id = r.u8();
  r.u16();
  msg.sequence = r.u32();
  const uint32_t len = r.u32();
  SUBGMM_CHECK(r.remaining() == len, Truncated,
               "frame length field disagrees with payload");
  msg.payload.assign(bytes.begin() + kFrameHeaderBytes, bytes.end());
  return msg;
}

inline DecodedMessage decode(const WireMessage& msg) {
  switch (msg.kind) {
    case MsgKind::GmmKeyframe:
      return decode_gmm(msg);
    case MsgKind::OgChangeSet:
      return decode_og(msg);
    case MsgKind::OctreeUpdate:
      return decode_octree(msg);
    case MsgKind::Odometry:
      return decode_odometry(msg);
    case MsgKind::Trajectory:
      return decode_trajectory(msg);
  }
  throw BadKind("unknown message kind");
}

}  // namespace subgmm
