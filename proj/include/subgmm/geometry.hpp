#pragma once

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "subgmm/common.hpp"

namespace subgmm {

// ---------------------------------------------------------------------------
// Rigid-body pose: p_world = rotation * p_body + translation.
// ---------------------------------------------------------------------------

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  // R must be orthonormal with det +1 for the pose to be valid.
  bool is_valid(double tol = 1e-9) const {
    const Mat3 err = rotation * rotation.transpose() - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() < tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

// Applies b, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline Pose invert(const Pose& p) {
  Pose out;
  out.rotation = p.rotation.transpose();
  out.translation = -(out.rotation * p.translation);
  return out;
}

inline Mat3 rot_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

inline Mat3 rot_y(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
}

inline Mat3 rot_x(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitX()).toRotationMatrix();
}

// ---------------------------------------------------------------------------
// Sensor frustum: a rectangular pyramid with its apex at the sensor origin.
// The boresight is the +x axis of the sensor frame; hfov spreads in y and
// vfov in z. Angles are the full field of view (not half-angles).
// ---------------------------------------------------------------------------

struct Frustum {
  Vec3 apex = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();
  double hfov = 1.0;       // radians, full horizontal field of view
  double vfov = 1.0;       // radians, full vertical field of view
  double max_range = 1.0;  // meters

  bool is_valid() const {
    return hfov > 0.0 && hfov < M_PI && vfov > 0.0 && vfov < M_PI &&
           max_range > 0.0;
  }

  // Apex plus the four far-plane corners, in world coordinates.
  std::array<Vec3, 5> corners() const {
    const double ty = std::tan(0.5 * hfov) * max_range;
    const double tz = std::tan(0.5 * vfov) * max_range;
    std::array<Vec3, 5> out;
    out[0] = apex;
    out[1] = apex + orientation * Vec3(max_range, ty, tz);
    out[2] = apex + orientation * Vec3(max_range, -ty, tz);
    out[3] = apex + orientation * Vec3(max_range, -ty, -tz);
    out[4] = apex + orientation * Vec3(max_range, ty, -tz);
    return out;
  }

  bool contains(const Vec3& p) const {
    const Vec3 q = orientation.transpose() * (p - apex);
    if (q.x() < 0.0 || q.x() > max_range) return false;
    const double ty = std::tan(0.5 * hfov);
    const double tz = std::tan(0.5 * vfov);
    return std::abs(q.y()) <= q.x() * ty && std::abs(q.z()) <= q.x() * tz;
  }
};

inline double frustum_volume(const Frustum& f) {
  return (4.0 / 3.0) * f.max_range * f.max_range * f.max_range *
         std::tan(0.5 * f.hfov) * std::tan(0.5 * f.vfov);
}

namespace detail {

// Halfspace n·p <= d with unit normal n.
struct Halfspace {
  Vec3 normal;
  double offset;

  double signed_distance(const Vec3& p) const { return normal.dot(p) - offset; }
};

// The five bounding halfspaces of a frustum: four side planes through the
// apex and the far plane.
inline std::array<Halfspace, 5> frustum_halfspaces(const Frustum& f) {
  const double ty = std::tan(0.5 * f.hfov);
  const double tz = std::tan(0.5 * f.vfov);
  // Sensor-frame constraints: |y| <= ty*x, |z| <= tz*x, x <= max_range.
  // (The four side planes already force x >= 0.)
  std::array<Halfspace, 5> hs;
  const std::array<Vec3, 5> local_normals = {
      Vec3(-ty, 1.0, 0.0),   // y - ty*x <= 0
      Vec3(-ty, -1.0, 0.0),  // -y - ty*x <= 0
      Vec3(-tz, 0.0, 1.0),   // z - tz*x <= 0
      Vec3(-tz, 0.0, -1.0),  // -z - tz*x <= 0
      Vec3(1.0, 0.0, 0.0),   // x <= max_range
  };
  const std::array<double, 5> local_offsets = {0.0, 0.0, 0.0, 0.0,
                                               f.max_range};
  for (int i = 0; i < 5; ++i) {
    const Vec3 n_world = f.orientation * local_normals[i].normalized();
    const double c = local_offsets[i] / local_normals[i].norm();
    hs[i].normal = n_world;
    hs[i].offset = c + n_world.dot(f.apex);
  }
  return hs;
}

// Clips a convex planar polygon against n·p <= d. Vertices on the plane
// (within eps) are kept, so clipping by a polygon's own support plane is a
// no-op.
inline void clip_polygon(std::vector<Vec3>& poly, const Halfspace& h,
                         double eps) {
  if (poly.empty()) return;
  std::vector<Vec3> out;
  out.reserve(poly.size() + 2);
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % n];
    const double da = h.signed_distance(a);
    const double db = h.signed_distance(b);
    const bool ina = da <= eps;
    const bool inb = db <= eps;
    if (ina) out.push_back(a);
    if (ina != inb) {
      const double t = da / (da - db);
      out.push_back(a + t * (b - a));
    }
  }
  poly = std::move(out);
}

// Builds a large seed square on the support plane of h, oriented CCW about
// the outward normal, big enough to contain any feasible face.
inline std::vector<Vec3> seed_face(const Halfspace& h, const Vec3& anchor,
                                   double half_size) {
  // Point on the plane closest to the anchor.
  const Vec3 c = anchor - h.signed_distance(anchor) * h.normal;
  Vec3 u = h.normal.unitOrthogonal();
  Vec3 v = h.normal.cross(u);
  u *= half_size;
  v *= half_size;
  // CCW about +normal.
  return {c - u - v, c + u - v, c + u + v, c - u + v};
}

// Volume of the convex polytope given by halfspaces, via the divergence
// theorem: V = (1/3) * sum over faces of offset * area.
inline double polytope_volume(std::vector<Halfspace> hs, const Vec3& anchor,
                              double scale) {
  // Deduplicate coincident planes so shared faces are not double counted.
  std::vector<Halfspace> planes;
  for (const auto& h : hs) {
    bool dup = false;
    for (const auto& p : planes) {
      if (h.normal.dot(p.normal) > 1.0 - 1e-12 &&
          std::abs(h.offset - p.offset) < 1e-9 * std::max(1.0, scale)) {
        dup = true;
        break;
      }
    }
    if (!dup) planes.push_back(h);
  }

  const double eps = 1e-9 * std::max(1.0, scale);
  double volume = 0.0;
  for (size_t i = 0; i < planes.size(); ++i) {
    std::vector<Vec3> face = seed_face(planes[i], anchor, 8.0 * scale);
    for (size_t j = 0; j < planes.size() && !face.empty(); ++j) {
      if (j == i) continue;
      clip_polygon(face, planes[j], eps);
    }
    if (face.size() < 3) continue;
    // Signed area about the outward normal.
    Vec3 cross_sum = Vec3::Zero();
    for (size_t k = 0; k < face.size(); ++k) {
      cross_sum += face[k].cross(face[(k + 1) % face.size()]);
    }
    const double area = 0.5 * planes[i].normal.dot(cross_sum);
    volume += planes[i].offset * std::max(area, 0.0);
  }
  return std::max(volume / 3.0, 0.0);
}

}  // namespace detail

// Exact intersection volume of two frustums, computed by clipping each
// bounding plane's face polygon against the combined halfspace set and
// applying the divergence theorem. Disjoint frustums yield zero.
inline double frustum_overlap_volume(const Frustum& a, const Frustum& b) {
  const auto ha = detail::frustum_halfspaces(a);
  const auto hb = detail::frustum_halfspaces(b);
  std::vector<detail::Halfspace> hs(ha.begin(), ha.end());
  hs.insert(hs.end(), hb.begin(), hb.end());

  const double scale =
      a.max_range + b.max_range + (a.apex - b.apex).norm();
  const Vec3 anchor = 0.5 * (a.apex + b.apex);
  return detail::polytope_volume(std::move(hs), anchor, scale);
}

}  // namespace subgmm
