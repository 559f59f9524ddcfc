#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/mesh.hpp"

namespace jacdeform {

// ---------------------------------------------------------------------------
// Orientation predicates: floating-point evaluation with a forward error bound,
// falling back to exact rational arithmetic when the sign is uncertain.

namespace predicates {

using Rational = boost::multiprecision::cpp_rational;

inline constexpr double kEpsilon = std::numeric_limits<double>::epsilon() / 2.0;  // 2^-53
inline constexpr double kOrient3dBound = (7.0 + 56.0 * kEpsilon) * kEpsilon;
inline constexpr double kOrient2dBound = (3.0 + 16.0 * kEpsilon) * kEpsilon;

inline int sign_of(const Rational& r) { return r.sign(); }

inline int orient3d_exact(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  Rational m[3][3];
  const Vec3* p[3] = {&a, &b, &c};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) m[i][k] = Rational((*p[i])[k]) - Rational(d[k]);
  const Rational det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) +
                       m[1][0] * (m[2][1] * m[0][2] - m[2][2] * m[0][1]) +
                       m[2][0] * (m[0][1] * m[1][2] - m[0][2] * m[1][1]);
  return sign_of(det);
}

// Sign of det[a-d; b-d; c-d].
inline int orient3d(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const Vec3 ad = a - d, bd = b - d, cd = c - d;
  const double bc = bd.y() * cd.z() - bd.z() * cd.y();
  const double ca = cd.y() * ad.z() - cd.z() * ad.y();
  const double ab = ad.y() * bd.z() - ad.z() * bd.y();
  const double det = ad.x() * bc + bd.x() * ca + cd.x() * ab;
  const double permanent = (std::abs(bd.y() * cd.z()) + std::abs(bd.z() * cd.y())) * std::abs(ad.x()) +
                           (std::abs(cd.y() * ad.z()) + std::abs(cd.z() * ad.y())) * std::abs(bd.x()) +
                           (std::abs(ad.y() * bd.z()) + std::abs(ad.z() * bd.y())) * std::abs(cd.x());
  const double bound = kOrient3dBound * permanent;
  if (det > bound) return 1;
  if (-det > bound) return -1;
  return orient3d_exact(a, b, c, d);
}

// Sign of det[a-c; b-c] on 2D points.
inline int orient2d(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c) {
  const double l = (a.x() - c.x()) * (b.y() - c.y());
  const double r = (a.y() - c.y()) * (b.x() - c.x());
  const double det = l - r;
  const double bound = kOrient2dBound * (std::abs(l) + std::abs(r));
  if (det > bound) return 1;
  if (-det > bound) return -1;
  const Rational e = (Rational(a.x()) - Rational(c.x())) * (Rational(b.y()) - Rational(c.y())) -
                     (Rational(a.y()) - Rational(c.y())) * (Rational(b.x()) - Rational(c.x()));
  return sign_of(e);
}

}  // namespace predicates

using Triangle3 = std::array<Vec3, 3>;

namespace detail {

using Vec2 = Eigen::Vector2d;

inline Vec2 drop_axis(const Vec3& p, int axis) {
  return axis == 0 ? Vec2(p.y(), p.z()) : axis == 1 ? Vec2(p.z(), p.x()) : Vec2(p.x(), p.y());
}

inline int dominant_axis(const Triangle3& t) {
  const Vec3 n = (t[1] - t[0]).cross(t[2] - t[0]);
  int axis = 0;
  for (int k = 1; k < 3; ++k)
    if (std::abs(n[k]) > std::abs(n[axis])) axis = k;
  return axis;
}

// c lies within the bounding box of segment ab (used once collinearity is known).
inline bool within_box(const Vec2& a, const Vec2& b, const Vec2& c) {
  return std::min(a.x(), b.x()) <= c.x() && c.x() <= std::max(a.x(), b.x()) && std::min(a.y(), b.y()) <= c.y() &&
         c.y() <= std::max(a.y(), b.y());
}

inline bool segments_intersect_2d(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  using predicates::orient2d;
  const int d1 = orient2d(a, b, c), d2 = orient2d(a, b, d), d3 = orient2d(c, d, a), d4 = orient2d(c, d, b);
  if (d1 * d2 < 0 && d3 * d4 < 0) return true;
  if (d1 == 0 && within_box(a, b, c)) return true;
  if (d2 == 0 && within_box(a, b, d)) return true;
  if (d3 == 0 && within_box(c, d, a)) return true;
  if (d4 == 0 && within_box(c, d, b)) return true;
  return false;
}

inline bool point_in_triangle_2d(const Vec2& p, const Vec2& t0, const Vec2& t1, const Vec2& t2) {
  using predicates::orient2d;
  const int s0 = orient2d(t0, t1, p), s1 = orient2d(t1, t2, p), s2 = orient2d(t2, t0, p);
  return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
}

inline bool segment_triangle_2d(const Vec2& p, const Vec2& q, const std::array<Vec2, 3>& t) {
  if (point_in_triangle_2d(p, t[0], t[1], t[2]) || point_in_triangle_2d(q, t[0], t[1], t[2])) return true;
  for (int k = 0; k < 3; ++k)
    if (segments_intersect_2d(p, q, t[k], t[(k + 1) % 3])) return true;
  return false;
}

inline bool coplanar_triangles_intersect(const Triangle3& a, const Triangle3& b) {
  const int axis = dominant_axis(a);
  std::array<Vec2, 3> pa, pb;
  for (int k = 0; k < 3; ++k) {
    pa[k] = drop_axis(a[k], axis);
    pb[k] = drop_axis(b[k], axis);
  }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (segments_intersect_2d(pa[i], pa[(i + 1) % 3], pb[j], pb[(j + 1) % 3])) return true;
  return point_in_triangle_2d(pa[0], pb[0], pb[1], pb[2]) || point_in_triangle_2d(pb[0], pa[0], pa[1], pa[2]);
}

// Closed segment pq against closed triangle t.
inline bool segment_triangle(const Vec3& p, const Vec3& q, const Triangle3& t) {
  using predicates::orient3d;
  const int o1 = orient3d(t[0], t[1], t[2], p), o2 = orient3d(t[0], t[1], t[2], q);
  if (o1 * o2 > 0) return false;
  if (o1 == 0 && o2 == 0) {
    const int axis = dominant_axis(t);
    return segment_triangle_2d(drop_axis(p, axis), drop_axis(q, axis),
                               {drop_axis(t[0], axis), drop_axis(t[1], axis), drop_axis(t[2], axis)});
  }
  // The line pq is not parallel to the plane; test it against the three edges.
  const int s0 = orient3d(p, q, t[0], t[1]), s1 = orient3d(p, q, t[1], t[2]), s2 = orient3d(p, q, t[2], t[0]);
  return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
}

inline bool is_degenerate(const Triangle3& t) {
  using predicates::orient2d;
  for (int axis = 0; axis < 3; ++axis)
    if (orient2d(drop_axis(t[0], axis), drop_axis(t[1], axis), drop_axis(t[2], axis)) != 0) return false;
  return true;
}

}  // namespace detail

// True iff the closed triangles share at least one point.
inline bool triangle_triangle_intersect(const Triangle3& a, const Triangle3& b) {
  if (detail::is_degenerate(a) || detail::is_degenerate(b))
    throw InvalidArgumentError("triangle_triangle_intersect: degenerate triangle");
  using predicates::orient3d;
  int ob[3], oa[3];
  for (int k = 0; k < 3; ++k) {
    ob[k] = orient3d(a[0], a[1], a[2], b[k]);
    oa[k] = orient3d(b[0], b[1], b[2], a[k]);
  }
  auto same_strict_side = [](const int s[3]) {
    return (s[0] > 0 && s[1] > 0 && s[2] > 0) || (s[0] < 0 && s[1] < 0 && s[2] < 0);
  };
  if (same_strict_side(ob) || same_strict_side(oa)) return false;
  if (ob[0] == 0 && ob[1] == 0 && ob[2] == 0) return detail::coplanar_triangles_intersect(a, b);
  // Non-coplanar: an intersection segment's endpoints lie on an edge of one triangle.
  for (int k = 0; k < 3; ++k)
    if (detail::segment_triangle(a[k], a[(k + 1) % 3], b) || detail::segment_triangle(b[k], b[(k + 1) % 3], a))
      return true;
  return false;
}

// ---------------------------------------------------------------------------
// BVH over face bounding boxes

class Bvh {
 public:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;  // children, -1 for leaves
    int begin = 0, end = 0;     // range into face_order() for leaves
    bool is_leaf() const { return left < 0; }
  };

  Bvh() = default;
  Bvh(const VertexMatrix& vertices, const FaceMatrix& faces, const std::vector<Index>& subset, int leaf_size = 4)
      : leaf_size_(leaf_size) {
    boxes_.resize(static_cast<std::size_t>(faces.rows()));
    centers_.resize(static_cast<std::size_t>(faces.rows()));
    for (Index f = 0; f < faces.rows(); ++f) {
      Eigen::AlignedBox3d b;
      for (int k = 0; k < 3; ++k) b.extend(vertices.row(faces(f, k)).transpose());
      boxes_[f] = b;
      centers_[f] = b.center();
    }
    order_ = subset;
    if (!order_.empty()) build(0, static_cast<int>(order_.size()));
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Index>& face_order() const { return order_; }
  const Eigen::AlignedBox3d& face_box(Index f) const { return boxes_[f]; }

  // Calls visit(f, g) for every face pair with overlapping boxes, f != g, once.
  template <typename Visit>
  void for_each_overlapping_pair(Visit&& visit) const {
    if (!nodes_.empty()) self_pairs(0, visit);
  }

 private:
  int build(int begin, int end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    Eigen::AlignedBox3d box, cbox;
    for (int i = begin; i < end; ++i) {
      box.extend(boxes_[order_[i]]);
      cbox.extend(centers_[order_[i]]);
    }
    nodes_[id].box = box;
    if (end - begin <= leaf_size_) {
      nodes_[id].begin = begin;
      nodes_[id].end = end;
      return id;
    }
    int axis;
    cbox.sizes().maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](Index a, Index b) {
      return centers_[a][axis] < centers_[b][axis] || (centers_[a][axis] == centers_[b][axis] && a < b);
    });
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  template <typename Visit>
  void self_pairs(int n, Visit& visit) const {
    const Node& node = nodes_[n];
    if (node.is_leaf()) {
      for (int i = node.begin; i < node.end; ++i)
        for (int j = i + 1; j < node.end; ++j)
          if (boxes_[order_[i]].intersects(boxes_[order_[j]])) visit(order_[i], order_[j]);
      return;
    }
    self_pairs(node.left, visit);
    self_pairs(node.right, visit);
    cross_pairs(node.left, node.right, visit);
  }

  template <typename Visit>
  void cross_pairs(int a, int b, Visit& visit) const {
    const Node& na = nodes_[a];
    const Node& nb = nodes_[b];
    if (!na.box.intersects(nb.box)) return;
    if (na.is_leaf() && nb.is_leaf()) {
      for (int i = na.begin; i < na.end; ++i)
        for (int j = nb.begin; j < nb.end; ++j)
          if (boxes_[order_[i]].intersects(boxes_[order_[j]])) visit(order_[i], order_[j]);
      return;
    }
    if (nb.is_leaf() || (!na.is_leaf() && na.box.volume() >= nb.box.volume())) {
      cross_pairs(na.left, b, visit);
      cross_pairs(na.right, b, visit);
    } else {
      cross_pairs(a, nb.left, visit);
      cross_pairs(a, nb.right, visit);
    }
  }

  int leaf_size_ = 4;
  std::vector<Eigen::AlignedBox3d> boxes_;
  std::vector<Vec3> centers_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Self-intersection

enum class IntersectionMode { Bvh, Brute };

struct SelfIntersection {
  double ratio = 0.0;  // distinct faces involved / m
  std::vector<std::pair<Index, Index>> pairs;  // sorted, first < second
  Index faces_involved = 0;
};

namespace detail {

inline Triangle3 face_triangle(const TriMesh& mesh, Index f) {
  return {mesh.vertex(mesh.faces(f, 0)), mesh.vertex(mesh.faces(f, 1)), mesh.vertex(mesh.faces(f, 2))};
}

inline bool share_vertex(const TriMesh& mesh, Index f, Index g) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (mesh.faces(f, i) == mesh.faces(g, j)) return true;
  return false;
}

}  // namespace detail

// Face pairs that intersect geometrically, excluding pairs that share a vertex
// or edge. Exactly degenerate faces are skipped.
inline SelfIntersection self_intersection_ratio(const TriMesh& mesh, IntersectionMode mode = IntersectionMode::Bvh) {
  const Index m = mesh.num_faces();
  std::vector<Triangle3> tris(static_cast<std::size_t>(m));
  std::vector<Index> valid;
  for (Index f = 0; f < m; ++f) {
    tris[f] = detail::face_triangle(mesh, f);
    if (!detail::is_degenerate(tris[f])) valid.push_back(f);
  }
  SelfIntersection out;
  auto test = [&](Index f, Index g) {
    if (detail::share_vertex(mesh, f, g)) return;
    if (triangle_triangle_intersect(tris[f], tris[g])) out.pairs.emplace_back(std::min(f, g), std::max(f, g));
  };
  if (mode == IntersectionMode::Brute) {
    for (std::size_t i = 0; i < valid.size(); ++i)
      for (std::size_t j = i + 1; j < valid.size(); ++j) test(valid[i], valid[j]);
  } else {
    Bvh bvh(mesh.vertices, mesh.faces, valid);
    bvh.for_each_overlapping_pair(test);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  std::vector<char> involved(static_cast<std::size_t>(m), 0);
  for (auto [f, g] : out.pairs) involved[f] = involved[g] = 1;
  out.faces_involved = static_cast<Index>(std::count(involved.begin(), involved.end(), 1));
  out.ratio = m > 0 ? static_cast<double>(out.faces_involved) / m : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Quality report

struct QualityReport {
  std::string mesh_name;
  std::string mode = "bvh";
  Index num_faces = 0;
  double self_intersection_ratio = 0.0;
  Index intersecting_pairs = 0;
  Index intersecting_faces = 0;
  double min_angle_deg = 0.0;
  double max_aspect_ratio = 0.0;
  Index degenerate_faces = 0;
};

inline QualityReport quality_report(const TriMesh& mesh, IntersectionMode mode = IntersectionMode::Bvh) {
  QualityReport r;
  r.mesh_name = mesh.name;
  r.mode = mode == IntersectionMode::Bvh ? "bvh" : "brute";
  r.num_faces = mesh.num_faces();
  const auto si = self_intersection_ratio(mesh, mode);
  r.self_intersection_ratio = si.ratio;
  r.intersecting_pairs = static_cast<Index>(si.pairs.size());
  r.intersecting_faces = si.faces_involved;
  const double min_area = degenerate_area_threshold(mesh.vertices);
  double min_angle = 180.0, max_aspect = 0.0;
  for (Index f = 0; f < mesh.num_faces(); ++f) {
    const auto t = detail::face_triangle(mesh, f);
    const double area = 0.5 * (t[1] - t[0]).cross(t[2] - t[0]).norm();
    if (!(area > min_area)) {
      ++r.degenerate_faces;
      continue;
    }
    double longest = 0.0;
    for (int k = 0; k < 3; ++k) {
      const Vec3 u = t[(k + 1) % 3] - t[k], v = t[(k + 2) % 3] - t[k];
      const double angle = std::atan2(u.cross(v).norm(), u.dot(v)) * 180.0 / std::numbers::pi;
      min_angle = std::min(min_angle, angle);
      longest = std::max(longest, u.norm());
    }
    // Shortest altitude is the one onto the longest edge.
    const double shortest_altitude = 2.0 * area / longest;
    max_aspect = std::max(max_aspect, longest / shortest_altitude);
  }
  r.min_angle_deg = min_angle;
  r.max_aspect_ratio = max_aspect;
  return r;
}

inline nlohmann::json to_json(const QualityReport& r) {
  return {{"mesh", r.mesh_name},
          {"mode", r.mode},
          {"num_faces", r.num_faces},
          {"self_intersection_ratio", r.self_intersection_ratio},
          {"intersecting_pairs", r.intersecting_pairs},
          {"intersecting_faces", r.intersecting_faces},
          {"min_angle_deg", r.min_angle_deg},
          {"max_aspect_ratio", r.max_aspect_ratio},
          {"degenerate_faces", r.degenerate_faces}};
}

}  // namespace jacdeform
