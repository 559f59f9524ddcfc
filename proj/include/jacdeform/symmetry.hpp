#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "jacdeform/mesh.hpp"

namespace jacdeform {

// Plane { x : normal . x = offset } with unit normal.
struct ReflectionPlane {
  Vec3 normal = Vec3::UnitX();
  double offset = 0.0;

  static ReflectionPlane through(const Vec3& normal, const Vec3& point) {
    const Vec3 n = normal.normalized();
    return {n, n.dot(point)};
  }

  double signed_distance(const Vec3& p) const { return normal.dot(p) - offset; }
  Vec3 reflect(const Vec3& p) const { return p - 2.0 * signed_distance(p) * normal; }
  Vec3 project(const Vec3& p) const { return p - signed_distance(p) * normal; }
  // Linear part of the reflection.
  Mat3 linear() const { return Mat3::Identity() - 2.0 * normal * normal.transpose(); }
};

struct SymmetryMap {
  std::vector<std::pair<Index, Index>> pairs;  // each unordered pair stored once
  std::vector<Index> fixed;                    // vertices on the plane
  ReflectionPlane plane;

  // mirror[v] is v's counterpart; fixed vertices map to themselves.
  std::vector<Index> mirror_table(Index num_vertices) const {
    std::vector<Index> t(static_cast<std::size_t>(num_vertices), -1);
    for (auto [a, b] : pairs) {
      t[a] = b;
      t[b] = a;
    }
    for (Index v : fixed) t[v] = v;
    return t;
  }
};

// Pairs each vertex with the nearest vertex to its reflection. Vertices within
// `tolerance` of the plane are fixed. Throws when more than 5% stay unmatched.
inline SymmetryMap build_symmetry_map(const TriMesh& mesh, const ReflectionPlane& plane, double tolerance) {
  const Index n = mesh.num_vertices();
  SymmetryMap map;
  map.plane = plane;

  // Sort by the coordinate along the plane normal to prune candidate searches.
  std::vector<std::pair<double, Index>> order(static_cast<std::size_t>(n));
  for (Index v = 0; v < n; ++v) order[v] = {plane.signed_distance(mesh.vertex(v)), v};
  std::sort(order.begin(), order.end());

  std::vector<Index> nearest(static_cast<std::size_t>(n), -1);
  std::vector<double> nearest_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (Index v = 0; v < n; ++v) {
    const Vec3 r = plane.reflect(mesh.vertex(v));
    const double key = plane.signed_distance(r);
    auto lo = std::lower_bound(order.begin(), order.end(), std::make_pair(key - tolerance, Index{-1}));
    for (auto it = lo; it != order.end() && it->first <= key + tolerance; ++it) {
      const double d = (mesh.vertex(it->second) - r).norm();
      if (d < nearest_dist[v]) {
        nearest_dist[v] = d;
        nearest[v] = it->second;
      }
    }
  }

  std::vector<Index> unmatched;
  std::vector<char> done(static_cast<std::size_t>(n), 0);
  for (Index v = 0; v < n; ++v) {
    if (done[v]) continue;
    if (std::abs(plane.signed_distance(mesh.vertex(v))) <= tolerance) {
      map.fixed.push_back(v);
      done[v] = 1;
      continue;
    }
    const Index w = nearest[v];
    // Mutual nearest neighbours only, so the pairing is an involution.
    if (w >= 0 && w != v && nearest_dist[v] <= tolerance && nearest[w] == v && !done[w]) {
      map.pairs.emplace_back(std::min(v, w), std::max(v, w));
      done[v] = done[w] = 1;
    } else {
      unmatched.push_back(v);
    }
  }

  if (static_cast<double>(unmatched.size()) > 0.05 * n) {
    std::sort(unmatched.begin(), unmatched.end(), [&](Index a, Index b) { return nearest_dist[a] > nearest_dist[b]; });
    std::string msg = "symmetry mismatch: " + std::to_string(unmatched.size()) + " of " + std::to_string(n) +
                      " vertices have no mirror counterpart; worst:";
    for (std::size_t i = 0; i < std::min<std::size_t>(unmatched.size(), 5); ++i)
      msg += " " + std::to_string(unmatched[i]);
    throw MeshError(msg);
  }
  return map;
}

// Face correspondence induced by the vertex pairing; -1 when a mirrored face
// does not exist in the mesh.
inline std::vector<Index> face_mirror_table(const TriMesh& mesh, const SymmetryMap& map) {
  const auto vmirror = map.mirror_table(mesh.num_vertices());
  auto key = [](std::array<Index, 3> f) {
    std::sort(f.begin(), f.end());
    return f;
  };
  std::map<std::array<Index, 3>, Index> lookup;
  for (Index f = 0; f < mesh.num_faces(); ++f)
    lookup[key({mesh.faces(f, 0), mesh.faces(f, 1), mesh.faces(f, 2)})] = f;
  std::vector<Index> out(static_cast<std::size_t>(mesh.num_faces()), -1);
  for (Index f = 0; f < mesh.num_faces(); ++f) {
    std::array<Index, 3> m{};
    bool ok = true;
    for (int k = 0; k < 3; ++k) {
      m[k] = vmirror[mesh.faces(f, k)];
      ok = ok && m[k] >= 0;
    }
    if (!ok) continue;
    if (auto it = lookup.find(key(m)); it != lookup.end()) out[f] = it->second;
  }
  return out;
}

}  // namespace jacdeform
