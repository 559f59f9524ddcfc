#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

#include "jacdeform/mesh.hpp"

namespace jacdeform {

// Unit icosphere with counterclockwise (outward) winding. Level k has
// 10 * 4^k + 2 vertices and 20 * 4^k faces.
inline TriMesh make_icosphere(int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<Index, 3>> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                         {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                         {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                         {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<Index, Index>, Index> midpoints;
    auto midpoint = [&](Index a, Index b) {
      const auto key = std::minmax(a, b);
      if (auto it = midpoints.find(key); it != midpoints.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const Index id = static_cast<Index>(v.size() - 1);
      midpoints.emplace(key, id);
      return id;
    };
    std::vector<std::array<Index, 3>> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const Index a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  TriMesh mesh;
  mesh.name = "icosphere" + std::to_string(subdivisions);
  mesh.vertices.resize(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) mesh.vertices.row(i) = v[i].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) mesh.faces.row(i) << f[i][0], f[i][1], f[i][2];
  return mesh;
}

// Per-vertex spherical (longitude, latitude) texture coordinates.
inline void add_spherical_uvs(TriMesh& mesh) {
  const Vec3 c = centroid(mesh.vertices);
  mesh.uvs.resize(mesh.num_vertices(), 2);
  for (Index i = 0; i < mesh.num_vertices(); ++i) {
    const Vec3 d = (mesh.vertex(i) - c).normalized();
    mesh.uvs(i, 0) = 0.5 + std::atan2(d.x(), d.z()) / (2.0 * std::numbers::pi);
    mesh.uvs(i, 1) = 0.5 + std::asin(std::clamp(d.y(), -1.0, 1.0)) / std::numbers::pi;
  }
  mesh.uv_faces = mesh.faces;
}

inline TriMesh make_ellipsoid(int subdivisions, const Vec3& radii) {
  TriMesh mesh = make_icosphere(subdivisions);
  for (Index i = 0; i < mesh.num_vertices(); ++i)
    mesh.vertices.row(i) = mesh.vertices.row(i).cwiseProduct(radii.transpose());
  mesh.name = "ellipsoid" + std::to_string(subdivisions);
  return mesh;
}

// Axis-aligned cube [-h, h]^3, 8 vertices, 12 outward-facing triangles.
inline TriMesh make_cube(double half = 1.0) {
  TriMesh mesh;
  mesh.name = "cube";
  mesh.vertices.resize(8, 3);
  for (int i = 0; i < 8; ++i)
    mesh.vertices.row(i) << ((i & 1) ? half : -half), ((i & 2) ? half : -half), ((i & 4) ? half : -half);
  mesh.faces.resize(12, 3);
  mesh.faces << 0, 2, 3, 0, 3, 1,  // z-
      4, 5, 7, 4, 7, 6,            // z+
      0, 1, 5, 0, 5, 4,            // y-
      2, 6, 7, 2, 7, 3,            // y+
      0, 4, 6, 0, 6, 2,            // x-
      1, 3, 7, 1, 7, 5;            // x+
  return mesh;
}

// Regular grid in the z=0 plane with (nx+1)(ny+1) vertices, two triangles per cell.
inline TriMesh make_grid(int nx, int ny, double size_x = 1.0, double size_y = 1.0) {
  TriMesh mesh;
  mesh.name = "grid";
  mesh.vertices.resize((nx + 1) * (ny + 1), 3);
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i)
      mesh.vertices.row(j * (nx + 1) + i) << size_x * i / nx, size_y * j / ny, 0.0;
  mesh.faces.resize(2 * nx * ny, 3);
  int f = 0;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const Index a = j * (nx + 1) + i, b = a + 1, c = a + nx + 1, d = c + 1;
      mesh.faces.row(f++) << a, b, d;
      mesh.faces.row(f++) << a, d, c;
    }
  return mesh;
}

inline TriMesh make_triangle(const Vec3& a = Vec3(0, 0, 0), const Vec3& b = Vec3(1, 0, 0),
                             const Vec3& c = Vec3(0, 1, 0)) {
  TriMesh mesh;
  mesh.name = "triangle";
  mesh.vertices.resize(3, 3);
  mesh.vertices << a.transpose(), b.transpose(), c.transpose();
  mesh.faces.resize(1, 3);
  mesh.faces << 0, 1, 2;
  return mesh;
}

// Random radial perturbation of every vertex; `amplitude` relative to the radius.
inline TriMesh crumple(const TriMesh& mesh, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Top 53 bits of the engine, so the result does not depend on the library's
  // distribution implementation.
  auto u = [&] { return amplitude * (2.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53 - 1.0); };
  TriMesh out = mesh;
  out.name = mesh.name + "_crumpled";
  for (Index i = 0; i < out.num_vertices(); ++i)
    for (int d = 0; d < 3; ++d) out.vertices(i, d) += u();
  return out;
}

// Labels vertices within `angle` radians of `axis` (seen from the centroid)
// with `label`, others with 0.
inline std::vector<int> cap_region_labels(const TriMesh& mesh, const Vec3& axis, double angle, int label) {
  const Vec3 c = centroid(mesh.vertices);
  const Vec3 a = axis.normalized();
  std::vector<int> labels(static_cast<std::size_t>(mesh.num_vertices()), 0);
  for (Index i = 0; i < mesh.num_vertices(); ++i) {
    const Vec3 d = (mesh.vertex(i) - c).normalized();
    if (std::acos(std::clamp(d.dot(a), -1.0, 1.0)) <= angle) labels[i] = label;
  }
  return labels;
}

}  // namespace jacdeform
