#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <vector>

#include "jacdeform/mesh.hpp"
#include "jacdeform/sparse.hpp"

namespace jacdeform {

// Per-face gradient of piecewise-linear vertex functions. Row 3f+d holds the
// d-th world component of the gradient on face f.
struct FaceGradientOperator {
  SparseMatrix entries;        // 3m x n
  Eigen::VectorXd face_areas;  // m
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> face_normals;  // m x 3, unit

  Index num_faces() const { return static_cast<Index>(face_areas.size()); }

  // Face gradients of a per-vertex field with k channels; result is 3m x k.
  DenseMatrix apply(const DenseMatrix& per_vertex) const { return multiply(entries, per_vertex); }

  // Area weights repeated per gradient row (the diagonal mass matrix).
  Eigen::VectorXd mass_diagonal() const {
    Eigen::VectorXd d(3 * face_areas.size());
    for (Eigen::Index f = 0; f < face_areas.size(); ++f) d.segment<3>(3 * f).setConstant(face_areas[f]);
    return d;
  }
};

// grad phi = sum_k phi_k (n x e_k) / (2A), e_k the edge opposite corner k.
inline FaceGradientOperator build_gradient_operator(const TriMesh& mesh) {
  const Index m = mesh.num_faces();
  const double min_area = degenerate_area_threshold(mesh.vertices);
  FaceGradientOperator op;
  op.face_areas.resize(m);
  op.face_normals.resize(m, 3);
  std::vector<Triplet> t;
  t.reserve(static_cast<std::size_t>(9) * m);
  for (Index f = 0; f < m; ++f) {
    const Index idx[3] = {mesh.faces(f, 0), mesh.faces(f, 1), mesh.faces(f, 2)};
    const Vec3 p[3] = {mesh.vertex(idx[0]), mesh.vertex(idx[1]), mesh.vertex(idx[2])};
    const Vec3 cross = (p[1] - p[0]).cross(p[2] - p[0]);
    const double double_area = cross.norm();
    if (!(0.5 * double_area > min_area))
      throw MeshError("degenerate face " + std::to_string(f) + " while building gradient operator");
    const Vec3 n = cross / double_area;
    op.face_areas[f] = 0.5 * double_area;
    op.face_normals.row(f) = n.transpose();
    for (int k = 0; k < 3; ++k) {
      const Vec3 e = p[(k + 2) % 3] - p[(k + 1) % 3];
      const Vec3 g = n.cross(e) / double_area;
      for (int d = 0; d < 3; ++d) t.push_back({3 * f + d, idx[k], g[d]});
    }
  }
  op.entries = from_triplets(3 * static_cast<Eigen::Index>(m), mesh.num_vertices(), std::move(t));
  return op;
}

}  // namespace jacdeform
