#pragma once

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/gradient_operator.hpp"
#include "jacdeform/mesh.hpp"
#include "jacdeform/sparse.hpp"

namespace jacdeform {

// Per-face Jacobians J_i and scalar weights w_i. The Poisson target on face i
// is w_i * J_i, where J_i maps world-space tangent directions to world space.
struct JacobianField {
  std::vector<Mat3> jacobians;
  std::vector<double> weights;

  Index size() const { return static_cast<Index>(weights.size()); }

  bool all_finite() const {
    for (const auto& j : jacobians)
      if (!j.allFinite()) return false;
    for (double w : weights)
      if (!std::isfinite(w)) return false;
    return true;
  }

  friend bool operator==(const JacobianField& a, const JacobianField& b) {
    return a.jacobians == b.jacobians && a.weights == b.weights;
  }
};

// d(loss)/d(J_i) and d(loss)/d(w_i).
struct FieldGradient {
  std::vector<Mat3> d_jacobians;
  std::vector<double> d_weights;

  Index size() const { return static_cast<Index>(d_weights.size()); }

  static FieldGradient zeros(Index m) {
    return {std::vector<Mat3>(static_cast<std::size_t>(m), Mat3::Zero()),
            std::vector<double>(static_cast<std::size_t>(m), 0.0)};
  }
};

inline JacobianField identity_field(Index num_faces) {
  return {std::vector<Mat3>(static_cast<std::size_t>(num_faces), Mat3::Identity()),
          std::vector<double>(static_cast<std::size_t>(num_faces), 1.0)};
}

inline JacobianField identity_field(const TriMesh& mesh) { return identity_field(mesh.num_faces()); }

inline JacobianField constant_field(Index num_faces, const Mat3& jacobian, double weight = 1.0) {
  return {std::vector<Mat3>(static_cast<std::size_t>(num_faces), jacobian),
          std::vector<double>(static_cast<std::size_t>(num_faces), weight)};
}

inline JacobianField interpolate(const JacobianField& a, const JacobianField& b, double t) {
  if (a.size() != b.size())
    throw InvalidArgumentError("interpolate: field lengths " + std::to_string(a.size()) + " and " +
                               std::to_string(b.size()) + " differ");
  JacobianField out = a;
  for (Index i = 0; i < a.size(); ++i) {
    out.jacobians[i] = (1.0 - t) * a.jacobians[i] + t * b.jacobians[i];
    out.weights[i] = (1.0 - t) * a.weights[i] + t * b.weights[i];
  }
  return out;
}

// Faces with mask[i] == false take base's (J, w).
inline JacobianField apply_mask(const JacobianField& field, const JacobianField& base, const std::vector<bool>& mask) {
  if (field.size() != base.size() || static_cast<Index>(mask.size()) != field.size())
    throw InvalidArgumentError("apply_mask: field, base and mask lengths differ");
  JacobianField out = field;
  for (Index i = 0; i < field.size(); ++i)
    if (!mask[i]) {
      out.jacobians[i] = base.jacobians[i];
      out.weights[i] = base.weights[i];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Poisson system

// Translation gauge. The anchor vertex is removed from the linear system; after
// the solve the centroid of `gauge_vertices` (all vertices when empty) is moved
// back to its source position.
struct Pinning {
  Index anchor_vertex = 0;
  std::vector<Index> gauge_vertices;
};

inline int count_components(const TriMesh& mesh) {
  const Index n = mesh.num_vertices();
  std::vector<Index> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](Index v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (Index f = 0; f < mesh.num_faces(); ++f)
    for (int k = 1; k < 3; ++k) {
      const Index a = find(mesh.faces(f, 0)), b = find(mesh.faces(f, k));
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  int count = 0;
  for (Index v = 0; v < n; ++v) count += find(v) == v;
  return count;
}

struct PoissonSystem {
  FaceGradientOperator gradient;  // G, 3m x n
  Eigen::VectorXd mass;           // M, 3m (face areas repeated)
  SparseMatrix gradient_t_mass;   // G^T M, n x 3m
  SparseMatrix laplacian;         // G^T M G, unpinned
  SparseMatrix pinned_laplacian;  // anchor row/column removed
  SpdFactor factor;
  Pinning pinning;
  Vec3 source_centroid = Vec3::Zero();  // centroid of the gauge vertices
  Index num_vertices = 0;

  Index num_faces() const { return gradient.num_faces(); }
};

inline Vec3 gauge_centroid(const VertexMatrix& v, const std::vector<Index>& gauge) {
  if (gauge.empty()) return centroid(v);
  Vec3 c = Vec3::Zero();
  for (Index i : gauge) c += v.row(i).transpose();
  return c / static_cast<double>(gauge.size());
}

inline PoissonSystem assemble(const TriMesh& mesh, const Pinning& pinning = {}, const SolverOptions& solver = {}) {
  const Index n = mesh.num_vertices();
  if (pinning.anchor_vertex < 0 || pinning.anchor_vertex >= n)
    throw InvalidArgumentError("anchor vertex " + std::to_string(pinning.anchor_vertex) + " out of range");
  for (Index g : pinning.gauge_vertices)
    if (g < 0 || g >= n) throw InvalidArgumentError("gauge vertex " + std::to_string(g) + " out of range");
  const int components = count_components(mesh);
  if (components > 1)
    throw NumericalError("Poisson system is not SPD: mesh has " + std::to_string(components) +
                         " connected components but a single pin");

  PoissonSystem sys;
  sys.num_vertices = n;
  sys.pinning = pinning;
  sys.gradient = build_gradient_operator(mesh);
  sys.mass = sys.gradient.mass_diagonal();
  sys.gradient_t_mass = sys.gradient.entries.scale_rows(sys.mass).transpose();
  sys.laplacian = multiply(sys.gradient_t_mass, sys.gradient.entries);
  sys.pinned_laplacian = sys.laplacian.remove_row_col(pinning.anchor_vertex);
  sys.factor = cholesky(sys.pinned_laplacian, solver);
  sys.source_centroid = gauge_centroid(mesh.vertices, pinning.gauge_vertices);
  return sys;
}

// Stacked targets T (3m x 3); block i is (w_i J_i)^T so that column c holds the
// target gradient of output coordinate c.
inline DenseMatrix stacked_targets(const JacobianField& field) {
  DenseMatrix t(3 * static_cast<Eigen::Index>(field.size()), 3);
  for (Index i = 0; i < field.size(); ++i)
    t.block<3, 3>(3 * static_cast<Eigen::Index>(i), 0) = field.weights[i] * field.jacobians[i].transpose();
  return t;
}

namespace detail {

inline DenseMatrix drop_row(const DenseMatrix& a, Eigen::Index r) {
  DenseMatrix out(a.rows() - 1, a.cols());
  out.topRows(r) = a.topRows(r);
  out.bottomRows(a.rows() - r - 1) = a.bottomRows(a.rows() - r - 1);
  return out;
}

inline DenseMatrix insert_zero_row(const DenseMatrix& a, Eigen::Index r) {
  DenseMatrix out(a.rows() + 1, a.cols());
  out.topRows(r) = a.topRows(r);
  out.row(r).setZero();
  out.bottomRows(a.rows() - r) = a.bottomRows(a.rows() - r);
  return out;
}

}  // namespace detail

// Minimizes sum_i |f_i| ||grad_i(V) - T_i||^2 for stacked targets T, then
// restores the gauge centroid.
inline VertexMatrix solve_targets(const PoissonSystem& sys, const DenseMatrix& targets) {
  if (targets.rows() != 3 * static_cast<Eigen::Index>(sys.num_faces()) || targets.cols() != 3)
    throw InvalidArgumentError("target stack has shape " + std::to_string(targets.rows()) + "x" +
                               std::to_string(targets.cols()) + ", expected " +
                               std::to_string(3 * sys.num_faces()) + "x3");
  if (!targets.allFinite()) throw NumericalError("non-finite Poisson target");
  const DenseMatrix rhs = multiply(sys.gradient_t_mass, targets);
  const Eigen::Index anchor = sys.pinning.anchor_vertex;
  const DenseMatrix reduced = sys.factor.solve(detail::drop_row(rhs, anchor));
  VertexMatrix v = detail::insert_zero_row(reduced, anchor);
  const Vec3 shift = sys.source_centroid - gauge_centroid(v, sys.pinning.gauge_vertices);
  v.rowwise() += shift.transpose();
  return v;
}

inline VertexMatrix forward_solve(const PoissonSystem& sys, const JacobianField& field) {
  if (field.size() != sys.num_faces())
    throw InvalidArgumentError("field has " + std::to_string(field.size()) + " faces, mesh has " +
                               std::to_string(sys.num_faces()));
  if (!field.all_finite()) throw NumericalError("non-finite Jacobian field");
  return solve_targets(sys, stacked_targets(field));
}

// Adjoint of solve_targets: gradient of the loss with respect to the stacked
// targets given its gradient with respect to the solved vertices.
inline DenseMatrix backward_targets(const PoissonSystem& sys, const DenseMatrix& d_vertices) {
  if (d_vertices.rows() != sys.num_vertices || d_vertices.cols() != 3)
    throw InvalidArgumentError("vertex gradient has shape " + std::to_string(d_vertices.rows()) + "x" +
                               std::to_string(d_vertices.cols()) + ", expected " +
                               std::to_string(sys.num_vertices) + "x3");
  // Centroid restoration subtracts the gauge mean from every vertex.
  DenseMatrix g = d_vertices;
  const Eigen::RowVector3d total = d_vertices.colwise().sum();
  const auto& gauge = sys.pinning.gauge_vertices;
  if (gauge.empty()) {
    g.rowwise() -= total / static_cast<double>(sys.num_vertices);
  } else {
    const Eigen::RowVector3d share = total / static_cast<double>(gauge.size());
    for (Index i : gauge) g.row(i) -= share;
  }
  const Eigen::Index anchor = sys.pinning.anchor_vertex;
  const DenseMatrix u = detail::insert_zero_row(sys.factor.solve(detail::drop_row(g, anchor)), anchor);
  DenseMatrix d_targets = sys.gradient.apply(u);
  for (Eigen::Index r = 0; r < d_targets.rows(); ++r) d_targets.row(r) *= sys.mass[r];
  return d_targets;
}

inline FieldGradient backward(const PoissonSystem& sys, const JacobianField& field, const DenseMatrix& d_vertices) {
  if (field.size() != sys.num_faces())
    throw InvalidArgumentError("field has " + std::to_string(field.size()) + " faces, mesh has " +
                               std::to_string(sys.num_faces()));
  const DenseMatrix d_targets = backward_targets(sys, d_vertices);
  FieldGradient out = FieldGradient::zeros(field.size());
  for (Index i = 0; i < field.size(); ++i) {
    // T_i = w_i J_i^T, so dL/dJ_i = w_i (dL/dT_i)^T and dL/dw_i = <J_i, (dL/dT_i)^T>.
    const Mat3 block = d_targets.block<3, 3>(3 * static_cast<Eigen::Index>(i), 0).transpose();
    out.d_jacobians[i] = field.weights[i] * block;
    out.d_weights[i] = field.jacobians[i].cwiseProduct(block).sum();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Field files: "JFLD", u32 version, u64 face count, 9m doubles (row-major
// Jacobians), m doubles (weights). Little-endian.

static_assert(std::endian::native == std::endian::little, "field files assume a little-endian host");

inline constexpr std::uint32_t kFieldFileVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated " + what);
  return v;
}

}  // namespace detail

inline void write_field(std::ostream& out, const JacobianField& field) {
  out.write("JFLD", 4);
  detail::write_pod(out, kFieldFileVersion);
  detail::write_pod(out, static_cast<std::uint64_t>(field.size()));
  for (const Mat3& j : field.jacobians)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) detail::write_pod(out, j(r, c));
  for (double w : field.weights) detail::write_pod(out, w);
}

inline JacobianField read_field(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "JFLD", 4) != 0) throw IoError("not a Jacobian field file");
  const auto version = detail::read_pod<std::uint32_t>(in, "field header");
  if (version != kFieldFileVersion)
    throw IoError("unsupported field file version " + std::to_string(version));
  const auto m = detail::read_pod<std::uint64_t>(in, "field header");
  if (m > (1ull << 31)) throw IoError("implausible face count in field file");
  JacobianField field = identity_field(static_cast<Index>(m));
  for (auto& j : field.jacobians)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) j(r, c) = detail::read_pod<double>(in, "field payload");
  for (auto& w : field.weights) w = detail::read_pod<double>(in, "field payload");
  return field;
}

inline void save_field(const JacobianField& field, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_field(out, field);
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline JacobianField load_field(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open field file '" + path + "'");
  return read_field(in);
}

}  // namespace jacdeform
