#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "jacdeform/errors.hpp"

namespace jacdeform {

using Index = int;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VertexMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using FaceMatrix = Eigen::Matrix<Index, Eigen::Dynamic, 3, Eigen::RowMajor>;
using UvMatrix = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

// Indexed triangle mesh. Connectivity, UVs, landmark indices and region labels
// are carried through every deformation untouched; only vertex positions change.
struct TriMesh {
  VertexMatrix vertices;   // n x 3
  FaceMatrix faces;        // m x 3, counterclockwise
  UvMatrix uvs;            // k x 2 texture coordinate table (empty when absent)
  FaceMatrix uv_faces;     // m x 3 indices into `uvs` (empty when absent)
  std::vector<Index> landmarks;
  std::vector<int> region_labels;  // one per vertex, or empty
  std::string name;

  Index num_vertices() const { return static_cast<Index>(vertices.rows()); }
  Index num_faces() const { return static_cast<Index>(faces.rows()); }
  bool has_uvs() const { return uv_faces.rows() > 0; }

  Vec3 vertex(Index v) const { return vertices.row(v).transpose(); }
  Eigen::Vector2d corner_uv(Index f, int corner) const {
    return uvs.row(uv_faces(f, corner)).transpose();
  }
};

inline double bounding_box_diagonal(const VertexMatrix& v) {
  if (v.rows() == 0) return 0.0;
  return (v.colwise().maxCoeff() - v.colwise().minCoeff()).norm();
}

inline Vec3 centroid(const VertexMatrix& v) { return v.colwise().mean().transpose(); }

inline double face_area(const TriMesh& mesh, Index f) {
  const Vec3 a = mesh.vertex(mesh.faces(f, 0));
  const Vec3 b = mesh.vertex(mesh.faces(f, 1));
  const Vec3 c = mesh.vertex(mesh.faces(f, 2));
  return 0.5 * (b - a).cross(c - a).norm();
}

// Area below which a face counts as degenerate; relative to the bounding box.
inline double degenerate_area_threshold(const VertexMatrix& v) {
  const double d = bounding_box_diagonal(v);
  return 1e-12 * d * d;
}

namespace detail {

inline std::uint64_t edge_key(Index a, Index b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace detail

// Undirected edges used by more than two faces.
inline std::vector<std::pair<Index, Index>> non_manifold_edges(const FaceMatrix& faces) {
  std::map<std::uint64_t, int> uses;
  for (Index f = 0; f < faces.rows(); ++f)
    for (int k = 0; k < 3; ++k) ++uses[detail::edge_key(faces(f, k), faces(f, (k + 1) % 3))];
  std::vector<std::pair<Index, Index>> bad;
  for (const auto& [key, count] : uses)
    if (count > 2)
      bad.emplace_back(static_cast<Index>(key >> 32), static_cast<Index>(key & 0xffffffffu));
  return bad;
}

// Checks every TriMesh invariant; throws MeshError naming the first violation.
inline void validate(const TriMesh& mesh) {
  const Index n = mesh.num_vertices();
  const Index m = mesh.num_faces();
  if (n == 0 || m == 0) throw MeshError("empty mesh: " + std::to_string(n) + " vertices, " +
                                        std::to_string(m) + " faces");
  for (Index f = 0; f < m; ++f) {
    for (int k = 0; k < 3; ++k) {
      const Index v = mesh.faces(f, k);
      if (v < 0 || v >= n)
        throw MeshError("face " + std::to_string(f) + " references vertex " + std::to_string(v) +
                        " outside [0, " + std::to_string(n) + ")");
    }
    const Index a = mesh.faces(f, 0), b = mesh.faces(f, 1), c = mesh.faces(f, 2);
    if (a == b || b == c || a == c)
      throw MeshError("degenerate face " + std::to_string(f) + ": repeated vertex index");
  }
  if (!mesh.vertices.allFinite()) throw MeshError("non-finite vertex coordinates");
  const double min_area = degenerate_area_threshold(mesh.vertices);
  for (Index f = 0; f < m; ++f)
    if (!(face_area(mesh, f) > min_area))
      throw MeshError("degenerate face " + std::to_string(f) + ": area below " +
                      std::to_string(min_area));

  const auto bad = non_manifold_edges(mesh.faces);
  if (!bad.empty()) {
    std::string msg = "non-manifold mesh: " + std::to_string(bad.size()) +
                      " edge(s) shared by more than two faces:";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 10); ++i)
      msg += " (" + std::to_string(bad[i].first) + "," + std::to_string(bad[i].second) + ")";
    throw MeshError(msg);
  }

  if (mesh.has_uvs()) {
    if (mesh.uv_faces.rows() != m)
      throw MeshError("uv corner count " + std::to_string(3 * mesh.uv_faces.rows()) +
                      " does not match 3m = " + std::to_string(3 * m));
    const Index k = static_cast<Index>(mesh.uvs.rows());
    if ((mesh.uv_faces.array() < 0).any() || (mesh.uv_faces.array() >= k).any())
      throw MeshError("uv index out of range");
  }
  for (Index l : mesh.landmarks)
    if (l < 0 || l >= n) throw MeshError("landmark index " + std::to_string(l) + " out of range");
  if (!mesh.region_labels.empty() && static_cast<Index>(mesh.region_labels.size()) != n)
    throw MeshError("region label count " + std::to_string(mesh.region_labels.size()) +
                    " does not match vertex count " + std::to_string(n));
}

// ---------------------------------------------------------------------------
// OBJ

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_double(std::string_view tok, std::size_t line) {
  double value = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw MeshError("OBJ parse error at line " + std::to_string(line) + ": bad number '" +
                    std::string(tok) + "'");
  return value;
}

inline long parse_long(std::string_view tok, std::size_t line) {
  long value = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw MeshError("OBJ parse error at line " + std::to_string(line) + ": bad index '" +
                    std::string(tok) + "'");
  return value;
}

// OBJ indices are 1-based; negative values count back from the current end.
inline Index resolve_obj_index(long raw, std::size_t count, std::size_t line) {
  long idx = raw > 0 ? raw - 1 : static_cast<long>(count) + raw;
  if (raw == 0 || idx < 0 || idx >= static_cast<long>(count))
    throw MeshError("OBJ parse error at line " + std::to_string(line) + ": index " +
                    std::to_string(raw) + " out of range");
  return static_cast<Index>(idx);
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace detail

inline TriMesh parse_obj(std::istream& in, std::string name = "mesh") {
  std::vector<Vec3> positions;
  std::vector<Eigen::Vector2d> texcoords;
  std::vector<std::array<Index, 3>> faces;
  std::vector<std::array<Index, 3>> uv_faces;
  int faces_with_uv = 0, faces_without_uv = 0;

  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "v") {
      if (tok.size() < 4)
        throw MeshError("OBJ parse error at line " + std::to_string(line_no) + ": vertex needs 3 coordinates");
      positions.emplace_back(detail::parse_double(tok[1], line_no), detail::parse_double(tok[2], line_no),
                             detail::parse_double(tok[3], line_no));
    } else if (tok[0] == "vt") {
      if (tok.size() < 3)
        throw MeshError("OBJ parse error at line " + std::to_string(line_no) + ": vt needs 2 coordinates");
      texcoords.emplace_back(detail::parse_double(tok[1], line_no), detail::parse_double(tok[2], line_no));
    } else if (tok[0] == "f") {
      if (tok.size() < 4)
        throw MeshError("OBJ parse error at line " + std::to_string(line_no) + ": face needs at least 3 corners");
      std::vector<Index> pv, pt;
      bool any_uv = false, all_uv = true;
      for (std::size_t c = 1; c < tok.size(); ++c) {
        const std::string_view corner = tok[c];
        const auto s1 = corner.find('/');
        pv.push_back(detail::resolve_obj_index(detail::parse_long(corner.substr(0, s1), line_no),
                                               positions.size(), line_no));
        if (s1 != std::string_view::npos) {
          const auto rest = corner.substr(s1 + 1);
          const auto s2 = rest.find('/');
          const auto vt = rest.substr(0, s2);
          if (!vt.empty()) {
            any_uv = true;
            pt.push_back(detail::resolve_obj_index(detail::parse_long(vt, line_no), texcoords.size(), line_no));
            continue;
          }
        }
        all_uv = false;
      }
      if (any_uv && !all_uv)
        throw MeshError("OBJ parse error at line " + std::to_string(line_no) + ": face mixes corners with and without vt");
      // Fan triangulation around corner 0 keeps connectivity reproducible.
      for (std::size_t k = 1; k + 1 < pv.size(); ++k) {
        faces.push_back({pv[0], pv[k], pv[k + 1]});
        if (any_uv) {
          uv_faces.push_back({pt[0], pt[k], pt[k + 1]});
          ++faces_with_uv;
        } else {
          ++faces_without_uv;
        }
      }
    }
    // vn, o, g, s, usemtl, mtllib, l, p: ignored
  }
  if (faces_with_uv > 0 && faces_without_uv > 0)
    throw MeshError("OBJ parse error: some faces carry texture coordinates and others do not");

  TriMesh mesh;
  mesh.name = std::move(name);
  mesh.vertices.resize(static_cast<Eigen::Index>(positions.size()), 3);
  for (std::size_t i = 0; i < positions.size(); ++i) mesh.vertices.row(i) = positions[i].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t i = 0; i < faces.size(); ++i)
    mesh.faces.row(i) << faces[i][0], faces[i][1], faces[i][2];
  if (faces_with_uv > 0) {
    mesh.uvs.resize(static_cast<Eigen::Index>(texcoords.size()), 2);
    for (std::size_t i = 0; i < texcoords.size(); ++i) mesh.uvs.row(i) = texcoords[i].transpose();
    mesh.uv_faces.resize(static_cast<Eigen::Index>(uv_faces.size()), 3);
    for (std::size_t i = 0; i < uv_faces.size(); ++i)
      mesh.uv_faces.row(i) << uv_faces[i][0], uv_faces[i][1], uv_faces[i][2];
  }
  validate(mesh);
  return mesh;
}

inline std::string stem_of(const std::string& path) {
  auto slash = path.find_last_of("/\\");
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dot = base.find_last_of('.');
  return dot == std::string::npos ? base : base.substr(0, dot);
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open mesh file '" + path + "'");
  return parse_obj(in, stem_of(path));
}

inline void write_obj(std::ostream& out, const TriMesh& mesh) {
  out << "# " << mesh.name << "\n";
  for (Index v = 0; v < mesh.num_vertices(); ++v)
    out << "v " << detail::format_double(mesh.vertices(v, 0)) << ' '
        << detail::format_double(mesh.vertices(v, 1)) << ' ' << detail::format_double(mesh.vertices(v, 2))
        << '\n';
  if (mesh.has_uvs()) {
    for (Eigen::Index t = 0; t < mesh.uvs.rows(); ++t)
      out << "vt " << detail::format_double(mesh.uvs(t, 0)) << ' ' << detail::format_double(mesh.uvs(t, 1))
          << '\n';
    for (Index f = 0; f < mesh.num_faces(); ++f)
      out << "f " << mesh.faces(f, 0) + 1 << '/' << mesh.uv_faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1
          << '/' << mesh.uv_faces(f, 1) + 1 << ' ' << mesh.faces(f, 2) + 1 << '/' << mesh.uv_faces(f, 2) + 1
          << '\n';
  } else {
    for (Index f = 0; f < mesh.num_faces(); ++f)
      out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' ' << mesh.faces(f, 2) + 1 << '\n';
  }
}

inline void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_obj(out, mesh);
  out.flush();
  if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Sidecars: landmarks are one vertex index per line, region labels one integer
// per vertex line. Blank lines and '#' comments are skipped.

namespace detail {

inline std::vector<long> read_int_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open sidecar file '" + path + "'");
  std::vector<long> values;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 1)
      throw MeshError("sidecar '" + path + "' line " + std::to_string(line_no) + ": expected one integer");
    values.push_back(parse_long(tok[0], line_no));
  }
  return values;
}

}  // namespace detail

inline std::vector<Index> load_landmarks(const std::string& path, Index num_vertices) {
  std::vector<Index> out;
  for (long v : detail::read_int_lines(path)) {
    if (v < 0 || v >= num_vertices)
      throw MeshError("landmark index " + std::to_string(v) + " out of range [0, " +
                      std::to_string(num_vertices) + ")");
    out.push_back(static_cast<Index>(v));
  }
  return out;
}

inline std::vector<int> load_region_labels(const std::string& path, Index num_vertices) {
  std::vector<int> out;
  for (long v : detail::read_int_lines(path)) out.push_back(static_cast<int>(v));
  if (static_cast<Index>(out.size()) != num_vertices)
    throw MeshError("region file '" + path + "' has " + std::to_string(out.size()) + " labels for " +
                    std::to_string(num_vertices) + " vertices");
  return out;
}

template <typename Int>
void save_int_lines(const std::vector<Int>& values, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (Int v : values) out << v << '\n';
}

// Same connectivity, UVs and semantics as `source`, new positions.
inline TriMesh with_vertices(const TriMesh& source, const VertexMatrix& vertices) {
  TriMesh out = source;
  out.vertices = vertices;
  return out;
}

}  // namespace jacdeform
