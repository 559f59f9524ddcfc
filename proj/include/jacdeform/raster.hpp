#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/mesh.hpp"

namespace jacdeform {

struct Camera {
  Vec3 position = Vec3(0, 0, 3);
  Vec3 target = Vec3::Zero();
  Vec3 up = Vec3::UnitY();
  double fov_y = 40.0 * std::numbers::pi / 180.0;  // radians
  int width = 256;
  int height = 256;
  double near_plane = 0.01;
  double far_plane = 100.0;

  void validate() const {
    if (!(fov_y > 0.0 && fov_y < std::numbers::pi)) throw InvalidArgumentError("camera fov must lie in (0, pi)");
    if (width < 1 || height < 1) throw InvalidArgumentError("camera image size must be positive");
    if (!(near_plane < far_plane)) throw InvalidArgumentError("camera near plane must be closer than far plane");
    if ((target - position).norm() == 0.0) throw InvalidArgumentError("camera view direction is zero");
    if ((target - position).cross(up).norm() == 0.0) throw InvalidArgumentError("camera up is parallel to view");
  }

  double focal_pixels() const { return 0.5 * height / std::tan(0.5 * fov_y); }

  // Orthonormal view basis: right, true up, forward.
  void basis(Vec3& right, Vec3& true_up, Vec3& forward) const {
    forward = (target - position).normalized();
    right = forward.cross(up).normalized();
    true_up = right.cross(forward);
  }

  // Spherical placement around `center`: azimuth about +y from +z, elevation
  // above the xz-plane.
  static Camera orbit(const Vec3& center, double azimuth, double elevation, double distance, int width, int height,
                      double fov_y = 40.0 * std::numbers::pi / 180.0) {
    Camera c;
    c.target = center;
    c.position = center + distance * Vec3(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                                          std::cos(elevation) * std::cos(azimuth));
    c.up = Vec3::UnitY();
    if (std::abs(std::cos(elevation)) < 1e-9) c.up = Vec3(-std::sin(azimuth), 0, -std::cos(azimuth));
    c.width = width;
    c.height = height;
    c.fov_y = fov_y;
    c.near_plane = 0.01;
    c.far_plane = 100.0 + 4.0 * distance;
    return c;
  }
};

// H x W coverage image, row-major, values in [0, 1].
struct OpacityMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  OpacityMap() = default;
  OpacityMap(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  double& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
  double at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
  std::size_t size() const { return values.size(); }

  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

struct RasterSettings {
  double sigma = 2.0;  // sigmoid sharpness, pixels
  // Candidate triangles for a pixel are those whose screen bounding box,
  // dilated by cutoff_sigmas * sigma, covers it. sigmoid(-18) < 1.6e-8.
  double cutoff_sigmas = 18.0;
};

namespace detail {

struct ProjectedTriangle {
  Index face = 0;
  Eigen::Vector2d p[3];
  // d(screen)/d(world) per corner, 2 x 3.
  Eigen::Matrix<double, 2, 3> dp[3];
  double orientation = 1.0;  // sign of the screen-space area
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel range
};

inline bool project_point(const Camera& cam, const Vec3& right, const Vec3& up, const Vec3& fwd, const Vec3& p,
                          Eigen::Vector2d& screen, Eigen::Matrix<double, 2, 3>* jac, double& depth) {
  const Vec3 q = p - cam.position;
  const double xc = right.dot(q), yc = up.dot(q), zc = fwd.dot(q);
  depth = zc;
  if (!(zc > cam.near_plane && zc < cam.far_plane)) return false;
  const double f = cam.focal_pixels();
  screen << 0.5 * cam.width + f * xc / zc, 0.5 * cam.height - f * yc / zc;
  if (jac) {
    jac->row(0) = (f * (right * zc - xc * fwd) / (zc * zc)).transpose();
    jac->row(1) = (-f * (up * zc - yc * fwd) / (zc * zc)).transpose();
  }
  return true;
}

inline double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

// Front-facing triangles (counterclockwise as seen by the camera) with their
// dilated pixel ranges.
inline std::vector<ProjectedTriangle> project_triangles(const VertexMatrix& vertices, const FaceMatrix& faces,
                                                        const Camera& cam, double dilation) {
  Vec3 right, up, fwd;
  cam.basis(right, up, fwd);
  std::vector<ProjectedTriangle> out;
  out.reserve(static_cast<std::size_t>(faces.rows()));
  for (Index f = 0; f < faces.rows(); ++f) {
    ProjectedTriangle t;
    t.face = f;
    bool ok = true;
    for (int k = 0; k < 3 && ok; ++k) {
      double depth;
      ok = project_point(cam, right, up, fwd, vertices.row(faces(f, k)).transpose(), t.p[k], &t.dp[k], depth);
    }
    if (!ok) continue;
    const double area2 = cross2(t.p[1] - t.p[0], t.p[2] - t.p[0]);
    // Screen y points down, so counterclockwise-in-view has negative area.
    if (!(area2 < 0.0)) continue;
    t.orientation = -1.0;
    const double minx = std::min({t.p[0].x(), t.p[1].x(), t.p[2].x()}) - dilation;
    const double maxx = std::max({t.p[0].x(), t.p[1].x(), t.p[2].x()}) + dilation;
    const double miny = std::min({t.p[0].y(), t.p[1].y(), t.p[2].y()}) - dilation;
    const double maxy = std::max({t.p[0].y(), t.p[1].y(), t.p[2].y()}) + dilation;
    // Pixel (row, col) has its center at (col + 0.5, row + 0.5).
    t.x0 = std::max(0, static_cast<int>(std::ceil(minx - 0.5)));
    t.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(maxx - 0.5)));
    t.y0 = std::max(0, static_cast<int>(std::ceil(miny - 0.5)));
    t.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(maxy - 0.5)));
    if (t.x0 > t.x1 || t.y0 > t.y1) continue;
    out.push_back(t);
  }
  return out;
}

// Signed distance from q to the triangle boundary, positive inside. When
// `grad` is given, fills d(distance)/d(corner k) for the three 2D corners.
inline double signed_distance(const ProjectedTriangle& t, const Eigen::Vector2d& q, Eigen::Vector2d* grad) {
  double h[3];
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector2d e = t.p[(k + 1) % 3] - t.p[k];
    h[k] = t.orientation * cross2(e, q - t.p[k]) / e.norm();
  }
  const bool inside = h[0] >= 0.0 && h[1] >= 0.0 && h[2] >= 0.0;
  if (inside) {
    const int k = (h[0] <= h[1] && h[0] <= h[2]) ? 0 : (h[1] <= h[2] ? 1 : 2);
    if (grad) {
      const Eigen::Vector2d a = t.p[k], b = t.p[(k + 1) % 3];
      const Eigen::Vector2d e = b - a, w = q - a;
      const double len = e.norm(), c = cross2(e, w);
      const Eigen::Vector2d dh_de = Eigen::Vector2d(w.y(), -w.x()) / len - c * e / (len * len * len);
      const Eigen::Vector2d dh_dw = Eigen::Vector2d(-e.y(), e.x()) / len;
      for (auto* g = grad; g != grad + 3; ++g) g->setZero();
      grad[k] = t.orientation * (-dh_de - dh_dw);
      grad[(k + 1) % 3] = t.orientation * dh_de;
    }
    return h[k];
  }
  // Outside: negative Euclidean distance to the nearest edge segment.
  double best = std::numeric_limits<double>::infinity();
  int best_k = 0;
  double best_t = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector2d a = t.p[k], b = t.p[(k + 1) % 3];
    const Eigen::Vector2d e = b - a;
    const double s = std::clamp((q - a).dot(e) / e.squaredNorm(), 0.0, 1.0);
    const double dist = (q - (a + s * e)).norm();
    if (dist < best) {
      best = dist;
      best_k = k;
      best_t = s;
    }
  }
  if (grad) {
    for (auto* g = grad; g != grad + 3; ++g) g->setZero();
    const int ka = best_k, kb = (best_k + 1) % 3;
    const Eigen::Vector2d a = t.p[ka], b = t.p[kb];
    if (best_t <= 0.0) {
      grad[ka] = -(a - q) / best;
    } else if (best_t >= 1.0) {
      grad[kb] = -(b - q) / best;
    } else {
      const Eigen::Vector2d e = b - a, w = q - a;
      const double len = e.norm(), c = cross2(e, w);
      const double sgn = c >= 0.0 ? 1.0 : -1.0;
      const Eigen::Vector2d dh_de = Eigen::Vector2d(w.y(), -w.x()) / len - c * e / (len * len * len);
      const Eigen::Vector2d dh_dw = Eigen::Vector2d(-e.y(), e.x()) / len;
      grad[ka] = -sgn * (-dh_de - dh_dw);
      grad[kb] = -sgn * dh_de;
    }
  }
  return -best;
}

// 1 - sigmoid(x), stable for large |x|.
inline double sigmoid_complement(double x) {
  return x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
}

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Per-pixel transmittance prod_f (1 - sigmoid(d_f / sigma)).
inline std::vector<double> transmittance(const std::vector<ProjectedTriangle>& tris, const Camera& cam,
                                         const RasterSettings& rs) {
  std::vector<double> trans(static_cast<std::size_t>(cam.width) * cam.height, 1.0);
  for (const auto& t : tris)
    for (int y = t.y0; y <= t.y1; ++y)
      for (int x = t.x0; x <= t.x1; ++x) {
        const double d = signed_distance(t, Eigen::Vector2d(x + 0.5, y + 0.5), nullptr);
        if (d < -rs.cutoff_sigmas * rs.sigma) continue;
        trans[static_cast<std::size_t>(y) * cam.width + x] *= sigmoid_complement(d / rs.sigma);
      }
  return trans;
}

}  // namespace detail

// Soft silhouette: O(p) = 1 - prod over front-facing triangles of
// (1 - sigmoid(d_f(p) / sigma)), d_f the signed screen distance to face f.
inline OpacityMap render_opacity(const VertexMatrix& vertices, const FaceMatrix& faces, const Camera& cam,
                                 const RasterSettings& rs = {}) {
  cam.validate();
  if (!(rs.sigma > 0.0)) throw InvalidArgumentError("rasterizer sigma must be positive");
  OpacityMap out(cam.width, cam.height, 0.0);
  const auto tris = detail::project_triangles(vertices, faces, cam, rs.cutoff_sigmas * rs.sigma);
  const auto trans = detail::transmittance(tris, cam, rs);
  for (std::size_t i = 0; i < trans.size(); ++i) out.values[i] = std::clamp(1.0 - trans[i], 0.0, 1.0);
  return out;
}

// Exact vertex gradient of sum_p dloss_dopacity(p) * O(p).
inline VertexMatrix backward_opacity(const VertexMatrix& vertices, const FaceMatrix& faces, const Camera& cam,
                                     const RasterSettings& rs, const OpacityMap& dloss_dopacity) {
  cam.validate();
  if (dloss_dopacity.width != cam.width || dloss_dopacity.height != cam.height)
    throw InvalidArgumentError("opacity gradient resolution does not match the camera");
  VertexMatrix grad = VertexMatrix::Zero(vertices.rows(), 3);
  const auto tris = detail::project_triangles(vertices, faces, cam, rs.cutoff_sigmas * rs.sigma);
  const auto trans = detail::transmittance(tris, cam, rs);
  Eigen::Vector2d dd[3];
  for (const auto& t : tris) {
    Eigen::Vector2d acc[3] = {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
    bool touched = false;
    for (int y = t.y0; y <= t.y1; ++y)
      for (int x = t.x0; x <= t.x1; ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
        const double g = dloss_dopacity.values[pix];
        if (g == 0.0) continue;
        const double d = detail::signed_distance(t, Eigen::Vector2d(x + 0.5, y + 0.5), dd);
        if (d < -rs.cutoff_sigmas * rs.sigma) continue;
        // dO/dd_f = T * s_f / sigma, T the full transmittance.
        const double w = g * trans[pix] * detail::sigmoid(d / rs.sigma) / rs.sigma;
        if (w == 0.0) continue;
        for (int k = 0; k < 3; ++k) acc[k] += w * dd[k];
        touched = true;
      }
    if (!touched) continue;
    for (int k = 0; k < 3; ++k) grad.row(faces(t.face, k)) += (t.dp[k].transpose() * acc[k]).transpose();
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Diagnostic renders (hard z-buffer, not differentiable)

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t* at(int row, int col) { return &pixels[(static_cast<std::size_t>(row) * width + col) * 3]; }
  const std::uint8_t* at(int row, int col) const {
    return &pixels[(static_cast<std::size_t>(row) * width + col) * 3];
  }
};

enum class DiagnosticMode { Normals, Flat, WeightColormap };

inline std::array<std::uint8_t, 3> normal_color(const Vec3& n) {
  std::array<std::uint8_t, 3> c{};
  for (int d = 0; d < 3; ++d) c[d] = static_cast<std::uint8_t>(std::lround(127.5 * (std::clamp(n[d], -1.0, 1.0) + 1.0)));
  return c;
}

// Diverging map centered at 1: red for w > 1 (enlarging), blue for w < 1.
inline std::array<std::uint8_t, 3> weight_color(double w, double range = 1.0) {
  const double t = std::clamp((w - 1.0) / range, -1.0, 1.0);
  const auto ch = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  if (t >= 0.0) return {255, ch(1.0 - t), ch(1.0 - t)};
  return {ch(1.0 + t), ch(1.0 + t), 255};
}

struct HardCoverage {
  std::vector<Index> face_id;  // -1 where empty
  int width = 0;
  int height = 0;
};

// Nearest face per pixel center, both orientations, perspective-correct depth.
inline HardCoverage rasterize_hard(const VertexMatrix& vertices, const FaceMatrix& faces, const Camera& cam) {
  cam.validate();
  Vec3 right, up, fwd;
  cam.basis(right, up, fwd);
  HardCoverage cov{std::vector<Index>(static_cast<std::size_t>(cam.width) * cam.height, -1), cam.width, cam.height};
  std::vector<double> inv_depth(cov.face_id.size(), 0.0);
  for (Index f = 0; f < faces.rows(); ++f) {
    Eigen::Vector2d p[3];
    double z[3];
    bool ok = true;
    for (int k = 0; k < 3 && ok; ++k)
      ok = detail::project_point(cam, right, up, fwd, vertices.row(faces(f, k)).transpose(), p[k], nullptr, z[k]);
    if (!ok) continue;
    const double area = detail::cross2(p[1] - p[0], p[2] - p[0]);
    if (area == 0.0) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({p[0].x(), p[1].x(), p[2].x()}) - 0.5)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(std::max({p[0].x(), p[1].x(), p[2].x()}) - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({p[0].y(), p[1].y(), p[2].y()}) - 0.5)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(std::max({p[0].y(), p[1].y(), p[2].y()}) - 0.5)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const Eigen::Vector2d q(x + 0.5, y + 0.5);
        const double b0 = detail::cross2(p[1] - q, p[2] - q) / area;
        const double b1 = detail::cross2(p[2] - q, p[0] - q) / area;
        const double b2 = 1.0 - b0 - b1;
        if (b0 < 0.0 || b1 < 0.0 || b2 < 0.0) continue;
        const double iz = b0 / z[0] + b1 / z[1] + b2 / z[2];
        const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
        if (iz > inv_depth[pix]) {
          inv_depth[pix] = iz;
          cov.face_id[pix] = f;
        }
      }
  }
  return cov;
}

inline RgbImage render_diagnostic(const VertexMatrix& vertices, const FaceMatrix& faces, const Camera& cam,
                                  DiagnosticMode mode, const std::vector<double>* per_face_scalar = nullptr,
                                  double colormap_range = 1.0) {
  if (mode == DiagnosticMode::WeightColormap) {
    if (!per_face_scalar) throw InvalidArgumentError("weight-colormap render needs a per-face scalar");
    if (static_cast<Eigen::Index>(per_face_scalar->size()) != faces.rows())
      throw InvalidArgumentError("per-face scalar length does not match face count");
  }
  const HardCoverage cov = rasterize_hard(vertices, faces, cam);
  Vec3 right, up, fwd;
  cam.basis(right, up, fwd);
  std::vector<std::array<std::uint8_t, 3>> face_color(static_cast<std::size_t>(faces.rows()));
  for (Index f = 0; f < faces.rows(); ++f) {
    const Vec3 a = vertices.row(faces(f, 0)).transpose();
    const Vec3 n = (vertices.row(faces(f, 1)).transpose() - a).cross(vertices.row(faces(f, 2)).transpose() - a).normalized();
    switch (mode) {
      case DiagnosticMode::Normals: face_color[f] = normal_color(n); break;
      case DiagnosticMode::Flat: {
        const auto v = static_cast<std::uint8_t>(std::lround(255.0 * (0.15 + 0.85 * std::abs(n.dot(fwd)))));
        face_color[f] = {v, v, v};
        break;
      }
      case DiagnosticMode::WeightColormap: face_color[f] = weight_color((*per_face_scalar)[f], colormap_range); break;
    }
  }
  RgbImage img(cam.width, cam.height, 0);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Index f = cov.face_id[static_cast<std::size_t>(y) * cam.width + x];
      if (f < 0) continue;
      std::copy(face_color[f].begin(), face_color[f].end(), img.at(y, x));
    }
  return img;
}

}  // namespace jacdeform
