#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/mesh.hpp"
#include "jacdeform/raster.hpp"
#include "jacdeform/symmetry.hpp"

namespace jacdeform {

// Weights of the total objective: guidance, landmark and opacity terms.
struct LossWeights {
  double guidance = 1.0;
  double landmark = 200.0;
  double opacity = 250.0;

  void validate() const {
    for (double v : {guidance, landmark, opacity})
      if (!(std::isfinite(v) && v >= 0.0)) throw InvalidArgumentError("loss weights must be finite and non-negative");
  }
};

struct VertexLoss {
  double loss = 0.0;
  VertexMatrix gradient;  // n x 3
};

struct OpacityLoss {
  double loss = 0.0;
  OpacityMap gradient;  // with respect to the deformed opacity
};

// Mean squared distance between source landmark positions and the same
// vertices after deformation.
inline VertexLoss landmark_loss(const TriMesh& source, const VertexMatrix& deformed) {
  if (source.landmarks.empty()) throw InvalidArgumentError("landmark loss needs at least one landmark");
  if (deformed.rows() != source.num_vertices())
    throw InvalidArgumentError("deformed vertex count does not match the source mesh");
  const double inv_n = 1.0 / static_cast<double>(source.landmarks.size());
  VertexLoss out{0.0, VertexMatrix::Zero(deformed.rows(), 3)};
  for (Index l : source.landmarks) {
    const Eigen::RowVector3d diff = deformed.row(l) - source.vertices.row(l);
    out.loss += diff.squaredNorm() * inv_n;
    out.gradient.row(l) += 2.0 * inv_n * diff;
  }
  return out;
}

// Mean squared pixel difference; gradient is taken with respect to `deformed`.
inline OpacityLoss opacity_loss(const OpacityMap& source, const OpacityMap& deformed) {
  if (source.width != deformed.width || source.height != deformed.height)
    throw InvalidArgumentError("opacity maps differ in size: " + std::to_string(source.width) + "x" +
                               std::to_string(source.height) + " vs " + std::to_string(deformed.width) + "x" +
                               std::to_string(deformed.height));
  const double inv = 1.0 / static_cast<double>(source.size());
  OpacityLoss out{0.0, OpacityMap(deformed.width, deformed.height)};
  for (std::size_t i = 0; i < source.size(); ++i) {
    const double diff = deformed.values[i] - source.values[i];
    out.loss += diff * diff * inv;
    out.gradient.values[i] = 2.0 * diff * inv;
  }
  return out;
}

inline double total_loss(const LossWeights& w, double guidance, double landmark, double opacity) {
  return w.guidance * guidance + w.landmark * landmark + w.opacity * opacity;
}

namespace detail {

inline int axis_of(const Vec3& n) {
  for (int k = 0; k < 3; ++k)
    if (std::abs(n[k]) == 1.0 && n[(k + 1) % 3] == 0.0 && n[(k + 2) % 3] == 0.0) return k;
  return -1;
}

// Coordinate-wise reflection for axis-aligned planes keeps the arithmetic exact
// in the tangential components.
inline Vec3 reflect_point(const ReflectionPlane& plane, const Vec3& p) {
  if (const int k = axis_of(plane.normal); k >= 0) {
    Vec3 r = p;
    r[k] = 2.0 * plane.offset * plane.normal[k] - p[k];
    return r;
  }
  return plane.reflect(p);
}

inline Vec3 project_to_plane(const ReflectionPlane& plane, const Vec3& p) {
  if (const int k = axis_of(plane.normal); k >= 0) {
    Vec3 r = p;
    r[k] = plane.offset * plane.normal[k];
    return r;
  }
  Vec3 q = p;
  for (int i = 0; i < 4; ++i) {
    const Vec3 next = plane.project(q);
    if (next == q) break;
    q = next;
  }
  return q;
}

}  // namespace detail

// Mirror-averages each pair and snaps fixed vertices onto the plane. Pairs
// that are already exact mirrors are left untouched, so the map is idempotent.
inline VertexMatrix symmetry_project(const VertexMatrix& vertices, const SymmetryMap& map) {
  VertexMatrix out = vertices;
  for (auto [a, b] : map.pairs) {
    const Vec3 pa = vertices.row(a).transpose(), pb = vertices.row(b).transpose();
    if (detail::reflect_point(map.plane, pa) == pb) continue;
    const Vec3 na = 0.5 * (pa + detail::reflect_point(map.plane, pb));
    out.row(a) = na.transpose();
    out.row(b) = detail::reflect_point(map.plane, na).transpose();
  }
  for (Index v : map.fixed)
    out.row(v) = detail::project_to_plane(map.plane, vertices.row(v).transpose()).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Guidance interface. A guidance plays the role of the image-space prior: it
// sees the current deformed geometry and returns a gradient, either directly
// on vertices or on the rendered opacity (which the optimizer pulls back).

struct GuidanceContext {
  const VertexMatrix* vertices = nullptr;
  const TriMesh* source = nullptr;
  Camera camera;
  int view_index = -1;                  // index into fixed views, -1 when sampled
  const OpacityMap* opacity = nullptr;  // present when the guidance needs it
  RasterSettings raster;
  int iteration = 0;
  std::string prompt;
};

struct GuidanceResult {
  double loss = 0.0;
  std::optional<VertexMatrix> vertex_gradient;
  std::optional<OpacityMap> opacity_gradient;

  void validate(Index num_vertices, const Camera& cam) const {
    if (!std::isfinite(loss)) throw NumericalError("guidance returned a non-finite loss");
    if (!vertex_gradient && !opacity_gradient) throw GuidanceError("guidance returned no gradient channel");
    if (vertex_gradient) {
      if (vertex_gradient->rows() != num_vertices) throw GuidanceError("guidance vertex gradient has wrong shape");
      if (!vertex_gradient->allFinite()) throw NumericalError("guidance vertex gradient is not finite");
    }
    if (opacity_gradient) {
      if (opacity_gradient->width != cam.width || opacity_gradient->height != cam.height)
        throw GuidanceError("guidance opacity gradient has wrong resolution");
      for (double v : opacity_gradient->values)
        if (!std::isfinite(v)) throw NumericalError("guidance opacity gradient is not finite");
    }
  }
};

class Guidance {
 public:
  virtual ~Guidance() = default;
  virtual GuidanceResult evaluate(const GuidanceContext& ctx) = 0;
  // True when evaluate() reads ctx.opacity.
  virtual bool needs_opacity() const { return false; }
  virtual std::string describe() const = 0;
};

// Pulls listed vertices toward fixed target positions.
class TargetLandmarkGuidance final : public Guidance {
 public:
  TargetLandmarkGuidance(std::vector<std::pair<Index, Vec3>> targets, Index num_vertices)
      : targets_(std::move(targets)) {
    if (targets_.empty()) throw InvalidArgumentError("target-landmark guidance needs at least one target");
    for (const auto& [v, p] : targets_)
      if (v < 0 || v >= num_vertices)
        throw InvalidArgumentError("target-landmark guidance: vertex " + std::to_string(v) + " out of range");
  }

  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    const VertexMatrix& v = *ctx.vertices;
    const double inv = 1.0 / static_cast<double>(targets_.size());
    GuidanceResult r;
    r.vertex_gradient = VertexMatrix::Zero(v.rows(), 3);
    for (const auto& [idx, target] : targets_) {
      const Eigen::RowVector3d diff = v.row(idx) - target.transpose();
      r.loss += diff.squaredNorm() * inv;
      r.vertex_gradient->row(idx) += 2.0 * inv * diff;
    }
    return r;
  }

  std::string describe() const override { return "target-landmarks(" + std::to_string(targets_.size()) + ")"; }

 private:
  std::vector<std::pair<Index, Vec3>> targets_;
};

inline std::unique_ptr<Guidance> builtin_guidance_target_landmarks(std::vector<std::pair<Index, Vec3>> targets,
                                                                   const TriMesh& source) {
  return std::make_unique<TargetLandmarkGuidance>(std::move(targets), source.num_vertices());
}

// Matches rendered opacity to target silhouettes. Targets are either fixed maps
// tied to specific cameras or the rendered silhouette of a target mesh.
class TargetSilhouetteGuidance final : public Guidance {
 public:
  TargetSilhouetteGuidance(std::vector<Camera> cameras, std::vector<OpacityMap> targets)
      : cameras_(std::move(cameras)), targets_(std::move(targets)) {
    if (cameras_.size() != targets_.size() || cameras_.empty())
      throw InvalidArgumentError("target-silhouette guidance needs one target per camera");
    for (std::size_t i = 0; i < cameras_.size(); ++i)
      if (targets_[i].width != cameras_[i].width || targets_[i].height != cameras_[i].height)
        throw InvalidArgumentError("target silhouette " + std::to_string(i) + " does not match its camera resolution");
  }

  explicit TargetSilhouetteGuidance(TriMesh target_mesh) : target_mesh_(std::move(target_mesh)) {}

  bool needs_opacity() const override { return true; }

  const OpacityMap& target_for(const Camera& cam, const RasterSettings& rs) {
    if (target_mesh_) {
      // The target never moves, so each view is rendered once.
      for (const Rendered& r : rendered_)
        if (same_camera(r.camera, cam) && r.raster.sigma == rs.sigma && r.raster.cutoff_sigmas == rs.cutoff_sigmas)
          return r.opacity;
      // Sampled views rarely repeat; keep the cache bounded.
      if (rendered_.size() >= 64) rendered_.pop_front();
      rendered_.push_back({cam, rs, render_opacity(target_mesh_->vertices, target_mesh_->faces, cam, rs)});
      return rendered_.back().opacity;
    }
    for (std::size_t i = 0; i < cameras_.size(); ++i)
      if (same_camera(cameras_[i], cam)) return targets_[i];
    throw InvalidArgumentError("target-silhouette guidance has no target for the requested camera");
  }

  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    if (!ctx.opacity) throw InvalidArgumentError("target-silhouette guidance needs the rendered opacity");
    const OpacityMap& target = target_for(ctx.camera, ctx.raster);
    if (target.width != ctx.opacity->width || target.height != ctx.opacity->height)
      throw InvalidArgumentError("target silhouette resolution does not match the render");
    OpacityLoss l = opacity_loss(target, *ctx.opacity);
    GuidanceResult r;
    r.loss = l.loss;
    r.opacity_gradient = std::move(l.gradient);
    return r;
  }

  std::string describe() const override {
    return target_mesh_ ? "target-silhouette(mesh " + target_mesh_->name + ")"
                        : "target-silhouette(" + std::to_string(cameras_.size()) + " views)";
  }

  static bool same_camera(const Camera& a, const Camera& b) {
    return a.position == b.position && a.target == b.target && a.up == b.up && a.fov_y == b.fov_y &&
           a.width == b.width && a.height == b.height;
  }

 private:
  std::vector<Camera> cameras_;
  std::vector<OpacityMap> targets_;
  std::optional<TriMesh> target_mesh_;
  struct Rendered {
    Camera camera;
    RasterSettings raster;
    OpacityMap opacity;
  };
  // Deque keeps returned references valid as views are added.
  std::deque<Rendered> rendered_;
};

inline std::unique_ptr<Guidance> builtin_guidance_target_silhouette(std::vector<OpacityMap> targets,
                                                                    std::vector<Camera> cameras) {
  return std::make_unique<TargetSilhouetteGuidance>(std::move(cameras), std::move(targets));
}

// RMS distance of `vertices` (restricted to `region`) from their centroid.
inline double region_radius(const VertexMatrix& v, const std::vector<Index>& region) {
  Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
  for (Index i : region) c += v.row(i);
  c /= static_cast<double>(region.size());
  double s = 0.0;
  for (Index i : region) s += (v.row(i) - c).squaredNorm();
  return std::sqrt(s / static_cast<double>(region.size()));
}

inline std::vector<Index> region_vertices(const TriMesh& mesh, int label) {
  std::vector<Index> out;
  for (Index i = 0; i < static_cast<Index>(mesh.region_labels.size()); ++i)
    if (mesh.region_labels[i] == label) out.push_back(i);
  return out;
}

// Drives the size of a labeled region, measured as its RMS radius about the
// region centroid, to scale_target times its source size.
class RegionScaleGuidance final : public Guidance {
 public:
  RegionScaleGuidance(const TriMesh& source, int label, double scale_target)
      : label_(label), scale_target_(scale_target), region_(region_vertices(source, label)) {
    if (region_.size() < 2)
      throw InvalidArgumentError("unknown or too small region id " + std::to_string(label));
    source_radius_ = region_radius(source.vertices, region_);
  }

  double ratio(const VertexMatrix& v) const { return region_radius(v, region_) / source_radius_; }
  const std::vector<Index>& region() const { return region_; }

  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    const VertexMatrix& v = *ctx.vertices;
    Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
    for (Index i : region_) c += v.row(i);
    c /= static_cast<double>(region_.size());
    const double r = region_radius(v, region_);
    const double gap = r / source_radius_ - scale_target_;
    GuidanceResult out;
    out.loss = gap * gap;
    out.vertex_gradient = VertexMatrix::Zero(v.rows(), 3);
    // d r / d v_i = (v_i - c) / (K r); the centroid term sums to zero.
    const double k = 2.0 * gap / source_radius_ / (static_cast<double>(region_.size()) * r);
    for (Index i : region_) out.vertex_gradient->row(i) = k * (v.row(i) - c);
    return out;
  }

  std::string describe() const override {
    return "region-scale(" + std::to_string(label_) + " -> " + std::to_string(scale_target_) + ")";
  }

 private:
  int label_;
  double scale_target_;
  std::vector<Index> region_;
  double source_radius_ = 1.0;
};

inline std::unique_ptr<Guidance> builtin_guidance_region_scale(const TriMesh& source, int label, double scale_target) {
  return std::make_unique<RegionScaleGuidance>(source, label, scale_target);
}

// Guidance that contributes nothing; useful for pure-regularizer runs.
class ZeroGuidance final : public Guidance {
 public:
  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    GuidanceResult r;
    r.vertex_gradient = VertexMatrix::Zero(ctx.vertices->rows(), 3);
    return r;
  }
  std::string describe() const override { return "zero"; }
};

}  // namespace jacdeform
