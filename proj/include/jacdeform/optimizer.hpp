#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/jacobian_field.hpp"
#include "jacdeform/mesh.hpp"
#include "jacdeform/objectives.hpp"
#include "jacdeform/raster.hpp"
#include "jacdeform/symmetry.hpp"

namespace jacdeform {

// ---------------------------------------------------------------------------
// Configuration

struct OptimConfig {
  int iterations = 500;
  double lr_jacobian = 5e-3;
  double lr_weight = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  LossWeights weights;
  int width = 256;
  int height = 256;
  double sigma = 2.0;  // pixels
  double fov_deg = 40.0;
  double azimuth_min_deg = -180.0;
  double azimuth_max_deg = 180.0;
  double elevation_min_deg = -30.0;
  double elevation_max_deg = 30.0;
  double distance_min = 3.0;
  double distance_max = 3.0;
  // When positive, cycle through this many evenly spaced azimuths at the
  // middle elevation and distance instead of sampling.
  int fixed_views = 0;
  std::uint64_t seed = 0;
  int checkpoint_interval = 100;  // 0 writes only the final checkpoint
  int render_interval = 100;      // 0 disables intermediate renders
  bool symmetry = false;
  char symmetry_axis = 'x';  // plane normal, through the source centroid
  double symmetry_tolerance = 1e-6;  // relative to the bounding-box diagonal
  int edit_region = -1;  // region label to optimize; -1 optimizes every face
  std::string prompt;

  // Runtime-only: explicit face mask (true = optimized). Overrides edit_region.
  std::vector<bool> face_mask;

  void validate() const {
    auto fail = [](const std::string& what) { throw InvalidArgumentError("config: " + what); };
    if (iterations < 1) fail("iterations must be >= 1");
    if (!(lr_jacobian > 0.0) || !(lr_weight > 0.0)) fail("learning rates must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      fail("adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
    weights.validate();
    if (width < 1 || height < 1) fail("render size must be positive");
    if (!(sigma > 0.0)) fail("sigma must be positive");
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) fail("fov_deg must lie in (0, 180)");
    if (!(azimuth_min_deg <= azimuth_max_deg)) fail("azimuth range is empty");
    if (!(elevation_min_deg <= elevation_max_deg)) fail("elevation range is empty");
    if (!(elevation_min_deg >= -90.0 && elevation_max_deg <= 90.0)) fail("elevation must lie in [-90, 90]");
    if (!(distance_min > 0.0 && distance_min <= distance_max)) fail("distance range is empty or non-positive");
    if (fixed_views < 0) fail("fixed_views must be >= 0");
    if (checkpoint_interval < 0 || render_interval < 0) fail("intervals must be >= 0");
    if (symmetry_axis != 'x' && symmetry_axis != 'y' && symmetry_axis != 'z') fail("symmetry_axis must be x, y or z");
    if (!(symmetry_tolerance > 0.0)) fail("symmetry_tolerance must be positive");
  }

  RasterSettings raster() const {
    RasterSettings rs;
    rs.sigma = sigma;
    return rs;
  }
};

namespace detail {

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw InvalidArgumentError("config: '" + key + "' expects a number, got '" + s + "'");
  return v;
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& key) {
  Int v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw InvalidArgumentError("config: '" + key + "' expects an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw InvalidArgumentError("config: '" + key + "' expects true/false, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

// Every serialized key, in file order, with its meaning.
inline const std::vector<std::pair<std::string, std::string>>& config_key_docs() {
  static const std::vector<std::pair<std::string, std::string>> docs = {
      {"iterations", "optimization steps"},
      {"lr_jacobian", "Adam learning rate for Jacobian entries"},
      {"lr_weight", "Adam learning rate for per-face weights"},
      {"adam_beta1", "Adam first-moment decay"},
      {"adam_beta2", "Adam second-moment decay"},
      {"adam_epsilon", "Adam denominator epsilon"},
      {"lambda_guidance", "weight of the guidance term"},
      {"lambda_landmark", "weight of the landmark term"},
      {"lambda_opacity", "weight of the opacity term"},
      {"width", "render width in pixels"},
      {"height", "render height in pixels"},
      {"sigma", "soft rasterizer sharpness in pixels"},
      {"fov_deg", "vertical field of view in degrees"},
      {"azimuth_min_deg", "camera azimuth range start (about +y, 0 looks down -z)"},
      {"azimuth_max_deg", "camera azimuth range end"},
      {"elevation_min_deg", "camera elevation range start"},
      {"elevation_max_deg", "camera elevation range end"},
      {"distance_min", "camera distance range start (model units)"},
      {"distance_max", "camera distance range end"},
      {"fixed_views", "if > 0, cycle evenly spaced azimuths instead of sampling"},
      {"seed", "random seed"},
      {"checkpoint_interval", "iterations between checkpoints (0: final only)"},
      {"render_interval", "iterations between diagnostic renders (0: none)"},
      {"symmetry", "mirror-average parameters every step (true/false)"},
      {"symmetry_axis", "mirror plane normal axis (x, y or z), through the centroid"},
      {"symmetry_tolerance", "vertex matching tolerance relative to bbox diagonal"},
      {"edit_region", "region label to optimize, -1 for the whole mesh"},
      {"prompt", "free-form goal string passed to the guidance"},
  };
  return docs;
}

inline void set_config_value(OptimConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  if (key == "iterations") c.iterations = parse_int<int>(value, key);
  else if (key == "lr_jacobian") c.lr_jacobian = parse_double(value, key);
  else if (key == "lr_weight") c.lr_weight = parse_double(value, key);
  else if (key == "adam_beta1") c.adam_beta1 = parse_double(value, key);
  else if (key == "adam_beta2") c.adam_beta2 = parse_double(value, key);
  else if (key == "adam_epsilon") c.adam_epsilon = parse_double(value, key);
  else if (key == "lambda_guidance") c.weights.guidance = parse_double(value, key);
  else if (key == "lambda_landmark") c.weights.landmark = parse_double(value, key);
  else if (key == "lambda_opacity") c.weights.opacity = parse_double(value, key);
  else if (key == "width") c.width = parse_int<int>(value, key);
  else if (key == "height") c.height = parse_int<int>(value, key);
  else if (key == "sigma") c.sigma = parse_double(value, key);
  else if (key == "fov_deg") c.fov_deg = parse_double(value, key);
  else if (key == "azimuth_min_deg") c.azimuth_min_deg = parse_double(value, key);
  else if (key == "azimuth_max_deg") c.azimuth_max_deg = parse_double(value, key);
  else if (key == "elevation_min_deg") c.elevation_min_deg = parse_double(value, key);
  else if (key == "elevation_max_deg") c.elevation_max_deg = parse_double(value, key);
  else if (key == "distance_min") c.distance_min = parse_double(value, key);
  else if (key == "distance_max") c.distance_max = parse_double(value, key);
  else if (key == "fixed_views") c.fixed_views = parse_int<int>(value, key);
  else if (key == "seed") c.seed = parse_int<std::uint64_t>(value, key);
  else if (key == "checkpoint_interval") c.checkpoint_interval = parse_int<int>(value, key);
  else if (key == "render_interval") c.render_interval = parse_int<int>(value, key);
  else if (key == "symmetry") c.symmetry = parse_bool(value, key);
  else if (key == "symmetry_axis") {
    if (value.size() != 1) throw InvalidArgumentError("config: symmetry_axis must be x, y or z");
    c.symmetry_axis = value[0];
  } else if (key == "symmetry_tolerance") c.symmetry_tolerance = parse_double(value, key);
  else if (key == "edit_region") c.edit_region = parse_int<int>(value, key);
  else if (key == "prompt") c.prompt = value;
  else throw InvalidArgumentError("config: unknown key '" + key + "'");
}

// Flat `key = value` text; '#' starts a comment. Keys not present keep
// their values from `base`.
inline OptimConfig parse_config(std::istream& in, OptimConfig base = {}) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgumentError("config line " + std::to_string(line_no) + ": expected key = value");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const InvalidArgumentError& e) {
      throw InvalidArgumentError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

inline OptimConfig load_config(const std::string& path, OptimConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw InvalidArgumentError("cannot open config '" + path + "'");
  return parse_config(in, std::move(base));
}

inline std::map<std::string, std::string> config_values(const OptimConfig& c) {
  using detail::format_double;
  return {
      {"iterations", std::to_string(c.iterations)},
      {"lr_jacobian", format_double(c.lr_jacobian)},
      {"lr_weight", format_double(c.lr_weight)},
      {"adam_beta1", format_double(c.adam_beta1)},
      {"adam_beta2", format_double(c.adam_beta2)},
      {"adam_epsilon", format_double(c.adam_epsilon)},
      {"lambda_guidance", format_double(c.weights.guidance)},
      {"lambda_landmark", format_double(c.weights.landmark)},
      {"lambda_opacity", format_double(c.weights.opacity)},
      {"width", std::to_string(c.width)},
      {"height", std::to_string(c.height)},
      {"sigma", format_double(c.sigma)},
      {"fov_deg", format_double(c.fov_deg)},
      {"azimuth_min_deg", format_double(c.azimuth_min_deg)},
      {"azimuth_max_deg", format_double(c.azimuth_max_deg)},
      {"elevation_min_deg", format_double(c.elevation_min_deg)},
      {"elevation_max_deg", format_double(c.elevation_max_deg)},
      {"distance_min", format_double(c.distance_min)},
      {"distance_max", format_double(c.distance_max)},
      {"fixed_views", std::to_string(c.fixed_views)},
      {"seed", std::to_string(c.seed)},
      {"checkpoint_interval", std::to_string(c.checkpoint_interval)},
      {"render_interval", std::to_string(c.render_interval)},
      {"symmetry", c.symmetry ? "true" : "false"},
      {"symmetry_axis", std::string(1, c.symmetry_axis)},
      {"symmetry_tolerance", format_double(c.symmetry_tolerance)},
      {"edit_region", std::to_string(c.edit_region)},
      {"prompt", c.prompt},
  };
}

inline std::string config_to_string(const OptimConfig& c, bool with_comments = false) {
  const auto values = config_values(c);
  std::string out;
  for (const auto& [key, doc] : config_key_docs()) {
    if (with_comments) out += "# " + doc + "\n";
    out += key + " = " + values.at(key) + "\n";
  }
  return out;
}

// FNV-1a over the canonical text of every setting that affects the
// trajectory. Run length and output cadence are excluded so a run can be
// resumed with a larger iteration budget.
inline std::uint64_t config_hash(const OptimConfig& c) {
  auto values = config_values(c);
  for (const char* k : {"iterations", "checkpoint_interval", "render_interval"}) values.erase(k);
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [k, v] : values)
    for (const char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
  return h;
}

// ---------------------------------------------------------------------------
// Cameras

// Uniform double in [0, 1) from the top 53 bits; the same on every platform.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform_in(std::mt19937_64& rng, double lo, double hi) {
  const double u = uniform01(rng);
  return lo == hi ? lo : lo + (hi - lo) * u;
}

inline double radians(double deg) { return deg * std::numbers::pi / 180.0; }

inline Camera sample_camera(const OptimConfig& c, std::mt19937_64& rng, const Vec3& center) {
  const double az = uniform_in(rng, c.azimuth_min_deg, c.azimuth_max_deg);
  const double el = uniform_in(rng, c.elevation_min_deg, c.elevation_max_deg);
  const double dist = uniform_in(rng, c.distance_min, c.distance_max);
  return Camera::orbit(center, radians(az), radians(el), dist, c.width, c.height, radians(c.fov_deg));
}

inline std::vector<Camera> fixed_cameras(const OptimConfig& c, const Vec3& center) {
  std::vector<Camera> out;
  const double el = 0.5 * (c.elevation_min_deg + c.elevation_max_deg);
  const double dist = 0.5 * (c.distance_min + c.distance_max);
  for (int k = 0; k < c.fixed_views; ++k) {
    const double az = c.azimuth_min_deg + (c.azimuth_max_deg - c.azimuth_min_deg) * k / c.fixed_views;
    out.push_back(Camera::orbit(center, radians(az), radians(el), dist, c.width, c.height, radians(c.fov_deg)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Textbook Adam with bias correction; t is the 1-based step index.
inline void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                        std::span<double> v, const AdamSettings& s, long t) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size())
    throw InvalidArgumentError("adam_update: shape mismatch");
  if (t < 1) throw InvalidArgumentError("adam_update: step index must be >= 1");
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grads[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    params[i] -= s.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Run state and checkpoints

struct LossRecord {
  int iteration = 0;
  double guidance = 0.0;
  double landmark = 0.0;
  double opacity = 0.0;
  double total = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct RunState {
  JacobianField field;
  JacobianField base;  // values restored on frozen faces
  std::vector<Mat3> m_jacobians, v_jacobians;
  std::vector<double> m_weights, v_weights;
  int iteration = 0;  // completed steps
  std::vector<LossRecord> history;
  std::mt19937_64 rng;
  std::uint64_t config_hash = 0;
};

inline RunState initial_state(const JacobianField& start, const OptimConfig& c) {
  RunState s;
  s.field = start;
  s.base = start;
  s.m_jacobians.assign(start.jacobians.size(), Mat3::Zero());
  s.v_jacobians.assign(start.jacobians.size(), Mat3::Zero());
  s.m_weights.assign(start.weights.size(), 0.0);
  s.v_weights.assign(start.weights.size(), 0.0);
  s.rng.seed(c.seed);
  s.config_hash = config_hash(c);
  return s;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_mats(std::ostream& out, const std::vector<Mat3>& mats) {
  write_pod<std::uint64_t>(out, mats.size());
  for (const Mat3& a : mats)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) write_pod(out, a(r, c));
}

inline std::vector<Mat3> read_mats(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in, "matrix count");
  if (n > (1ULL << 32)) throw IoError("checkpoint: implausible matrix count");
  std::vector<Mat3> out(n);
  for (Mat3& a : out)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a(r, c) = read_pod<double>(in, "matrix entry");
  return out;
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
  write_pod<std::uint64_t>(out, v.size());
  for (double x : v) write_pod(out, x);
}

inline std::vector<double> read_doubles(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in, "vector length");
  if (n > (1ULL << 32)) throw IoError("checkpoint: implausible vector length");
  std::vector<double> v(n);
  for (double& x : v) x = read_pod<double>(in, "vector entry");
  return v;
}

}  // namespace detail

// Binary checkpoint: "JRUN", version, config hash, iteration, current and base
// fields, Adam moments, RNG state (textual), loss history.
inline void write_checkpoint(std::ostream& out, const RunState& s) {
  out.write("JRUN", 4);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, s.config_hash);
  detail::write_pod<std::int64_t>(out, s.iteration);
  write_field(out, s.field);
  write_field(out, s.base);
  detail::write_mats(out, s.m_jacobians);
  detail::write_mats(out, s.v_jacobians);
  detail::write_doubles(out, s.m_weights);
  detail::write_doubles(out, s.v_weights);
  std::ostringstream rng_text;
  rng_text << s.rng;
  const std::string r = rng_text.str();
  detail::write_pod<std::uint64_t>(out, r.size());
  out.write(r.data(), static_cast<std::streamsize>(r.size()));
  detail::write_pod<std::uint64_t>(out, s.history.size());
  for (const LossRecord& h : s.history) {
    detail::write_pod<std::int64_t>(out, h.iteration);
    for (double v : {h.guidance, h.landmark, h.opacity, h.total}) detail::write_pod(out, v);
  }
}

inline RunState read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "JRUN") throw IoError("not a run checkpoint (bad magic)");
  if (const auto version = detail::read_pod<std::uint32_t>(in, "version"); version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  RunState s;
  s.config_hash = detail::read_pod<std::uint64_t>(in, "config hash");
  s.iteration = static_cast<int>(detail::read_pod<std::int64_t>(in, "iteration"));
  s.field = read_field(in);
  s.base = read_field(in);
  s.m_jacobians = detail::read_mats(in);
  s.v_jacobians = detail::read_mats(in);
  s.m_weights = detail::read_doubles(in);
  s.v_weights = detail::read_doubles(in);
  const auto rng_len = detail::read_pod<std::uint64_t>(in, "rng length");
  if (rng_len > (1ULL << 20)) throw IoError("checkpoint: implausible rng state length");
  std::string r(rng_len, '\0');
  in.read(r.data(), static_cast<std::streamsize>(rng_len));
  if (!in) throw IoError("checkpoint: truncated rng state");
  std::istringstream rng_text(r);
  rng_text >> s.rng;
  if (rng_text.fail()) throw IoError("checkpoint: corrupt rng state");
  const auto count = detail::read_pod<std::uint64_t>(in, "history length");
  if (count > (1ULL << 32)) throw IoError("checkpoint: implausible history length");
  s.history.resize(count);
  for (LossRecord& h : s.history) {
    h.iteration = static_cast<int>(detail::read_pod<std::int64_t>(in, "history iteration"));
    h.guidance = detail::read_pod<double>(in, "history");
    h.landmark = detail::read_pod<double>(in, "history");
    h.opacity = detail::read_pod<double>(in, "history");
    h.total = detail::read_pod<double>(in, "history");
  }
  const std::size_t m = s.field.jacobians.size();
  if (s.base.jacobians.size() != m || s.m_jacobians.size() != m || s.v_jacobians.size() != m ||
      s.m_weights.size() != m || s.v_weights.size() != m)
    throw IoError("checkpoint: inconsistent buffer sizes");
  return s;
}

// Written beside the target and renamed into place, so an interrupted write
// never clobbers the previous checkpoint.
inline void save_checkpoint(const RunState& s, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    write_checkpoint(out, s);
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

inline RunState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

inline std::string loss_csv(const std::vector<LossRecord>& history) {
  std::string out = "iteration,guidance,lmk,op,total\n";
  char buf[160];
  for (const LossRecord& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", h.iteration, h.guidance, h.landmark, h.opacity,
                  h.total);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

// Faces whose three vertices all carry `label`.
inline std::vector<bool> region_face_mask(const TriMesh& mesh, int label) {
  if (static_cast<Index>(mesh.region_labels.size()) != mesh.num_vertices())
    throw InvalidArgumentError("mesh has no region labels");
  std::vector<bool> mask(static_cast<std::size_t>(mesh.num_faces()), false);
  for (Index f = 0; f < mesh.num_faces(); ++f)
    mask[f] = mesh.region_labels[mesh.faces(f, 0)] == label && mesh.region_labels[mesh.faces(f, 1)] == label &&
              mesh.region_labels[mesh.faces(f, 2)] == label;
  return mask;
}

inline ReflectionPlane symmetry_plane(const OptimConfig& c, const TriMesh& source) {
  Vec3 n = Vec3::Zero();
  n[c.symmetry_axis - 'x'] = 1.0;
  return ReflectionPlane::through(n, centroid(source.vertices));
}

struct StepRecord {
  LossRecord loss;
  FieldGradient gradient;  // after masking
  Camera camera;
  int view_index = -1;
};

class Optimizer {
 public:
  Optimizer(const TriMesh& source, Guidance& guidance, OptimConfig config)
      : source_(source), guidance_(guidance), config_(std::move(config)) {
    config_.validate();
    if (!config_.face_mask.empty()) {
      mask_ = config_.face_mask;
    } else if (config_.edit_region >= 0) {
      mask_ = region_face_mask(source_, config_.edit_region);
    }
    if (!mask_.empty()) {
      if (static_cast<Index>(mask_.size()) != source_.num_faces())
        throw InvalidArgumentError("face mask has " + std::to_string(mask_.size()) + " entries, mesh has " +
                                   std::to_string(source_.num_faces()) + " faces");
      if (std::find(mask_.begin(), mask_.end(), true) == mask_.end())
        throw InvalidArgumentError("edit region covers no faces");
    }
    system_ = assemble(source_, pinning_for_mask());
    center_ = centroid(source_.vertices);
    if (config_.fixed_views > 0) {
      views_ = fixed_cameras(config_, center_);
      source_renders_.resize(views_.size());
    }
    if (config_.symmetry) {
      plane_ = symmetry_plane(config_, source_);
      const double tol = config_.symmetry_tolerance * bounding_box_diagonal(source_.vertices);
      symmetry_ = build_symmetry_map(source_, plane_, tol);
      face_mirror_ = face_mirror_table(source_, symmetry_);
    }
  }

  const PoissonSystem& system() const { return system_; }
  const OptimConfig& config() const { return config_; }
  const std::vector<bool>& face_mask() const { return mask_; }
  const std::vector<Camera>& views() const { return views_; }
  Vec3 center() const { return center_; }

  RunState initial_state() const { return jacdeform::initial_state(identity_field(source_), config_); }

  VertexMatrix solve(const JacobianField& field) const { return forward_solve(system_, field); }

  StepRecord step(RunState& s) {
    if (s.field.size() != source_.num_faces()) throw InvalidArgumentError("run state does not match the mesh");
    StepRecord rec;
    const VertexMatrix v = solve(s.field);

    if (views_.empty()) {
      rec.camera = sample_camera(config_, s.rng, center_);
    } else {
      rec.view_index = s.iteration % static_cast<int>(views_.size());
      rec.camera = views_[rec.view_index];
    }
    const RasterSettings rs = config_.raster();
    const LossWeights& lw = config_.weights;
    const bool need_render = guidance_.needs_opacity() || lw.opacity > 0.0;
    OpacityMap rendered;
    if (need_render) rendered = render_opacity(v, source_.faces, rec.camera, rs);

    GuidanceContext ctx;
    ctx.vertices = &v;
    ctx.source = &source_;
    ctx.camera = rec.camera;
    ctx.view_index = rec.view_index;
    ctx.opacity = need_render ? &rendered : nullptr;
    ctx.raster = rs;
    ctx.iteration = s.iteration;
    ctx.prompt = config_.prompt;
    GuidanceResult g = guidance_.evaluate(ctx);
    g.validate(source_.num_vertices(), rec.camera);

    DenseMatrix d_vertices = DenseMatrix::Zero(v.rows(), 3);
    OpacityMap d_opacity;
    bool have_d_opacity = false;
    if (lw.guidance > 0.0) {
      if (g.vertex_gradient) d_vertices += lw.guidance * *g.vertex_gradient;
      if (g.opacity_gradient) {
        d_opacity = *g.opacity_gradient;
        for (double& x : d_opacity.values) x *= lw.guidance;
        have_d_opacity = true;
      }
    }

    double lmk = 0.0;
    if (lw.landmark > 0.0 && !source_.landmarks.empty()) {
      const VertexLoss l = landmark_loss(source_, v);
      lmk = l.loss;
      d_vertices += lw.landmark * l.gradient;
    }

    double op = 0.0;
    if (lw.opacity > 0.0) {
      const OpacityLoss l = opacity_loss(source_render(rec.camera, rec.view_index), rendered);
      op = l.loss;
      if (!have_d_opacity) {
        d_opacity = OpacityMap(rendered.width, rendered.height);
        have_d_opacity = true;
      }
      for (std::size_t i = 0; i < l.gradient.values.size(); ++i) d_opacity.values[i] += lw.opacity * l.gradient.values[i];
    }
    if (have_d_opacity) d_vertices += backward_opacity(v, source_.faces, rec.camera, rs, d_opacity);

    rec.loss = {s.iteration, g.loss, lmk, op, total_loss(lw, g.loss, lmk, op)};
    if (!std::isfinite(rec.loss.total))
      throw NumericalError("non-finite loss at iteration " + std::to_string(s.iteration));

    rec.gradient = backward(system_, s.field, d_vertices);
    if (!mask_.empty())
      for (Index f = 0; f < s.field.size(); ++f)
        if (!mask_[f]) {
          rec.gradient.d_jacobians[f].setZero();
          rec.gradient.d_weights[f] = 0.0;
        }

    const long t = s.iteration + 1;
    AdamSettings aj{config_.lr_jacobian, config_.adam_beta1, config_.adam_beta2, config_.adam_epsilon};
    AdamSettings aw{config_.lr_weight, config_.adam_beta1, config_.adam_beta2, config_.adam_epsilon};
    for (Index f = 0; f < s.field.size(); ++f)
      adam_update({s.field.jacobians[f].data(), 9}, {rec.gradient.d_jacobians[f].data(), 9},
                  {s.m_jacobians[f].data(), 9}, {s.v_jacobians[f].data(), 9}, aj, t);
    adam_update(s.field.weights, rec.gradient.d_weights, s.m_weights, s.v_weights, aw, t);

    if (config_.symmetry) symmetrize(s.field);
    if (!mask_.empty()) s.field = apply_mask(s.field, s.base, mask_);
    if (!s.field.all_finite()) throw NumericalError("non-finite parameters after iteration " + std::to_string(s.iteration));

    s.history.push_back(rec.loss);
    ++s.iteration;
    return rec;
  }

  // Mirror-averages (J, w) over mirrored face pairs; the mirror of J is R J R.
  void symmetrize(JacobianField& field) const {
    const Mat3 r = plane_.linear();
    for (Index f = 0; f < field.size(); ++f) {
      const Index g = face_mirror_[f];
      if (g < f) continue;  // unpaired, or handled with its partner
      const Mat3 avg = 0.5 * (field.jacobians[f] + r * field.jacobians[g] * r);
      const double w = 0.5 * (field.weights[f] + field.weights[g]);
      field.jacobians[f] = avg;
      field.weights[f] = w;
      if (g != f) {
        field.jacobians[g] = r * avg * r;
        field.weights[g] = w;
      }
    }
  }

 private:
  // Local edits keep the frozen part in place: the gauge centroid is taken
  // over vertices not touched by any optimized face.
  Pinning pinning_for_mask() const {
    Pinning p;
    if (mask_.empty()) return p;
    std::vector<bool> touched(static_cast<std::size_t>(source_.num_vertices()), false);
    for (Index f = 0; f < source_.num_faces(); ++f)
      if (mask_[f])
        for (int k = 0; k < 3; ++k) touched[source_.faces(f, k)] = true;
    for (Index i = 0; i < source_.num_vertices(); ++i)
      if (!touched[i]) p.gauge_vertices.push_back(i);
    if (p.gauge_vertices.empty()) throw InvalidArgumentError("edit region covers the whole mesh");
    p.anchor_vertex = p.gauge_vertices.front();
    return p;
  }

  const OpacityMap& source_render(const Camera& cam, int view) {
    if (view >= 0) {
      if (!source_renders_[view]) source_renders_[view] = render_opacity(source_.vertices, source_.faces, cam, config_.raster());
      return *source_renders_[view];
    }
    scratch_ = render_opacity(source_.vertices, source_.faces, cam, config_.raster());
    return scratch_;
  }

  const TriMesh& source_;
  Guidance& guidance_;
  OptimConfig config_;
  std::vector<bool> mask_;
  PoissonSystem system_;
  Vec3 center_ = Vec3::Zero();
  std::vector<Camera> views_;
  std::vector<std::optional<OpacityMap>> source_renders_;
  OpacityMap scratch_;
  ReflectionPlane plane_;
  SymmetryMap symmetry_;
  std::vector<Index> face_mirror_;
};

struct RunHooks {
  std::string checkpoint_path;  // empty: no checkpoints
  // Called after every step with the state and the step's record.
  std::function<void(const RunState&, const StepRecord&)> on_step;
};

struct RunResult {
  TriMesh deformed;
  JacobianField field;
  std::vector<LossRecord> history;
  RunState state;
};

// Runs until config.iterations steps have completed, continuing from `resume`
// when given.
inline RunResult run(const TriMesh& source, Guidance& guidance, const OptimConfig& config, const RunHooks& hooks = {},
                     std::optional<RunState> resume = std::nullopt) {
  Optimizer opt(source, guidance, config);
  RunState s = resume ? std::move(*resume) : opt.initial_state();
  if (s.config_hash != config_hash(opt.config()))
    throw InvalidArgumentError("checkpoint was written with a different configuration");
  if (s.field.size() != source.num_faces())
    throw MeshError("checkpoint has " + std::to_string(s.field.size()) + " faces, mesh has " +
                    std::to_string(source.num_faces()));
  while (s.iteration < config.iterations) {
    const StepRecord rec = opt.step(s);
    if (hooks.on_step) hooks.on_step(s, rec);
    if (!hooks.checkpoint_path.empty() && config.checkpoint_interval > 0 &&
        s.iteration % config.checkpoint_interval == 0)
      save_checkpoint(s, hooks.checkpoint_path);
  }
  if (!hooks.checkpoint_path.empty()) save_checkpoint(s, hooks.checkpoint_path);
  RunResult out;
  out.deformed = with_vertices(source, opt.solve(s.field));
  out.field = s.field;
  out.history = s.history;
  out.state = std::move(s);
  return out;
}

}  // namespace jacdeform
