// jacdeform command-line tool: deform, edit, morph, metrics, render, config,
// generate and replay.

#include "jacdeform/jacdeform.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace jacdeform;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kGuidanceUrlEnv = "JACDEFORM_GUIDANCE_URL";

// ---------------------------------------------------------------------------
// Hashing

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// SHA-1 of "blob <size>\0<content>", as `git hash-object` computes it.
std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw IoError("cannot allocate digest context");
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("SHA-1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string hash_file(const std::string& path) { return git_blob_sha1(read_file(path)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Run description shared by deform, edit and replay

struct GuidanceSpec {
  std::string kind;  // landmarks, silhouette, region, url
  std::string path;  // landmarks or silhouette target file
  std::string url;
  int region_label = -1;
  double region_scale = 1.0;
};

struct RunSpec {
  std::string command = "deform";
  std::string mesh;
  std::string landmarks;  // source landmark indices for the landmark term
  std::string labels;     // per-vertex region labels
  std::string mask;       // per-face 0/1 optimization mask
  std::string resume;     // checkpoint to continue from
  GuidanceSpec guidance;
  OptimConfig config;
};

json spec_to_json(const RunSpec& s) {
  json g = {{"kind", s.guidance.kind}};
  if (!s.guidance.path.empty()) g["path"] = s.guidance.path;
  if (!s.guidance.url.empty()) g["url"] = s.guidance.url;
  if (s.guidance.kind == "region") {
    g["label"] = s.guidance.region_label;
    g["scale"] = detail::format_double(s.guidance.region_scale);
  }
  return {{"command", s.command}, {"mesh", s.mesh},     {"landmarks", s.landmarks}, {"labels", s.labels},
          {"mask", s.mask},       {"resume", s.resume}, {"guidance", g}};
}

RunSpec spec_from_json(const json& j) {
  RunSpec s;
  const json& run = j.at("run");
  s.command = run.at("command").get<std::string>();
  s.mesh = run.at("mesh").get<std::string>();
  s.landmarks = run.value("landmarks", "");
  s.labels = run.value("labels", "");
  s.mask = run.value("mask", "");
  s.resume = run.value("resume", "");
  const json& g = run.at("guidance");
  s.guidance.kind = g.at("kind").get<std::string>();
  s.guidance.path = g.value("path", "");
  s.guidance.url = g.value("url", "");
  s.guidance.region_label = g.value("label", -1);
  if (g.contains("scale")) s.guidance.region_scale = detail::parse_double(g["scale"].get<std::string>(), "scale");
  for (const auto& [key, value] : j.at("config").items()) set_config_value(s.config, key, value.get<std::string>());
  return s;
}

// "vertex x y z" per line; '#' starts a comment.
std::vector<std::pair<Index, Vec3>> load_landmark_targets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgumentError("cannot open landmark target file '" + path + "'");
  std::vector<std::pair<Index, Vec3>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    long v = 0;
    Vec3 p;
    if (!(ss >> v)) continue;
    if (!(ss >> p.x() >> p.y() >> p.z()))
      throw InvalidArgumentError(path + ":" + std::to_string(line_no) + ": expected 'vertex x y z'");
    out.emplace_back(static_cast<Index>(v), p);
  }
  return out;
}

TriMesh load_source(const RunSpec& s) {
  TriMesh m = load_obj(s.mesh);
  if (!s.landmarks.empty()) m.landmarks = load_landmarks(s.landmarks, m.num_vertices());
  if (!s.labels.empty()) m.region_labels = load_region_labels(s.labels, m.num_vertices());
  return m;
}

std::vector<bool> load_mask(const std::string& path, Index num_faces) {
  const auto values = detail::read_int_lines(path);
  if (static_cast<Index>(values.size()) != num_faces)
    throw InvalidArgumentError("mask file '" + path + "' has " + std::to_string(values.size()) + " entries for " +
                               std::to_string(num_faces) + " faces");
  std::vector<bool> mask(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) mask[i] = values[i] != 0;
  return mask;
}

std::unique_ptr<Guidance> make_guidance(const GuidanceSpec& g, const TriMesh& source, const OptimConfig& c) {
  if (g.kind == "landmarks") return builtin_guidance_target_landmarks(load_landmark_targets(g.path), source);
  if (g.kind == "silhouette") return std::make_unique<TargetSilhouetteGuidance>(load_obj(g.path));
  if (g.kind == "region") {
    if (g.region_label < 0) throw InvalidArgumentError("region guidance needs a label (LABEL:SCALE or --region)");
    return builtin_guidance_region_scale(source, g.region_label, g.region_scale);
  }
  if (g.kind == "url") return std::make_unique<RemoteGuidance>(g.url, c.prompt);
  throw InvalidArgumentError("unknown guidance kind '" + g.kind + "'");
}

Camera diagnostic_camera(const OptimConfig& c, const Vec3& center) {
  return Camera::orbit(center, 0.0, 0.0, 0.5 * (c.distance_min + c.distance_max), c.width, c.height,
                       radians(c.fov_deg));
}

void write_diagnostics(const fs::path& dir, const std::string& stem, const TriMesh& mesh, const VertexMatrix& v,
                       const JacobianField& field, const Camera& cam) {
  fs::create_directories(dir);
  write_png((dir / (stem + "_normals.png")).string(), render_diagnostic(v, mesh.faces, cam, DiagnosticMode::Normals));
  write_png((dir / (stem + "_weights.png")).string(),
            render_diagnostic(v, mesh.faces, cam, DiagnosticMode::WeightColormap, &field.weights));
}

json loss_json(const LossRecord& h) {
  return {{"iteration", h.iteration}, {"guidance", h.guidance}, {"landmark", h.landmark}, {"opacity", h.opacity},
          {"total", h.total}};
}

// Runs the optimization described by `spec` into `out`, writes the manifest
// and returns it.
json execute_run(const RunSpec& spec, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  TriMesh source = load_source(spec);
  OptimConfig config = spec.config;
  if (!spec.mask.empty()) config.face_mask = load_mask(spec.mask, source.num_faces());
  auto guidance = make_guidance(spec.guidance, source, config);

  std::optional<RunState> resume;
  if (!spec.resume.empty()) resume = load_checkpoint(spec.resume);

  fs::create_directories(out);
  const fs::path renders = out / "renders";
  RunHooks hooks;
  hooks.checkpoint_path = (out / "checkpoint.jckpt").string();

  // A second optimizer instance only provides the forward solve (same
  // pinning as the run) for diagnostic renders.
  ZeroGuidance none;
  std::optional<Optimizer> viewer;
  if (config.render_interval > 0) {
    viewer.emplace(source, none, config);
    const Camera cam = diagnostic_camera(config, viewer->center());
    hooks.on_step = [&, cam](const RunState& s, const StepRecord&) {
      if (s.iteration % config.render_interval != 0) return;
      char stem[32];
      std::snprintf(stem, sizeof stem, "iter_%06d", s.iteration);
      write_diagnostics(renders, stem, source, viewer->solve(s.field), s.field, cam);
    };
  }

  const RunResult result = run(source, *guidance, config, hooks, std::move(resume));

  save_obj(result.deformed, (out / "deformed.obj").string());
  save_field(result.field, (out / "field.jfield").string());
  {
    std::ofstream csv(out / "loss.csv", std::ios::binary);
    if (!csv) throw IoError("cannot write loss.csv");
    csv << loss_csv(result.history);
  }
  write_diagnostics(renders, "final", source, result.deformed.vertices, result.field,
                    diagnostic_camera(config, centroid(source.vertices)));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json inputs = json::object();
  const auto add_input = [&](const char* role, const std::string& path) {
    if (!path.empty()) inputs[role] = {{"path", path}, {"sha1", hash_file(path)}};
  };
  add_input("mesh", spec.mesh);
  add_input("landmarks", spec.landmarks);
  add_input("labels", spec.labels);
  add_input("mask", spec.mask);
  add_input("resume", spec.resume);
  if (!spec.guidance.path.empty()) add_input("guidance", spec.guidance.path);

  json outputs = json::object();
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(out))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const fs::path& f : files) outputs[fs::relative(f, out).generic_string()] = hash_file(f.string());

  json config_json = json::object();
  for (const auto& [k, v] : config_values(spec.config)) config_json[k] = v;

  json manifest = {{"tool", "jacdeform"},
                   {"version", kVersion},
                   {"run", spec_to_json(spec)},
                   {"config", config_json},
                   {"config_hash", hex64(config_hash(spec.config))},
                   {"guidance", guidance->describe()},
                   {"inputs", inputs},
                   {"outputs", outputs},
                   {"iterations", result.state.iteration},
                   {"timing", {{"wall_seconds", seconds}}},
                   {"final_loss", result.history.empty() ? json(nullptr) : loss_json(result.history.back())}};
  std::ofstream(out / "manifest.json") << manifest.dump(2) << '\n';
  return manifest;
}

// ---------------------------------------------------------------------------
// Option plumbing

struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> prompt;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o, bool required) {
  auto* opt = cmd->add_option("--config", o.file, "flat key = value config file");
  if (required) opt->required();
  cmd->add_option("--set", o.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--iterations", o.iterations, "override the iteration count");
  cmd->add_option("--seed", o.seed, "override the random seed");
  cmd->add_option("--prompt", o.prompt, "goal string passed to the guidance");
}

// Defaults, then the file, then --set, then the dedicated flags.
OptimConfig resolve_config(const ConfigOptions& o) {
  OptimConfig c = o.file.empty() ? OptimConfig{} : load_config(o.file);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgumentError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.iterations) c.iterations = *o.iterations;
  if (o.seed) c.seed = *o.seed;
  if (o.prompt) c.prompt = *o.prompt;
  c.validate();
  return c;
}

struct GuidanceOptions {
  std::string landmarks, silhouette, region, url;
};

void add_guidance_options(CLI::App* cmd, GuidanceOptions& g) {
  cmd->add_option("--guidance-landmarks", g.landmarks, "target landmark file ('vertex x y z' per line)");
  cmd->add_option("--guidance-silhouette", g.silhouette, "target mesh whose silhouette is matched");
  cmd->add_option("--guidance-region", g.region, "region scale target, SCALE or LABEL:SCALE");
  cmd->add_option("--guidance-url", g.url, std::string("guidance server URL (default from ") + kGuidanceUrlEnv + ")");
}

GuidanceSpec resolve_guidance(const GuidanceOptions& o, int default_label) {
  GuidanceSpec g;
  int given = 0;
  if (!o.landmarks.empty()) ++given, g.kind = "landmarks", g.path = o.landmarks;
  if (!o.silhouette.empty()) ++given, g.kind = "silhouette", g.path = o.silhouette;
  if (!o.url.empty()) ++given, g.kind = "url", g.url = o.url;
  if (!o.region.empty()) {
    ++given;
    g.kind = "region";
    g.region_label = default_label;
    std::string scale = o.region;
    if (const auto colon = o.region.find(':'); colon != std::string::npos) {
      g.region_label = detail::parse_int<int>(o.region.substr(0, colon), "--guidance-region");
      scale = o.region.substr(colon + 1);
    }
    g.region_scale = detail::parse_double(scale, "--guidance-region");
  }
  if (given > 1) throw InvalidArgumentError("give exactly one guidance flag");
  if (given == 0) {
    const char* env = std::getenv(kGuidanceUrlEnv);
    if (!env || !*env)
      throw InvalidArgumentError(std::string("one of --guidance-landmarks, --guidance-silhouette, --guidance-region, "
                                             "--guidance-url is required (or set ") +
                                 kGuidanceUrlEnv + ")");
    g.kind = "url";
    g.url = env;
  }
  return g;
}

Camera camera_from(const Vec3& center, double azimuth_deg, double elevation_deg, double distance, int width,
                   int height, double fov_deg) {
  Camera c = Camera::orbit(center, radians(azimuth_deg), radians(elevation_deg), distance, width, height,
                           radians(fov_deg));
  c.validate();
  return c;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::Mesh: return "mesh";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Guidance: return "guidance";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

void report_error(const std::string& command, const std::string& kind, int code, const std::string& message) {
  std::cerr << json{{"error", kind}, {"exit_code", code}, {"command", command}, {"message", message}}.dump()
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weighted-Jacobian mesh deformation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // deform / edit
  RunSpec run_spec;
  std::string out_dir;
  ConfigOptions config_opts;
  GuidanceOptions guidance_opts;
  int edit_region = -1;

  auto* deform = app.add_subcommand("deform", "optimize a Jacobian field under one guidance");
  auto* edit = app.add_subcommand("edit", "optimize only the faces of one region");
  for (auto* cmd : {deform, edit}) {
    cmd->add_option("--mesh", run_spec.mesh, "source OBJ")->required();
    cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_option("--landmarks", run_spec.landmarks, "source landmark indices, one per line");
    cmd->add_option("--labels", run_spec.labels, "per-vertex region labels, one per line");
    cmd->add_option("--resume", run_spec.resume, "checkpoint to continue from");
    add_config_options(cmd, config_opts, true);
    add_guidance_options(cmd, guidance_opts);
  }
  auto* region_opt = edit->add_option("--region", edit_region, "region label whose faces are optimized");
  auto* mask_opt = edit->add_option("--mask", run_spec.mask, "per-face 0/1 mask file");
  region_opt->excludes(mask_opt);

  // replay
  std::string manifest_path;
  auto* replay = app.add_subcommand("replay", "re-run a manifest and compare output hashes");
  replay->add_option("--manifest", manifest_path, "manifest.json of a previous run")->required();
  replay->add_option("--out", out_dir, "output directory for the replay")->required();

  // morph
  std::string mesh_path, field_a, field_b;
  int steps = 2;
  auto* morph = app.add_subcommand("morph", "solve frames interpolating two fields");
  morph->add_option("--mesh", mesh_path, "source OBJ")->required();
  morph->add_option("--field-a", field_a, "field at t = 0")->required();
  morph->add_option("--field-b", field_b, "field at t = 1")->required();
  morph->add_option("--steps", steps, "number of frames")->required();
  morph->add_option("--out", out_dir, "output directory")->required();

  // metrics
  bool brute = false;
  std::string json_out;
  auto* metrics = app.add_subcommand("metrics", "report mesh quality and self-intersections");
  metrics->add_option("--mesh", mesh_path, "OBJ to analyze")->required();
  metrics->add_flag("--brute", brute, "all-pairs intersection test instead of the BVH");
  metrics->add_option("--out", json_out, "also write the report to this file");

  // render
  std::string mode = "normals", field_path, image_out;
  double azimuth = 0.0, elevation = 0.0, distance = 3.0, fov = 40.0, sigma = 1.0, range = 1.0;
  int width = 256, height = 256;
  auto* render = app.add_subcommand("render", "render a mesh or its deformation");
  render->add_option("--mesh", mesh_path, "source OBJ")->required();
  render->add_option("--mode", mode, "normals, flat, weights or opacity")
      ->check(CLI::IsMember({"normals", "flat", "weights", "opacity"}));
  render->add_option("--field", field_path, "field to solve and color by");
  render->add_option("--out", image_out, "PNG, or PFM/PGM for opacity")->required();
  render->add_option("--azimuth", azimuth, "degrees about +y");
  render->add_option("--elevation", elevation, "degrees above the xz-plane");
  render->add_option("--distance", distance, "distance from the mesh centroid");
  render->add_option("--fov", fov, "vertical field of view in degrees");
  render->add_option("--width", width, "image width");
  render->add_option("--height", height, "image height");
  render->add_option("--sigma", sigma, "soft rasterizer sharpness in pixels (opacity)");
  render->add_option("--range", range, "weight colormap half-range around 1");

  // config
  std::string check_path;
  bool docs = false;
  ConfigOptions show_opts;
  auto* config = app.add_subcommand("config", "print, document or check configuration");
  config->add_option("--check", check_path, "validate a config file and print it canonically");
  config->add_flag("--docs", docs, "list every key with its meaning");
  config->add_option("--set", show_opts.sets, "override a key (key=value) before printing");

  // generate
  std::string shape = "icosphere", obj_out, labels_out;
  int subdivisions = 3, nx = 10, ny = 10;
  std::vector<double> radii = {1.0, 1.0, 1.0};
  double crumple_amp = 0.0, cap_height = 0.5;
  std::uint64_t gen_seed = 0;
  auto* generate = app.add_subcommand("generate", "write a primitive mesh");
  generate->add_option("--shape", shape, "icosphere, ellipsoid, cube, grid or triangle")
      ->check(CLI::IsMember({"icosphere", "ellipsoid", "cube", "grid", "triangle"}));
  generate->add_option("--subdivisions", subdivisions, "sphere subdivision level");
  generate->add_option("--radii", radii, "ellipsoid radii")->expected(3)->delimiter(',');
  generate->add_option("--nx", nx, "grid cells along x");
  generate->add_option("--ny", ny, "grid cells along y");
  generate->add_option("--crumple", crumple_amp, "random vertex jitter amplitude");
  generate->add_option("--seed", gen_seed, "jitter seed");
  generate->add_option("--cap-labels", labels_out, "write labels: 1 where y > cap height, else 0");
  generate->add_option("--cap-height", cap_height, "threshold for --cap-labels");
  generate->add_option("--out", obj_out, "output OBJ")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto parsed = app.get_subcommands();
    const CLI::App* scope = parsed.empty() ? &app : parsed.front();
    std::cerr << "error: " << e.what() << "\n\n" << scope->help();
    return 2;
  }

  std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "deform" || command == "edit") {
      run_spec.command = command;
      run_spec.config = resolve_config(config_opts);
      if (command == "edit") {
        if (edit_region < 0 && run_spec.mask.empty()) throw InvalidArgumentError("edit needs --region or --mask");
        if (edit_region >= 0) run_spec.config.edit_region = edit_region;
        if (run_spec.labels.empty() && edit_region >= 0)
          throw InvalidArgumentError("--region needs per-vertex --labels");
      }
      run_spec.guidance = resolve_guidance(guidance_opts, run_spec.config.edit_region);
      const json manifest = execute_run(run_spec, out_dir);
      print_json({{"out", out_dir}, {"iterations", manifest["iterations"]}, {"final_loss", manifest["final_loss"]}});
      return 0;
    }

    if (command == "replay") {
      json recorded;
      try {
        recorded = json::parse(read_file(manifest_path));
      } catch (const json::exception& e) {
        throw InvalidArgumentError("manifest '" + manifest_path + "' is not valid JSON: " + e.what());
      }
      RunSpec spec;
      try {
        spec = spec_from_json(recorded);
      } catch (const json::exception& e) {
        throw InvalidArgumentError("manifest '" + manifest_path + "' is incomplete: " + e.what());
      }
      for (const auto& [role, input] : recorded.at("inputs").items()) {
        const std::string path = input.at("path");
        if (hash_file(path) != input.at("sha1").get<std::string>())
          throw InvalidArgumentError("input '" + path + "' (" + role + ") changed since the recorded run");
      }
      const json fresh = execute_run(spec, out_dir);
      json mismatched = json::array();
      for (const auto& [name, sha] : recorded.at("outputs").items())
        if (!fresh["outputs"].contains(name) || fresh["outputs"][name] != sha) mismatched.push_back(name);
      for (const auto& [name, sha] : fresh["outputs"].items())
        if (!recorded["outputs"].contains(name)) mismatched.push_back(name);
      print_json({{"identical", mismatched.empty()}, {"mismatched", mismatched}});
      return mismatched.empty() ? 0 : 1;
    }

    if (command == "morph") {
      if (steps < 1) throw InvalidArgumentError("--steps must be at least 1");
      const TriMesh mesh = load_obj(mesh_path);
      const JacobianField a = load_field(field_a);
      const JacobianField b = load_field(field_b);
      for (const auto* f : {&a, &b})
        if (f->size() != mesh.num_faces())
          throw MeshError("field has " + std::to_string(f->size()) + " faces, mesh has " +
                          std::to_string(mesh.num_faces()));
      const PoissonSystem sys = assemble(mesh);
      fs::create_directories(out_dir);
      json frames = json::array();
      for (int i = 0; i < steps; ++i) {
        const double t = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03d.obj", i);
        save_obj(with_vertices(mesh, forward_solve(sys, interpolate(a, b, t))), (fs::path(out_dir) / name).string());
        frames.push_back({{"t", t}, {"path", name}});
      }
      print_json({{"frames", frames}});
      return 0;
    }

    if (command == "metrics") {
      const TriMesh mesh = load_obj(mesh_path);
      const json report = to_json(quality_report(mesh, brute ? IntersectionMode::Brute : IntersectionMode::Bvh));
      if (!json_out.empty()) std::ofstream(json_out) << report.dump(2) << '\n';
      print_json(report);
      return 0;
    }

    if (command == "render") {
      const TriMesh mesh = load_obj(mesh_path);
      std::optional<JacobianField> field;
      if (!field_path.empty()) {
        field = load_field(field_path);
        if (field->size() != mesh.num_faces())
          throw MeshError("field has " + std::to_string(field->size()) + " faces, mesh has " +
                          std::to_string(mesh.num_faces()));
      }
      if (mode == "weights" && !field) throw InvalidArgumentError("weights mode needs --field");
      const VertexMatrix v = field ? forward_solve(assemble(mesh), *field) : mesh.vertices;
      const Camera cam = camera_from(centroid(mesh.vertices), azimuth, elevation, distance, width, height, fov);
      if (mode == "opacity") {
        RasterSettings rs;
        rs.sigma = sigma;
        const OpacityMap map = render_opacity(v, mesh.faces, cam, rs);
        const std::string ext = fs::path(image_out).extension().string();
        if (ext == ".pgm") write_pgm(image_out, map);
        else if (ext == ".pfm") write_pfm(image_out, map);
        else throw InvalidArgumentError("opacity output must end in .pfm or .pgm");
        print_json({{"out", image_out}, {"mean_opacity", map.mean()}});
        return 0;
      }
      const DiagnosticMode dm = mode == "normals" ? DiagnosticMode::Normals
                                : mode == "flat"  ? DiagnosticMode::Flat
                                                  : DiagnosticMode::WeightColormap;
      write_png(image_out, render_diagnostic(v, mesh.faces, cam, dm, field ? &field->weights : nullptr, range));
      print_json({{"out", image_out}});
      return 0;
    }

    if (command == "config") {
      if (docs) {
        for (const auto& [key, doc] : config_key_docs()) std::cout << key << "\t" << doc << '\n';
        return 0;
      }
      ConfigOptions o = show_opts;
      o.file = check_path;
      const OptimConfig c = resolve_config(o);
      std::cout << config_to_string(c, true) << "# hash " << hex64(config_hash(c)) << '\n';
      return 0;
    }

    if (command == "generate") {
      TriMesh m;
      if (shape == "icosphere") m = make_icosphere(subdivisions);
      else if (shape == "ellipsoid") m = make_ellipsoid(subdivisions, Vec3(radii[0], radii[1], radii[2]));
      else if (shape == "cube") m = make_cube();
      else if (shape == "grid") m = make_grid(nx, ny);
      else m = make_triangle();
      if (crumple_amp > 0.0) m = crumple(m, crumple_amp, gen_seed);
      save_obj(m, obj_out);
      if (!labels_out.empty()) {
        std::vector<int> labels(static_cast<std::size_t>(m.num_vertices()));
        for (Index i = 0; i < m.num_vertices(); ++i) labels[i] = m.vertices(i, 1) > cap_height ? 1 : 0;
        save_int_lines(labels, labels_out);
      }
      print_json({{"out", obj_out}, {"vertices", m.num_vertices()}, {"faces", m.num_faces()}});
      return 0;
    }
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    report_error(command, kind_name(e.kind()), code, e.what());
    return code;
  } catch (const std::exception& e) {
    report_error(command, "internal", 1, e.what());
    return 1;
  }
  return 0;
}
