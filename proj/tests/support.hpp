#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <thread>

#include "jacdeform/jacdeform.hpp"

namespace testing_support {

using namespace jacdeform;

// |a - b| relative to the larger magnitude, with an absolute floor so exact
// zeros on both sides compare equal.
inline double rel_error(double a, double b, double floor = 1e-14) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Mat3 random_matrix(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Mat3 a;
  for (int i = 0; i < 9; ++i) a.data()[i] = u(rng);
  return a;
}

// Random matrix kept away from singular: I + small perturbation, then scaled.
inline Mat3 random_invertible(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> s(0.5, 2.0);
  return s(rng) * (Mat3::Identity() + random_matrix(rng, 0.4));
}

inline JacobianField random_field(Index m, std::mt19937_64& rng, double jitter = 0.2) {
  std::uniform_real_distribution<double> u(-jitter, jitter);
  JacobianField f = identity_field(m);
  for (Index i = 0; i < m; ++i) {
    f.jacobians[i] += random_matrix(rng, jitter);
    f.weights[i] += u(rng);
  }
  return f;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("jacdeform_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Non-planar grid patch (2 * nx * ny faces; 20 by default) on a bumpy height field.
inline TriMesh bumpy_patch(int nx = 5, int ny = 2) {
  TriMesh m = make_grid(nx, ny, 2.0, 1.0);
  for (Index i = 0; i < m.num_vertices(); ++i) {
    const double x = m.vertices(i, 0), y = m.vertices(i, 1);
    m.vertices(i, 2) = 0.3 * std::sin(2.1 * x + 0.4) * std::cos(1.7 * y) + 0.1 * x * y;
  }
  return m;
}

// Grid in z = 0 with `count` small vertical triangles, each piercing the
// interior of a distinct grid face and touching nothing else.
inline TriMesh pierced_grid(int count) {
  TriMesh g = make_grid(10, 10, 10.0, 10.0);
  const Index base_v = g.num_vertices(), base_f = g.num_faces();
  g.vertices.conservativeResize(base_v + 3 * count, 3);
  g.faces.conservativeResize(base_f + count, 3);
  for (int k = 0; k < count; ++k) {
    const double i = 1 + k, j = (3 * k) % 10;
    g.vertices.row(base_v + 3 * k) << i + 0.6, j + 0.2, -0.3;
    g.vertices.row(base_v + 3 * k + 1) << i + 0.8, j + 0.2, -0.3;
    g.vertices.row(base_v + 3 * k + 2) << i + 0.7, j + 0.2, 0.4;
    g.faces.row(base_f + k) << base_v + 3 * k, base_v + 3 * k + 1, base_v + 3 * k + 2;
  }
  g.name = "pierced_grid";
  return g;
}

// In-process HTTP server on an ephemeral loopback port.
class MockServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit MockServer(Handler handler) {
    server_.Post("/guidance", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/guidance"; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace testing_support
