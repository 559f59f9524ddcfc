#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "jacdeform/errors.hpp"
#include "jacdeform/objectives.hpp"
#include "jacdeform/raster.hpp"

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that collides
// with Eigen parameter names.
#include <httplib.h>
#include <json.hpp>

namespace jacdeform {

inline constexpr const char* kGuidanceProtocolVersion = "1";

// ---------------------------------------------------------------------------
// base64 (RFC 4648, padded)

inline std::string base64_encode(const std::uint8_t* data, std::size_t size) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((size + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < size; i += 3) {
    const std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  if (i < size) {
    std::uint32_t v = data[i] << 16;
    if (i + 1 < size) v |= data[i + 1] << 8;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < size ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw GuidanceError("malformed base64 payload: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0 || (v[k] = value(c)) < 0) throw GuidanceError("malformed base64 payload");
    }
    const std::uint32_t word = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(word >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(word >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(word));
  }
  return out;
}

static_assert(std::endian::native == std::endian::little, "wire payloads assume a little-endian host");

// Row-major float64 little-endian, base64 encoded. Lossless for every double.
inline std::string encode_float_payload(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(double));
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  return base64_encode(bytes.data(), bytes.size());
}

inline std::vector<double> decode_float_payload(std::string_view text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % sizeof(double) != 0) throw GuidanceError("float payload size is not a multiple of 8 bytes");
  std::vector<double> out(bytes.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

// ---------------------------------------------------------------------------
// Messages

struct GuidanceRequest {
  std::string version = kGuidanceProtocolVersion;
  std::string prompt;
  int iteration = 0;
  Camera camera;
  OpacityMap opacity;
  std::vector<std::uint8_t> diagnostic_rgb;  // optional, width * height * 3
};

enum class GuidanceStatus { Ok, Retry, Fatal };

struct GuidanceResponse {
  GuidanceStatus status = GuidanceStatus::Ok;
  double loss = 0.0;
  OpacityMap gradient;
  std::string message;
};

namespace detail {

inline nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw GuidanceError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace detail

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"position", detail::vec_json(c.position)}, {"target", detail::vec_json(c.target)},
          {"up", detail::vec_json(c.up)},             {"fov_y", c.fov_y},
          {"width", c.width},                         {"height", c.height},
          {"near", c.near_plane},                     {"far", c.far_plane}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.position = detail::json_vec(j.at("position"));
  c.target = detail::json_vec(j.at("target"));
  c.up = detail::json_vec(j.at("up"));
  c.fov_y = j.at("fov_y").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.near_plane = j.value("near", 0.01);
  c.far_plane = j.value("far", 100.0);
  return c;
}

inline std::string request_to_json(const GuidanceRequest& r) {
  nlohmann::json j = {{"version", r.version},
                      {"prompt", r.prompt},
                      {"iteration", r.iteration},
                      {"camera", camera_to_json(r.camera)},
                      {"width", r.opacity.width},
                      {"height", r.opacity.height},
                      {"opacity_b64", encode_float_payload(r.opacity.values)}};
  if (!r.diagnostic_rgb.empty()) j["diagnostic_rgb_b64"] = base64_encode(r.diagnostic_rgb.data(), r.diagnostic_rgb.size());
  return j.dump();
}

// Server-side parse; throws GuidanceError on malformed input.
inline GuidanceRequest request_from_json(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    GuidanceRequest r;
    r.version = j.at("version").get<std::string>();
    r.prompt = j.value("prompt", "");
    r.iteration = j.value("iteration", 0);
    r.camera = camera_from_json(j.at("camera"));
    const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
    if (w < 1 || h < 1) throw GuidanceError("request dimensions must be positive");
    r.opacity = OpacityMap(w, h);
    r.opacity.values = decode_float_payload(j.at("opacity_b64").get<std::string>());
    if (r.opacity.values.size() != static_cast<std::size_t>(w) * h)
      throw GuidanceError("opacity payload has " + std::to_string(r.opacity.values.size()) + " values, expected " +
                          std::to_string(w * h));
    if (j.contains("diagnostic_rgb_b64")) r.diagnostic_rgb = base64_decode(j["diagnostic_rgb_b64"].get<std::string>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw GuidanceError(std::string("malformed request: ") + e.what());
  }
}

inline std::string response_to_json(const GuidanceResponse& r) {
  nlohmann::json j = {{"version", kGuidanceProtocolVersion}};
  switch (r.status) {
    case GuidanceStatus::Ok: j["status"] = "ok"; break;
    case GuidanceStatus::Retry: j["status"] = "retry"; break;
    case GuidanceStatus::Fatal: j["status"] = "fatal"; break;
  }
  j["loss"] = r.loss;
  j["grad_b64"] = encode_float_payload(r.gradient.values);
  if (!r.message.empty()) j["message"] = r.message;
  return j.dump();
}

// Client-side parse and validation against the request's dimensions.
inline GuidanceResponse response_from_json(const std::string& body, int width, int height) {
  GuidanceResponse r;
  try {
    const auto j = nlohmann::json::parse(body);
    if (j.contains("version") && j["version"].get<std::string>() != kGuidanceProtocolVersion)
      throw GuidanceError("guidance protocol version mismatch: server speaks " + j["version"].get<std::string>());
    const std::string status = j.at("status").get<std::string>();
    if (status == "ok") r.status = GuidanceStatus::Ok;
    else if (status == "retry") r.status = GuidanceStatus::Retry;
    else if (status == "fatal") r.status = GuidanceStatus::Fatal;
    else throw GuidanceError("malformed response: unknown status '" + status + "'");
    r.message = j.value("message", "");
    if (r.status != GuidanceStatus::Ok) return r;
    r.loss = j.at("loss").get<double>();
    r.gradient = OpacityMap(width, height);
    r.gradient.values = decode_float_payload(j.at("grad_b64").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw GuidanceError(std::string("malformed response: ") + e.what());
  }
  if (r.gradient.values.size() != static_cast<std::size_t>(width) * height)
    throw GuidanceError("malformed response: gradient has " + std::to_string(r.gradient.values.size()) +
                        " values, expected " + std::to_string(width) + "x" + std::to_string(height));
  if (!std::isfinite(r.loss)) throw GuidanceError("malformed response: non-finite loss");
  for (double v : r.gradient.values)
    if (!std::isfinite(v)) throw GuidanceError("malformed response: non-finite gradient");
  return r;
}

// ---------------------------------------------------------------------------
// Transport

struct GuidanceEndpoint {
  std::string base;  // scheme://host:port
  std::string path = "/guidance";

  static GuidanceEndpoint parse(const std::string& url) {
    const auto scheme = url.find("://");
    const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const auto slash = url.find('/', host_start);
    GuidanceEndpoint e;
    e.base = slash == std::string::npos ? url : url.substr(0, slash);
    if (scheme == std::string::npos) e.base = "http://" + e.base;
    if (slash != std::string::npos && slash + 1 < url.size()) e.path = url.substr(slash);
    return e;
  }
};

struct GuidanceClientOptions {
  std::chrono::milliseconds timeout{30000};
  int retries = 3;
  std::chrono::milliseconds initial_backoff{50};
};

// POSTs the request; retries with exponential backoff on transport errors,
// HTTP 5xx and "retry" status. Throws GuidanceError when the server reports a
// fatal status, the response is malformed, or retries run out.
inline GuidanceResponse call_guidance(const std::string& url, const GuidanceRequest& request,
                                      const GuidanceClientOptions& options = {}) {
  const GuidanceEndpoint endpoint = GuidanceEndpoint::parse(url);
  httplib::Client client(endpoint.base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  const std::string body = request_to_json(request);

  std::string last_error;
  auto backoff = options.initial_backoff;
  for (int attempt = 0; attempt <= options.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto res = client.Post(endpoint.path, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 426) throw GuidanceError("guidance protocol version mismatch (HTTP 426): " + res->body);
    if (res->status == 400) throw GuidanceError("guidance server rejected the request (HTTP 400): " + res->body);
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw GuidanceError("unexpected HTTP status " + std::to_string(res->status));
    GuidanceResponse r = response_from_json(res->body, request.opacity.width, request.opacity.height);
    if (r.status == GuidanceStatus::Fatal)
      throw GuidanceError("guidance server reported fatal status at iteration " + std::to_string(request.iteration) +
                          (r.message.empty() ? "" : ": " + r.message));
    if (r.status == GuidanceStatus::Retry) {
      last_error = "server asked to retry" + (r.message.empty() ? "" : ": " + r.message);
      continue;
    }
    return r;
  }
  throw GuidanceError("guidance call to " + url + " failed after " + std::to_string(options.retries + 1) +
                      " attempt(s): " + last_error);
}

// Guidance backed by a remote server speaking the protocol above.
class RemoteGuidance final : public Guidance {
 public:
  RemoteGuidance(std::string url, std::string prompt, GuidanceClientOptions options = {})
      : url_(std::move(url)), prompt_(std::move(prompt)), options_(options) {}

  bool needs_opacity() const override { return true; }

  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    if (!ctx.opacity) throw InvalidArgumentError("remote guidance needs the rendered opacity");
    GuidanceRequest req;
    req.prompt = ctx.prompt.empty() ? prompt_ : ctx.prompt;
    req.iteration = ctx.iteration;
    req.camera = ctx.camera;
    req.opacity = *ctx.opacity;
    GuidanceResponse resp = call_guidance(url_, req, options_);
    GuidanceResult r;
    r.loss = resp.loss;
    r.opacity_gradient = std::move(resp.gradient);
    return r;
  }

  std::string describe() const override { return "remote(" + url_ + ")"; }

 private:
  std::string url_;
  std::string prompt_;
  GuidanceClientOptions options_;
};

}  // namespace jacdeform
