#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <thread>

#include "support.hpp"

using namespace jacdeform;
using namespace testing_support;

namespace {

GuidanceClientOptions fast_options(int retries = 3) {
  GuidanceClientOptions o;
  o.retries = retries;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::milliseconds(2000);
  return o;
}

GuidanceRequest small_request(int w = 4, int h = 3) {
  GuidanceRequest r;
  r.prompt = "a taller head";
  r.iteration = 7;
  r.camera.width = w;
  r.camera.height = h;
  r.camera.position = Vec3(0.5, 1.0, 3.0);
  r.opacity = OpacityMap(w, h);
  for (std::size_t i = 0; i < r.opacity.size(); ++i) r.opacity.values[i] = static_cast<float>(0.1 * i);
  return r;
}

void reply(httplib::Response& res, const GuidanceResponse& r) { res.set_content(response_to_json(r), "application/json"); }

OptimConfig remote_config() {
  OptimConfig c;
  c.weights.landmark = 0.0;
  c.weights.opacity = 0.0;
  c.width = c.height = 32;
  c.sigma = 1.5;
  c.fixed_views = 4;
  c.distance_min = c.distance_max = 3.5;
  c.checkpoint_interval = 0;
  return c;
}

}  // namespace

TEST(Base64, KnownVectors) {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
      {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, encoded] : cases) {
    EXPECT_EQ(base64_encode(reinterpret_cast<const std::uint8_t*>(plain.data()), plain.size()), encoded);
    const auto back = base64_decode(encoded);
    EXPECT_EQ(std::string(back.begin(), back.end()), plain);
  }
}

TEST(Base64, RandomRoundTripAndMalformed) {
  std::mt19937_64 rng(3);
  for (std::size_t n = 0; n < 64; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(base64_decode(base64_encode(bytes.data(), bytes.size())), bytes);
  }
  EXPECT_THROW(base64_decode("abc"), GuidanceError);
  EXPECT_THROW(base64_decode("ab!d"), GuidanceError);
  EXPECT_THROW(base64_decode("a=bc"), GuidanceError);
  EXPECT_THROW(base64_decode("Zg==Zg=="), GuidanceError);
}

TEST(FloatPayload, BitExactRoundTrip) {
  std::mt19937_64 rng(11);
  std::vector<double> values = {0.0, -0.0, 1.0, -1.5, 4.9e-324 /* subnormal */, 1.7e308,
                                std::numeric_limits<double>::infinity(), 0.1};
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t bits = rng();
    double d;
    std::memcpy(&d, &bits, sizeof d);
    if (std::isnan(d)) continue;
    values.push_back(d);
  }
  const auto back = decode_float_payload(encode_float_payload(values));
  ASSERT_EQ(back.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    EXPECT_EQ(std::signbit(back[i]), std::signbit(values[i]));
    EXPECT_EQ(back[i], values[i]);
  }
  EXPECT_THROW(decode_float_payload(base64_encode(reinterpret_cast<const std::uint8_t*>("abc"), 3)), GuidanceError);
}

TEST(Messages, RequestRoundTrip) {
  GuidanceRequest r = small_request();
  r.diagnostic_rgb = {1, 2, 3, 4, 5, 6};
  const std::string body = request_to_json(r);
  const auto j = nlohmann::json::parse(body);
  for (const char* key : {"version", "prompt", "iteration", "camera", "width", "height", "opacity_b64"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["version"], "1");
  const GuidanceRequest back = request_from_json(body);
  EXPECT_EQ(back.prompt, r.prompt);
  EXPECT_EQ(back.iteration, 7);
  EXPECT_EQ(back.camera.position, r.camera.position);
  EXPECT_EQ(back.camera.fov_y, r.camera.fov_y);
  EXPECT_EQ(back.opacity.values, r.opacity.values);
  EXPECT_EQ(back.diagnostic_rgb, r.diagnostic_rgb);

  auto bad = j;
  bad["width"] = 5;
  EXPECT_THROW(request_from_json(bad.dump()), GuidanceError);
  EXPECT_THROW(request_from_json("{not json"), GuidanceError);
}

TEST(Messages, ResponseValidation) {
  GuidanceResponse ok;
  ok.loss = 0.25;
  ok.gradient = OpacityMap(4, 3, 0.5);
  const GuidanceResponse back = response_from_json(response_to_json(ok), 4, 3);
  EXPECT_EQ(back.status, GuidanceStatus::Ok);
  EXPECT_EQ(back.loss, 0.25);
  EXPECT_EQ(back.gradient.values, ok.gradient.values);

  EXPECT_THROW(response_from_json(response_to_json(ok), 3, 4 + 1), GuidanceError);  // wrong dimensions
  auto j = nlohmann::json::parse(response_to_json(ok));
  j["version"] = "2";
  EXPECT_THROW(response_from_json(j.dump(), 4, 3), GuidanceError);
  j["version"] = "1";
  j["status"] = "maybe";
  EXPECT_THROW(response_from_json(j.dump(), 4, 3), GuidanceError);
  j["status"] = "ok";
  j["grad_b64"] = encode_float_payload(std::vector<double>(12, std::nan("")));
  EXPECT_THROW(response_from_json(j.dump(), 4, 3), GuidanceError);
  j.erase("grad_b64");
  EXPECT_THROW(response_from_json(j.dump(), 4, 3), GuidanceError);
}

TEST(Endpoint, Parsing) {
  EXPECT_EQ(GuidanceEndpoint::parse("http://host:8080/guidance").base, "http://host:8080");
  EXPECT_EQ(GuidanceEndpoint::parse("http://host:8080").path, "/guidance");
  EXPECT_EQ(GuidanceEndpoint::parse("host:9/custom/path").path, "/custom/path");
  EXPECT_EQ(GuidanceEndpoint::parse("host:9/custom/path").base, "http://host:9");
}

TEST(CallGuidance, ZeroEchoLeavesFieldUnchanged) {
  std::atomic<int> calls{0};
  MockServer server([&](const httplib::Request& req, httplib::Response& res) {
    const GuidanceRequest r = request_from_json(req.body);
    ++calls;
    GuidanceResponse out;
    out.gradient = OpacityMap(r.opacity.width, r.opacity.height);
    reply(res, out);
  });
  const TriMesh m = make_icosphere(2);
  RemoteGuidance g(server.url(), "noop", fast_options());
  Optimizer opt(m, g, remote_config());
  RunState s = opt.initial_state();
  const JacobianField start = s.field;
  for (int i = 0; i < 3; ++i) {
    const StepRecord rec = opt.step(s);
    EXPECT_EQ(rec.loss.guidance, 0.0);
  }
  EXPECT_EQ(calls.load(), 3);
  for (Index f = 0; f < m.num_faces(); ++f) {
    EXPECT_LE((s.field.jacobians[f] - start.jacobians[f]).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(std::abs(s.field.weights[f] - start.weights[f]), 1e-12);
  }
}

TEST(CallGuidance, ReferenceSilhouetteServerMatchesBuiltin) {
  const TriMesh sphere = make_icosphere(2);
  const TriMesh target = make_ellipsoid(2, Vec3(1.3, 0.8, 1.0));
  const OptimConfig c = remote_config();
  // The server renders the target mesh under the requested camera and returns
  // the opacity-space gradient of the mean squared difference.
  MockServer server([&](const httplib::Request& req, httplib::Response& res) {
    const GuidanceRequest r = request_from_json(req.body);
    const OpacityMap t = render_opacity(target.vertices, target.faces, r.camera, c.raster());
    const OpacityLoss l = opacity_loss(t, r.opacity);
    GuidanceResponse out;
    out.loss = l.loss;
    out.gradient = l.gradient;
    reply(res, out);
  });
  TargetSilhouetteGuidance local(target);
  RemoteGuidance remote(server.url(), "ellipsoid", fast_options());
  Optimizer a(sphere, local, c), b(sphere, remote, c);
  RunState sa = a.initial_state(), sb = b.initial_state();
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double la = a.step(sa).loss.total, lb = b.step(sb).loss.total;
    worst = std::max(worst, std::abs(la - lb));
  }
  EXPECT_LE(worst, 1e-6);
  EXPECT_LT(sa.history.back().total, sa.history.front().total);  // the run made progress
}

TEST(CallGuidance, WrongDimensionsAbortTheRun) {
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    GuidanceResponse out;
    out.gradient = OpacityMap(5, 5);
    reply(res, out);
  });
  const TriMesh m = make_icosphere(1);
  RemoteGuidance g(server.url(), "", fast_options());
  try {
    run(m, g, remote_config());
    FAIL() << "expected GuidanceError";
  } catch (const GuidanceError& e) {
    EXPECT_NE(std::string(e.what()).find("malformed"), std::string::npos) << e.what();
  }
}

TEST(CallGuidance, RetriesThenSucceeds) {
  std::atomic<int> calls{0};
  MockServer server([&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++calls;
    if (n == 1) {
      res.status = 503;
      return;
    }
    GuidanceResponse out;
    if (n == 2) {
      out.status = GuidanceStatus::Retry;
      out.message = "busy";
      reply(res, out);
      return;
    }
    const GuidanceRequest r = request_from_json(req.body);
    out.loss = 1.5;
    out.gradient = OpacityMap(r.opacity.width, r.opacity.height, 0.25);
    reply(res, out);
  });
  const GuidanceResponse r = call_guidance(server.url(), small_request(), fast_options());
  EXPECT_EQ(calls.load(), 3);
  EXPECT_EQ(r.loss, 1.5);
  EXPECT_EQ(r.gradient.values, std::vector<double>(12, 0.25));
}

TEST(CallGuidance, RetriesExhausted) {
  std::atomic<int> calls{0};
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  try {
    call_guidance(server.url(), small_request(), fast_options(2));
    FAIL();
  } catch (const GuidanceError& e) {
    EXPECT_NE(std::string(e.what()).find("3 attempt"), std::string::npos) << e.what();
  }
  EXPECT_EQ(calls.load(), 3);
}

TEST(CallGuidance, VersionMismatchAndBadRequestAreFatal) {
  std::atomic<int> calls{0};
  std::atomic<int> status{426};
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = status.load();
    res.set_content("{\"error\":\"nope\"}", "application/json");
  });
  try {
    call_guidance(server.url(), small_request(), fast_options());
    FAIL();
  } catch (const GuidanceError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
  EXPECT_EQ(calls.load(), 1);  // no retries
  status = 400;
  EXPECT_THROW(call_guidance(server.url(), small_request(), fast_options()), GuidanceError);
  EXPECT_EQ(calls.load(), 2);
}

TEST(CallGuidance, FatalStatusCarriesContext) {
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    GuidanceResponse out;
    out.status = GuidanceStatus::Fatal;
    out.message = "model crashed";
    reply(res, out);
  });
  try {
    call_guidance(server.url(), small_request(), fast_options());
    FAIL();
  } catch (const GuidanceError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("iteration 7"), std::string::npos) << what;
    EXPECT_NE(what.find("model crashed"), std::string::npos) << what;
  }
}

TEST(CallGuidance, UnreachableAndTimeout) {
  int closed_port = 0;
  {
    httplib::Server probe;
    closed_port = probe.bind_to_any_port("127.0.0.1");
  }  // socket closed: nothing listens there now
  EXPECT_THROW(call_guidance("http://127.0.0.1:" + std::to_string(closed_port), small_request(), fast_options(1)),
               GuidanceError);

  MockServer slow([&](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    res.status = 500;
  });
  GuidanceClientOptions o = fast_options(0);
  o.timeout = std::chrono::milliseconds(100);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(call_guidance(slow.url(), small_request(), o), GuidanceError);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(350));
}
