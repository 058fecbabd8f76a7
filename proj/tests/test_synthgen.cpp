// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include <Eigen/Dense>

#include "efps/synthgen.hpp"

using namespace efps;
using namespace efps::synth;
using Eigen::Vector3d;

namespace {

ImageF constant(float v, int w = 1, int h = 1) { return ImageF(w, h, 1, v); }

// Value whose log (with epsilon) sits `delta` above log(base + eps).
float log_step(double base, double delta, double eps) {
  return static_cast<float>((base + eps) * std::exp(delta) - eps);
}

double angle_deg(const Vector3d& a, const Vector3d& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)) * 180.0 / kPi;
}

}  // namespace

TEST(Shading, LambertExamples) {
  EXPECT_DOUBLE_EQ(shade(0.8, Vector3d::UnitZ(), Vector3d(0.0, std::sqrt(0.75), 0.5), 0.1), 0.5);
  EXPECT_DOUBLE_EQ(shade(0.8, Vector3d::UnitZ(), -Vector3d::UnitZ(), 0.1), 0.1);
  EXPECT_DOUBLE_EQ(shade(1.0, Vector3d::UnitZ(), Vector3d::UnitZ(), 0.5), 1.0);
}

TEST(EventSimulator, TwoAndAHalfThresholdsGiveTwoEvents) {
  EventSimConfig cfg;
  const double c = cfg.contrast;
  const float v1 = log_step(0.2, 2.5 * c, cfg.log_eps);
  const auto ev = simulate_events({constant(0.2f), constant(v1)}, {0.0, 1.0}, cfg);
  ASSERT_EQ(ev.size(), 2u);
  for (const auto& e : ev) EXPECT_EQ(e.polarity, 1);
  // Crossings at C and 2C out of 2.5C, float rounding of v1 included.
  EXPECT_NEAR(ev[0].t, 0.4, 1e-5);
  EXPECT_NEAR(ev[1].t, 0.8, 1e-5);

  const float v2 = log_step(0.6, -2.5 * c, cfg.log_eps);
  const auto neg = simulate_events({constant(0.6f), constant(v2)}, {0.0, 1.0}, cfg);
  ASSERT_EQ(neg.size(), 2u);
  EXPECT_EQ(neg[0].polarity, -1);
}

TEST(EventSimulator, ReferenceCarriesAcrossSteps) {
  EventSimConfig cfg;
  const double c = cfg.contrast;
  // Steps of 0.6 C: the first crossing falls in step two (1.2 C total), the
  // second in step four (2.4 C total).
  std::vector<ImageF> seq;
  std::vector<double> t;
  for (int k = 0; k <= 4; ++k) {
    seq.push_back(constant(log_step(0.3, 0.6 * c * k, cfg.log_eps)));
    t.push_back(k);
  }
  const auto ev = simulate_events(seq, t, cfg);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_GT(ev[0].t, 1.0);
  EXPECT_LT(ev[0].t, 2.0);
  EXPECT_GT(ev[1].t, 3.0);
  EXPECT_LT(ev[1].t, 4.0);
}

TEST(EventSimulator, ConstantIrradianceIsSilent) {
  const auto ev = simulate_events({constant(0.5f, 4, 3), constant(0.5f, 4, 3), constant(0.5f, 4, 3)},
                                  {0.0, 0.1, 0.2}, EventSimConfig{});
  EXPECT_TRUE(ev.empty());
}

TEST(EventSimulator, FewerEventsAtHigherThreshold) {
  Rng rng(3);
  std::vector<ImageF> seq;
  std::vector<double> t;
  for (int k = 0; k < 12; ++k) {
    ImageF img(8, 8, 1);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.05, 1.0));
    seq.push_back(img);
    t.push_back(0.01 * k);
  }
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double c : {0.05, 0.1, 0.2, 0.4, 0.8}) {
    EventSimConfig cfg;
    cfg.contrast = c;
    const std::size_t count = simulate_events(seq, t, cfg).size();
    EXPECT_LE(count, prev) << c;
    prev = count;
  }
}

TEST(EventSimulator, SortedAndWithinSteps) {
  SceneSpec spec;
  spec.width = spec.height = 24;
  const auto cap = generate_capture(spec, 6, EventSimConfig{});
  const auto& ev = cap.events.events;
  ASSERT_FALSE(ev.empty());
  for (std::size_t i = 1; i < ev.size(); ++i) ASSERT_LE(ev[i - 1].t, ev[i].t);
  for (const auto& e : ev) {
    EXPECT_GE(e.t, 0.0);
    EXPECT_LT(e.t, cap.lights.back().t_start);
    EXPECT_TRUE(e.polarity == 1 || e.polarity == -1);
  }
}

TEST(EventSimulator, Errors) {
  EXPECT_THROW(simulate_events({constant(0.5f)}, {0.0}, EventSimConfig{}), Error);
  EXPECT_THROW(simulate_events({constant(0.5f), constant(0.5f)}, {0.0, 0.0}, EventSimConfig{}), Error);
  EventSimConfig bad;
  bad.contrast = 0.0;
  EXPECT_THROW(simulate_events({constant(0.5f), constant(0.5f)}, {0.0, 1.0}, bad), Error);
}

TEST(SceneGeometry, SphereNormals) {
  SceneSpec spec;
  spec.width = spec.height = 65;
  const Geometry g = scene_geometry(spec);
  const auto at = [&](int x, int y) { return g.normals[static_cast<std::size_t>(y) * 65 + x]; };
  EXPECT_NEAR((at(32, 32) - Vector3d::UnitZ()).norm(), 0.0, 1e-12);
  EXPECT_EQ(g.mask.at(0, 0), 0);
  // Right limb leans toward +x, the top row toward +y.
  EXPECT_GT(at(60, 32).x(), 0.9);
  EXPECT_GT(at(32, 4).y(), 0.9);
  std::size_t inside = 0;
  for (int y = 0; y < 65; ++y)
    for (int x = 0; x < 65; ++x)
      if (g.mask.at(x, y)) {
        ++inside;
        EXPECT_NEAR(at(x, y).norm(), 1.0, 1e-12);
      }
  const double r = 0.45 * 65;
  EXPECT_NEAR(static_cast<double>(inside), kPi * r * r, 0.05 * kPi * r * r);
}

TEST(SceneGeometry, BlobIsDeterministicPerSeed) {
  SceneSpec spec;
  spec.kind = SceneKind::kBlob;
  const Geometry a = scene_geometry(spec), b = scene_geometry(spec);
  EXPECT_EQ(a.normals, b.normals);
  spec.seed = 2;
  EXPECT_NE(scene_geometry(spec).normals, a.normals);
}

TEST(PhotometricStereo, ThreeLightsRecoverSphere) {
  SceneSpec spec;
  spec.width = spec.height = 64;
  spec.ambient = 0.0;
  const Geometry geo = scene_geometry(spec);
  const std::vector<Vector3d> lights{Vector3d(0.3, 0.2, 1.0).normalized(), Vector3d(-0.3, 0.25, 1.0).normalized(),
                                     Vector3d(0.05, -0.35, 1.0).normalized()};
  std::vector<ImageF> frames;
  for (const auto& l : lights) frames.push_back(render_frame(spec, geo, l));
  Eigen::Matrix3d L;
  for (int i = 0; i < 3; ++i) L.row(i) = lights[i].transpose();
  double sum = 0.0;
  int count = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (!geo.mask.at(x, y)) continue;
      const Vector3d& n = geo.normals[static_cast<std::size_t>(y) * 64 + x];
      bool lit = true;
      for (const auto& l : lights) lit = lit && n.dot(l) > 0.02;
      if (!lit) continue;
      Vector3d b;
      for (int i = 0; i < 3; ++i) b[i] = frames[i].at(x, y, 0);
      const Vector3d g = L.colPivHouseholderQr().solve(b);
      sum += angle_deg(g, n);
      ++count;
    }
  ASSERT_GT(count, 1500);
  EXPECT_LT(sum / count, 0.5);
}

TEST(Capture, WindowsAndLights) {
  SceneSpec spec;
  spec.width = spec.height = 16;
  const auto cap = generate_capture(spec, 2, EventSimConfig{});
  ASSERT_EQ(cap.lights.size(), 2u);
  EXPECT_DOUBLE_EQ(cap.lights[0].t_end - cap.lights[0].t_start, 1.0 / 90.0);
  EXPECT_EQ(cap.lights[1].t_end, cap.lights[1].t_start);
  EXPECT_NEAR(angle_deg(cap.lights[0].direction, Vector3d::UnitZ()), 15.0, 1e-9);
  EXPECT_NEAR(angle_deg(cap.lights[1].direction, Vector3d::UnitZ()), 60.0, 1e-9);
  EXPECT_THROW(generate_capture(spec, 1, EventSimConfig{}), Error);
}

TEST(Capture, TrajectoryStaysOnHemisphere) {
  Trajectory t;
  for (int k = 0; k <= 100; ++k) {
    const Vector3d l = t.at(k / 100.0);
    EXPECT_NEAR(l.norm(), 1.0, 1e-12);
    EXPECT_GT(l.z(), 0.0);
  }
}

TEST(Capture, FullSizeRunsQuickly) {
  SceneSpec spec;
  const auto start = std::chrono::steady_clock::now();
  const auto cap = generate_capture(spec, 64, EventSimConfig{});
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 5.0);
  EXPECT_EQ(cap.frames.size(), 64u);
  EXPECT_GT(cap.events.events.size(), 0u);
}

TEST(Capture, SpecValidation) {
  SceneSpec spec;
  spec.ambient = 1.0;
  EXPECT_THROW(scene_geometry(spec), Error);
  spec = SceneSpec{};
  spec.radius = 0.6;
  EXPECT_THROW(scene_geometry(spec), Error);
  EXPECT_EQ(parse_scene("blob"), SceneKind::kBlob);
  EXPECT_THROW(parse_scene("cube"), Error);
}
