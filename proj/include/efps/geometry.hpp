// SPDX-License-Identifier: Apache-2.0
//
// Closed-form calibration geometry: Brown-Conrady lens model, RGB to event
// camera image-plane transfer through the z = 0 world plane, and light
// direction recovery from a chrome-ball specular highlight.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "efps/common.hpp"
#include "efps/image.hpp"

namespace efps::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using ProjectionMatrix = Eigen::Matrix<double, 3, 4>;

/// Pinhole intrinsics. `alpha` is the dimensionless skew coefficient, so the
/// skew entry of the intrinsic matrix is alpha * fx.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double alpha = 0.0;

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d k;
    k << fx, alpha * fx, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw Error("focal lengths must be positive");
    if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(alpha))
      throw Error("degenerate intrinsics");
  }
};

struct DistortionCoeffs {
  double k1 = 0.0, k2 = 0.0, k3 = 0.0;
  double p1 = 0.0, p2 = 0.0;

  bool is_zero() const { return k1 == 0.0 && k2 == 0.0 && k3 == 0.0 && p1 == 0.0 && p2 == 0.0; }
};

namespace detail {

inline Vec2 normalize_pixel(const Vec2& px, const CameraIntrinsics& in) {
  const double yn = (px.y() - in.cy) / in.fy;
  const double xn = (px.x() - in.cx) / in.fx - in.alpha * yn;
  return {xn, yn};
}

inline Vec2 project_normalized(const Vec2& n, const CameraIntrinsics& in) {
  return {in.fx * n.x() + in.alpha * in.fx * n.y() + in.cx, in.fy * n.y() + in.cy};
}

inline Vec2 distort_normalized(const Vec2& n, const DistortionCoeffs& d) {
  const double x = n.x(), y = n.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2;
  return {radial * x + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
          radial * y + 2.0 * d.p2 * x * y + d.p1 * (r2 + 2.0 * y * y)};
}

}  // namespace detail

/// Forward lens model: ideal pixel -> distorted pixel.
inline Vec2 undistort_point(const Vec2& pixel, const CameraIntrinsics& intr,
                            const DistortionCoeffs& dist) {
  if (!pixel.allFinite()) throw Error("pixel is not finite");
  if (dist.is_zero()) return pixel;
  const Vec2 n = detail::normalize_pixel(pixel, intr);
  const Vec2 out = detail::project_normalized(detail::distort_normalized(n, dist), intr);
  if (!n.allFinite() || !out.allFinite()) throw Error("degenerate intrinsics");
  return out;
}

/// Inverse of undistort_point by fixed-point iteration in normalized
/// coordinates. Converges for mild distortion (|k1| around 0.1 or less).
inline Vec2 invert_distortion(const Vec2& pixel, const CameraIntrinsics& intr,
                              const DistortionCoeffs& dist) {
  if (dist.is_zero()) return pixel;
  const Vec2 target = detail::normalize_pixel(pixel, intr);
  if (!target.allFinite()) throw Error("degenerate intrinsics");

  constexpr int kMaxIterations = 50;
  constexpr double kTolerancePx = 1e-3;
  Vec2 n = target;
  double residual = 0.0;
  for (int it = 0; it < kMaxIterations; ++it) {
    const double x = n.x(), y = n.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2;
    const double tx = 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
    const double ty = 2.0 * dist.p2 * x * y + dist.p1 * (r2 + 2.0 * y * y);
    n = Vec2((target.x() - tx) / radial, (target.y() - ty) / radial);
    if (!n.allFinite()) break;
    residual = (undistort_point(detail::project_normalized(n, intr), intr, dist) - pixel).norm();
    if (residual < 1e-10) break;
  }
  if (!n.allFinite() || !(residual < kTolerancePx)) throw Error("distortion inversion diverged");
  return detail::project_normalized(n, intr);
}

/// Maps an RGB-camera pixel to the event camera through the world plane z = 0.
inline Vec2 transfer_rgb_to_event(const Vec2& pixel_rgb, const ProjectionMatrix& p_rgb,
                                  const ProjectionMatrix& p_e) {
  Eigen::Matrix3d a;
  a.col(0) = p_rgb.col(0);
  a.col(1) = p_rgb.col(1);
  a.col(2) = Vec3(-pixel_rgb.x(), -pixel_rgb.y(), -1.0);
  const double scale = a.cwiseAbs().maxCoeff();
  const double det = a.determinant();
  if (!(std::abs(det) > 1e-12 * scale * scale * scale)) throw Error("pixel ray parallel to plane");

  // [x, y, psi] with psi the projective depth of the plane point.
  const Vec3 plane = -a.partialPivLu().solve(p_rgb.col(3));
  const Vec3 projected = p_e * Eigen::Vector4d(plane.x(), plane.y(), 0.0, 1.0);
  const double phi = projected.z();
  const double row_scale = p_e.row(2).cwiseAbs().maxCoeff() * (1.0 + plane.head<2>().cwiseAbs().maxCoeff());
  if (!(std::abs(phi) > 1e-12 * row_scale)) throw Error("point at infinity");
  return {projected.x() / phi, projected.y() / phi};
}

/// Distances along the camera ray through the highlight pixel.
struct HighlightGeometry {
  double d_s = 0.0;  ///< camera to ball center
  double d_1 = 0.0;  ///< ball center to ray (perpendicular)
  double d_2 = 0.0;  ///< camera to foot of that perpendicular
  double d_3 = 0.0;  ///< half chord of the ray inside the ball
  double d_h = 0.0;  ///< camera to highlight point
};

/// beta: half-angle the ball subtends at the camera.
/// gamma: angle between the highlight ray and the ray to the ball center.
inline HighlightGeometry highlight_depth(double beta, double gamma, double r_s) {
  if (!(r_s > 0.0)) throw Error("ball radius must be positive");
  const double sb = std::sin(beta);
  if (!(sb > 0.0) || !std::isfinite(sb)) throw Error("degenerate bearing");
  HighlightGeometry g;
  g.d_s = r_s / sb;
  g.d_1 = g.d_s * std::sin(gamma);
  g.d_2 = g.d_s * std::cos(gamma);
  if (g.d_1 > r_s * (1.0 + 1e-12)) throw Error("ray misses sphere");
  g.d_3 = std::sqrt(std::max(0.0, r_s * r_s - g.d_1 * g.d_1));
  g.d_h = g.d_2 - g.d_3;
  return g;
}

/// Mirror-reflection light direction from highlight point h, ball center s.
inline Vec3 light_direction(const Vec3& h, const Vec3& s, const Vec3& camera_origin, double d_h) {
  if (!(d_h > 0.0)) throw Error("highlight depth must be positive");
  const Vec3 offset = h - s;
  if (!(offset.norm() > 0.0)) throw Error("highlight at ball center");
  const Vec3 r = (h - camera_origin) / d_h;
  const Vec3 n = offset.normalized();
  return 2.0 * n.dot(r) * n - r;
}

/// Centroid of pixels at or above `threshold` inside the mask.
inline Vec2 detect_highlight(const ImageF& frame, const Mask& ball_mask, double threshold = 0.98) {
  if (frame.channels != 1) throw Error("highlight detection expects a grayscale frame");
  if (frame.width != ball_mask.width || frame.height != ball_mask.height)
    throw Error("frame and mask dimensions differ");
  double sx = 0.0, sy = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < frame.height; ++y)
    for (int x = 0; x < frame.width; ++x)
      if (ball_mask.at(x, y) != 0 && frame.at(x, y) >= threshold) {
        sx += x;
        sy += y;
        ++count;
      }
  if (count == 0) throw Error("no highlight found");
  return {sx / static_cast<double>(count), sy / static_cast<double>(count)};
}

/// Unit viewing ray through a pixel.
inline Vec3 back_project(const Vec2& pixel, const CameraIntrinsics& intr) {
  const Vec2 n = detail::normalize_pixel(pixel, intr);
  return Vec3(n.x(), n.y(), 1.0).normalized();
}

inline Vec2 project(const Vec3& point_camera, const CameraIntrinsics& intr) {
  if (!(point_camera.z() > 0.0)) throw Error("point behind camera");
  return detail::project_normalized({point_camera.x() / point_camera.z(),
                                     point_camera.y() / point_camera.z()},
                                    intr);
}

struct ChromeBallObservation {
  Vec3 center = Vec3::Zero();  ///< ball center s in camera coordinates (mm)
  double radius = 35.0;        ///< r_s (mm)
  Vec2 highlight = Vec2::Zero();
  Vec3 camera_origin = Vec3::Zero();
  double beta = 0.0;
  double gamma = 0.0;
};

/// Fills beta and gamma by back-projecting the highlight pixel.
inline ChromeBallObservation observe_chrome_ball(const Vec3& center, double radius,
                                                 const Vec2& highlight_px,
                                                 const CameraIntrinsics& intr,
                                                 const Vec3& camera_origin = Vec3::Zero()) {
  ChromeBallObservation obs;
  obs.center = center;
  obs.radius = radius;
  obs.highlight = highlight_px;
  obs.camera_origin = camera_origin;
  const Vec3 to_center = center - camera_origin;
  const double dist = to_center.norm();
  if (!(radius > 0.0) || !(dist > radius)) throw Error("camera inside chrome ball");
  obs.beta = std::asin(radius / dist);
  const Vec3 ray = back_project(highlight_px, intr);
  obs.gamma = std::atan2(ray.cross(to_center).norm(), ray.dot(to_center));
  return obs;
}

/// Full chrome-ball chain: bearing angles -> highlight depth -> reflection.
inline Vec3 recover_light(const ChromeBallObservation& obs, const CameraIntrinsics& intr) {
  const HighlightGeometry g = highlight_depth(obs.beta, obs.gamma, obs.radius);
  const Vec3 h = obs.camera_origin + g.d_h * back_project(obs.highlight, intr);
  return light_direction(h, obs.center, obs.camera_origin, g.d_h);
}

/// Angle between two vectors, robust near 0 and pi.
inline double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

struct Calibration {
  CameraIntrinsics intrinsics;
  DistortionCoeffs distortion;
  ProjectionMatrix p_rgb = ProjectionMatrix::Zero();
  ProjectionMatrix p_e = ProjectionMatrix::Zero();
};

}  // namespace efps::geometry
