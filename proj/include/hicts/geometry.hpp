#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>
#include <utility>

namespace hicts {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// 6x6 covariance over twist coordinates, ordered (rotation, translation).
using Covariance6 = Mat6;

/// Seconds since dataset epoch.
using Timestamp = double;

// Angles below this use series expansions; closed forms divide by the angle.
inline constexpr double kSmallAngle = 1e-8;

// log_map is rejected this close to pi, where the axis becomes ill-conditioned.
inline constexpr double kLogMapAngleMargin = 1e-9;

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

/// Element of se(3). Ordering is fixed as (rotation, translation); all
/// covariances and Jacobians in this library follow it.
struct Twist {
  Vec3 rot{Vec3::Zero()};    // radians, axis * angle
  Vec3 trans{Vec3::Zero()};  // meters

  Twist() = default;
  Twist(const Vec3& r, const Vec3& t) : rot(r), trans(t) {}

  Vec6 vector() const {
    Vec6 w;
    w << rot, trans;
    return w;
  }

  static Twist from_vector(const Vec6& w) { return Twist(w.head<3>(), w.tail<3>()); }
};

/// Rigid-body transform on SE(3). Orientation is a unit quaternion,
/// renormalized after every compose.
struct Pose {
  Eigen::Quaterniond rotation{Eigen::Quaterniond::Identity()};
  Vec3 translation{Vec3::Zero()};

  Pose() = default;
  Pose(const Eigen::Quaterniond& q, const Vec3& t) : rotation(q.normalized()), translation(t) {}

  static Pose identity() { return Pose(); }

  Pose inverse() const {
    const Eigen::Quaterniond qi = rotation.conjugate();
    return Pose(qi, -(qi * translation));
  }

  /// Composition: this applied after other is (*this) * other.
  Pose operator*(const Pose& other) const {
    Pose out;
    out.rotation = (rotation * other.rotation).normalized();
    out.translation = translation + rotation * other.translation;
    return out;
  }

  /// Transforms a point.
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }

  /// Absolute rotation angle in [0, pi].
  double rotation_angle() const {
    const double s = rotation.vec().norm();
    const double c = std::abs(rotation.w());
    return 2.0 * std::atan2(s, c);
  }
};

namespace detail {

// Left Jacobian of SO(3) for the unnormalized rotation vector w.
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 wx = skew(w);
  double a, b;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
  } else {
    // 1 - cos(t) written as 2 sin^2(t/2): no cancellation at small t.
    const double t2 = theta * theta;
    const double sh = std::sin(0.5 * theta);
    a = 2.0 * sh * sh / t2;
    b = (theta - std::sin(theta)) / (t2 * theta);
  }
  return Mat3::Identity() + a * wx + b * wx * wx;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 wx = skew(w);
  double c;
  if (theta < kSmallAngle) {
    c = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    // theta*sin/(2(1-cos)) rewritten via half-angle cotangent for stability.
    const double half = 0.5 * theta;
    c = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
  }
  return Mat3::Identity() - 0.5 * wx + c * wx * wx;
}

}  // namespace detail

/// Closed-form SE(3) exponential. Stable through zero rotation.
inline Pose exp_map(const Twist& w) {
  const double theta = w.rot.norm();
  Eigen::Quaterniond q;
  if (theta < kSmallAngle) {
    q = Eigen::Quaterniond(1.0, 0.5 * w.rot.x(), 0.5 * w.rot.y(), 0.5 * w.rot.z());
    q.normalize();
  } else {
    q = Eigen::Quaterniond(Eigen::AngleAxisd(theta, w.rot / theta));
  }
  return Pose(q, detail::so3_left_jacobian(w.rot) * w.trans);
}

/// Inverse of exp_map. Throws std::domain_error when the rotation angle is
/// within kLogMapAngleMargin of pi (axis extraction is ill-conditioned there).
inline Twist log_map(const Pose& p) {
  Eigen::Quaterniond q = p.rotation.normalized();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const double s = q.vec().norm();
  const double theta = 2.0 * std::atan2(s, q.w());
  if (theta >= M_PI - kLogMapAngleMargin) {
    throw std::domain_error("log_map: rotation angle too close to pi, input ill-conditioned");
  }
  Vec3 rot;
  if (theta < kSmallAngle) {
    rot = 2.0 * q.vec();
  } else {
    rot = (theta / s) * q.vec();
  }
  return Twist(rot, detail::so3_left_jacobian_inverse(rot) * p.translation);
}

/// Adjoint of the pose on twists ordered (rotation, translation):
/// X exp(w) X^-1 = exp(adjoint(X) w).
inline Mat6 adjoint(const Pose& p) {
  const Mat3 r = p.rotation_matrix();
  Mat6 adj = Mat6::Zero();
  adj.topLeftCorner<3, 3>() = r;
  adj.bottomLeftCorner<3, 3>() = skew(p.translation) * r;
  adj.bottomRightCorner<3, 3>() = r;
  return adj;
}

/// Translation distance (m) and absolute rotation angle (rad) of a^-1 * b.
inline std::pair<double, double> pose_delta(const Pose& a, const Pose& b) {
  const Pose rel = a.inverse() * b;
  return {rel.translation.norm(), rel.rotation_angle()};
}

inline bool is_symmetric(const Eigen::Ref<const Eigen::MatrixXd>& m, double tol = 1e-9) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline bool is_positive_semidefinite(const Eigen::Ref<const Eigen::MatrixXd>& m,
                                     double tol = 1e-9) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  return eig.eigenvalues().minCoeff() >= -tol;
}

}  // namespace hicts
