// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>

namespace evsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

inline constexpr double kNearPlane = 0.01;
/// Low-pass regularizer added to every projected covariance, in pixels^2.
inline constexpr double kCov2dBlur = 0.3;
inline constexpr int kMaxShDegree = 3;
inline constexpr int kMaxShCoeffs = (kMaxShDegree + 1) * (kMaxShDegree + 1);

/// Rotation as (w, x, y, z). Stored unnormalized as an optimization
/// parameter; every consumer goes through normalized().
struct Quaternion {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static Quaternion identity() { return {}; }
    static Quaternion from_axis_angle(const Vec3 &axis, double angle);
    /// Rotation taking world vectors into the frame whose rows are the
    /// rows of `rotation`.
    static Quaternion from_matrix(const Mat3 &rotation);

    double norm() const;
    Quaternion normalized() const;
    Mat3 to_matrix() const;
    Vec4 as_vec() const { return {w, x, y, z}; }

    Quaternion operator*(const Quaternion &rhs) const;
    bool operator==(const Quaternion &) const = default;
};

/// Spherical interpolation on the shorter arc; s in [0, 1].
Quaternion slerp(const Quaternion &a, const Quaternion &b, double s);

/// Gradient of a loss with respect to the raw (unnormalized) quaternion,
/// given the gradient with respect to the rotation matrix it produces.
Vec4 quaternion_backward(const Quaternion &raw, const Mat3 &d_rotation);

/// Pinhole camera with a world-to-camera pose: x_cam = R * x_world + t.
/// Camera axes follow the +x right, +y down, +z forward convention.
struct CameraView {
    Quaternion rotation;
    Vec3 translation = Vec3::Zero();
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;
    double time = 0.0;

    Mat3 rotation_matrix() const { return rotation.normalized().to_matrix(); }
    Vec3 camera_center() const;
    /// Throws Error(BadSpec) when intrinsics or image size are invalid.
    void validate() const;
    bool same_intrinsics(const CameraView &other) const;

    static CameraView look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up,
                              const CameraView &intrinsics);
};

/// Pose interpolation at fraction s: camera centers are interpolated
/// linearly, rotations by slerp, time linearly. Intrinsics come from `a`.
CameraView interpolate_view(const CameraView &a, const CameraView &b, double s);

/// Per-channel SH coefficients for degrees 0..degree. Only the first
/// (degree+1)^2 entries of `bands` are meaningful.
struct SHCoefficients {
    int degree = kMaxShDegree;
    std::array<Vec3, kMaxShCoeffs> bands{};

    SHCoefficients() { bands.fill(Vec3::Zero()); }
    explicit SHCoefficients(int deg) : degree(deg) { bands.fill(Vec3::Zero()); }

    static int coeff_count(int deg) { return (deg + 1) * (deg + 1); }
    int coeff_count() const { return coeff_count(degree); }
    /// Length of the flattened RGB coefficient list.
    std::size_t size() const { return 3 * static_cast<std::size_t>(coeff_count()); }
};

/// Zeroth-order SH constant; a DC coefficient c renders as c * kShC0 + 0.5.
inline constexpr double kShC0 = 0.28209479177387814;

/// Real SH basis values for all coefficients up to `degree` at unit
/// direction `dir`. When `gradients` is non-null it receives d(basis)/d(dir).
void sh_basis(int degree, const Vec3 &dir, double *values, Vec3 *gradients = nullptr);

/// Evaluates view-dependent color: sum(coeff * basis) + 0.5, clamped at 0.
/// `degree` may be lower than coeffs.degree to restrict the active bands.
Vec3 eval_sh(const SHCoefficients &coeffs, const Vec3 &view_dir, int degree = -1);

struct ShBackward {
    SHCoefficients d_coeffs;
    Vec3 d_dir = Vec3::Zero();
};

/// Gradient of eval_sh. Channels clamped in the forward pass get zero gradient.
ShBackward eval_sh_backward(const SHCoefficients &coeffs, const Vec3 &view_dir,
                            const Vec3 &d_rgb, int degree = -1);

/// Sigma = R S S^T R^T with S = diag(scale) and R from the (normalized) rotation.
Mat3 covariance_from_factors(const Vec3 &scale, const Quaternion &rotation);

struct CovarianceBackward {
    Vec3 d_scale = Vec3::Zero();
    Vec4 d_rotation = Vec4::Zero();
};

/// `d_cov` is the symmetric gradient of the loss with respect to Sigma.
CovarianceBackward covariance_backward(const Vec3 &scale, const Quaternion &rotation,
                                       const Mat3 &d_cov);

struct Projection {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Zero();
    double depth = 0.0;
    Vec3 cam_point = Vec3::Zero();
};

/// First-order (EWA) projection. Throws Error(BehindCamera) if the camera
/// space depth is not beyond the near plane.
Projection project_gaussian(const Vec3 &mean, const Mat3 &cov3d, const CameraView &view);

/// Non-throwing variant used by the rasterizer's culling path.
std::optional<Projection> try_project_gaussian(const Vec3 &mean, const Mat3 &cov3d,
                                               const CameraView &view,
                                               double near_plane = kNearPlane);

struct ProjectionBackward {
    Vec3 d_mean = Vec3::Zero();
    Mat3 d_cov3d = Mat3::Zero();
};

/// `d_cov2d` is the symmetric gradient with respect to the projected covariance.
ProjectionBackward project_gaussian_backward(const Vec3 &mean, const Mat3 &cov3d,
                                             const CameraView &view, const Vec2 &d_mean2d,
                                             const Mat2 &d_cov2d);

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

} // namespace evsplat
