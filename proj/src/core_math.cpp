// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/core_math.hpp"

#include "evsplat/errors.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

namespace evsplat {

std::string_view
to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::EmptyStream: return "EmptyStream";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::BehindCamera: return "BehindCamera";
    case ErrorKind::EmptyCloud: return "EmptyCloud";
    case ErrorKind::MissingForwardState: return "MissingForwardState";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NoSurvivors: return "NoSurvivors";
    case ErrorKind::EmptyRefinementSet: return "EmptyRefinementSet";
    case ErrorKind::BadSpec: return "BadSpec";
    case ErrorKind::TooFewFrames: return "TooFewFrames";
    case ErrorKind::Schema: return "SchemaError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Usage: return "UsageError";
    }
    return "Error";
}

// ---------------------------------------------------------------------------
// Quaternion

Quaternion
Quaternion::from_axis_angle(const Vec3 &axis, double angle) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

Quaternion
Quaternion::from_matrix(const Mat3 &rotation) {
    const Eigen::Quaterniond q(rotation);
    return Quaternion{q.w(), q.x(), q.y(), q.z()}.normalized();
}

double
Quaternion::norm() const {
    return std::sqrt(w * w + x * x + y * y + z * z);
}

Quaternion
Quaternion::normalized() const {
    const double n = norm();
    if (n == 0.0) {
        return identity();
    }
    return {w / n, x / n, y / n, z / n};
}

Mat3
Quaternion::to_matrix() const {
    Mat3 r;
    r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
    return r;
}

Quaternion
Quaternion::operator*(const Quaternion &r) const {
    return {w * r.w - x * r.x - y * r.y - z * r.z, w * r.x + x * r.w + y * r.z - z * r.y,
            w * r.y - x * r.z + y * r.w + z * r.x, w * r.z + x * r.y - y * r.x + z * r.w};
}

Quaternion
slerp(const Quaternion &a, const Quaternion &b, double s) {
    const Quaternion qa = a.normalized();
    Quaternion qb = b.normalized();
    double d = qa.w * qb.w + qa.x * qb.x + qa.y * qb.y + qa.z * qb.z;
    if (d < 0.0) {
        qb = {-qb.w, -qb.x, -qb.y, -qb.z};
        d = -d;
    }
    double wa;
    double wb;
    if (d > 1.0 - 1e-12) {
        wa = 1.0 - s;
        wb = s;
    } else {
        const double theta = std::acos(std::min(d, 1.0));
        const double sin_theta = std::sin(theta);
        wa = std::sin((1.0 - s) * theta) / sin_theta;
        wb = std::sin(s * theta) / sin_theta;
    }
    return Quaternion{wa * qa.w + wb * qb.w, wa * qa.x + wb * qb.x, wa * qa.y + wb * qb.y,
                      wa * qa.z + wb * qb.z}
        .normalized();
}

Vec4
quaternion_backward(const Quaternion &raw, const Mat3 &g) {
    const double n = raw.norm();
    const Quaternion q = raw.normalized();
    const double w = q.w, x = q.x, y = q.y, z = q.z;

    // Gradient with respect to the normalized quaternion.
    Vec4 dq;
    dq[0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) +
                   x * g(2, 1));
    dq[1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) +
                   z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
    dq[2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                   w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
    dq[3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
                   2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));

    if (n == 0.0) {
        return Vec4::Zero();
    }
    const Vec4 qn = q.as_vec();
    return (dq - qn * qn.dot(dq)) / n;
}

// ---------------------------------------------------------------------------
// Camera

Vec3
CameraView::camera_center() const {
    return -(rotation_matrix().transpose() * translation);
}

void
CameraView::validate() const {
    if (width <= 0 || height <= 0) {
        throw Error(ErrorKind::BadSpec, "camera width and height must be positive");
    }
    if (!(fx > 0.0) || !(fy > 0.0)) {
        throw Error(ErrorKind::BadSpec, "camera focal lengths must be positive");
    }
}

bool
CameraView::same_intrinsics(const CameraView &o) const {
    return fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width &&
           height == o.height;
}

CameraView
CameraView::look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up,
                    const CameraView &intrinsics) {
    const Vec3 forward = target - eye;
    if (forward.norm() < 1e-12) {
        throw Error(ErrorKind::BadSpec, "look_at eye coincides with target");
    }
    const Vec3 f = forward.normalized();
    const Vec3 right = f.cross(up);
    if (right.norm() < 1e-9) {
        throw Error(ErrorKind::BadSpec, "look_at direction is parallel to the up vector");
    }
    const Vec3 r = right.normalized();
    const Vec3 d = f.cross(r);
    Mat3 rot;
    rot.row(0) = r;
    rot.row(1) = d;
    rot.row(2) = f;

    CameraView view = intrinsics;
    view.rotation = Quaternion::from_matrix(rot);
    view.translation = -(view.rotation_matrix() * eye);
    return view;
}

CameraView
interpolate_view(const CameraView &a, const CameraView &b, double s) {
    CameraView out = a;
    const Vec3 center = (1.0 - s) * a.camera_center() + s * b.camera_center();
    out.rotation = slerp(a.rotation, b.rotation, s);
    out.translation = -(out.rotation_matrix() * center);
    out.time = (1.0 - s) * a.time + s * b.time;
    return out;
}

// ---------------------------------------------------------------------------
// Spherical harmonics

namespace {

constexpr double kShC1 = 0.4886025119029199;
constexpr double kShC2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                            -1.0925484305920792, 0.5462742152960396};
constexpr double kShC3[] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                            0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                            -0.5900435899266435};

int
resolve_degree(const SHCoefficients &coeffs, int degree) {
    return degree < 0 ? coeffs.degree : std::min(degree, coeffs.degree);
}

} // namespace

void
sh_basis(int degree, const Vec3 &dir, double *v, Vec3 *g) {
    const double x = dir.x(), y = dir.y(), z = dir.z();
    v[0] = kShC0;
    if (g) {
        g[0] = Vec3::Zero();
    }
    if (degree < 1) {
        return;
    }
    v[1] = -kShC1 * y;
    v[2] = kShC1 * z;
    v[3] = -kShC1 * x;
    if (g) {
        g[1] = {0.0, -kShC1, 0.0};
        g[2] = {0.0, 0.0, kShC1};
        g[3] = {-kShC1, 0.0, 0.0};
    }
    if (degree < 2) {
        return;
    }
    const double xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, yz = y * z, xz = x * z;
    v[4] = kShC2[0] * xy;
    v[5] = kShC2[1] * yz;
    v[6] = kShC2[2] * (2.0 * zz - xx - yy);
    v[7] = kShC2[3] * xz;
    v[8] = kShC2[4] * (xx - yy);
    if (g) {
        g[4] = {kShC2[0] * y, kShC2[0] * x, 0.0};
        g[5] = {0.0, kShC2[1] * z, kShC2[1] * y};
        g[6] = {-2.0 * kShC2[2] * x, -2.0 * kShC2[2] * y, 4.0 * kShC2[2] * z};
        g[7] = {kShC2[3] * z, 0.0, kShC2[3] * x};
        g[8] = {2.0 * kShC2[4] * x, -2.0 * kShC2[4] * y, 0.0};
    }
    if (degree < 3) {
        return;
    }
    v[9] = kShC3[0] * y * (3.0 * xx - yy);
    v[10] = kShC3[1] * xy * z;
    v[11] = kShC3[2] * y * (4.0 * zz - xx - yy);
    v[12] = kShC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    v[13] = kShC3[4] * x * (4.0 * zz - xx - yy);
    v[14] = kShC3[5] * z * (xx - yy);
    v[15] = kShC3[6] * x * (xx - 3.0 * yy);
    if (g) {
        g[9] = {6.0 * kShC3[0] * xy, kShC3[0] * (3.0 * xx - 3.0 * yy), 0.0};
        g[10] = {kShC3[1] * yz, kShC3[1] * xz, kShC3[1] * xy};
        g[11] = {-2.0 * kShC3[2] * xy, kShC3[2] * (4.0 * zz - xx - 3.0 * yy),
                 8.0 * kShC3[2] * yz};
        g[12] = {-6.0 * kShC3[3] * xz, -6.0 * kShC3[3] * yz,
                 kShC3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)};
        g[13] = {kShC3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * kShC3[4] * xy,
                 8.0 * kShC3[4] * xz};
        g[14] = {2.0 * kShC3[5] * xz, -2.0 * kShC3[5] * yz, kShC3[5] * (xx - yy)};
        g[15] = {kShC3[6] * (3.0 * xx - 3.0 * yy), -6.0 * kShC3[6] * xy, 0.0};
    }
}

Vec3
eval_sh(const SHCoefficients &coeffs, const Vec3 &view_dir, int degree) {
    const int deg = resolve_degree(coeffs, degree);
    std::array<double, kMaxShCoeffs> basis{};
    sh_basis(deg, view_dir, basis.data());
    Vec3 rgb = Vec3::Zero();
    const int count = SHCoefficients::coeff_count(deg);
    for (int k = 0; k < count; ++k) {
        rgb += basis[k] * coeffs.bands[k];
    }
    rgb.array() += 0.5;
    return rgb.cwiseMax(0.0);
}

ShBackward
eval_sh_backward(const SHCoefficients &coeffs, const Vec3 &view_dir, const Vec3 &d_rgb,
                 int degree) {
    const int deg = resolve_degree(coeffs, degree);
    std::array<double, kMaxShCoeffs> basis{};
    std::array<Vec3, kMaxShCoeffs> grads;
    sh_basis(deg, view_dir, basis.data(), grads.data());
    const int count = SHCoefficients::coeff_count(deg);

    Vec3 raw = Vec3::Zero();
    for (int k = 0; k < count; ++k) {
        raw += basis[k] * coeffs.bands[k];
    }
    raw.array() += 0.5;

    Vec3 d_raw = d_rgb;
    for (int c = 0; c < 3; ++c) {
        if (raw[c] < 0.0) {
            d_raw[c] = 0.0;
        }
    }

    ShBackward out;
    out.d_coeffs = SHCoefficients(coeffs.degree);
    for (int k = 0; k < count; ++k) {
        out.d_coeffs.bands[k] = basis[k] * d_raw;
        out.d_dir += grads[k] * coeffs.bands[k].dot(d_raw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Covariance and projection

Mat3
covariance_from_factors(const Vec3 &scale, const Quaternion &rotation) {
    const Mat3 m = rotation.normalized().to_matrix() * scale.asDiagonal();
    return m * m.transpose();
}

CovarianceBackward
covariance_backward(const Vec3 &scale, const Quaternion &rotation, const Mat3 &d_cov) {
    const Mat3 r = rotation.normalized().to_matrix();
    const Mat3 m = r * scale.asDiagonal();
    const Mat3 d_m = 2.0 * d_cov * m;

    CovarianceBackward out;
    Mat3 d_r;
    for (int i = 0; i < 3; ++i) {
        out.d_scale[i] = d_m.col(i).dot(r.col(i));
        d_r.col(i) = d_m.col(i) * scale[i];
    }
    out.d_rotation = quaternion_backward(rotation, d_r);
    return out;
}

namespace {

Mat23
projection_jacobian(const Vec3 &p, const CameraView &view) {
    const double inv_z = 1.0 / p.z();
    const double inv_z2 = inv_z * inv_z;
    Mat23 j;
    j << view.fx * inv_z, 0.0, -view.fx * p.x() * inv_z2, 0.0, view.fy * inv_z,
        -view.fy * p.y() * inv_z2;
    return j;
}

} // namespace

std::optional<Projection>
try_project_gaussian(const Vec3 &mean, const Mat3 &cov3d, const CameraView &view,
                     double near_plane) {
    const Mat3 w = view.rotation_matrix();
    const Vec3 p = w * mean + view.translation;
    if (p.z() <= near_plane) {
        return std::nullopt;
    }
    const Mat23 t = projection_jacobian(p, view) * w;

    Projection out;
    out.cam_point = p;
    out.depth = p.z();
    out.mean2d = {view.fx * p.x() / p.z() + view.cx, view.fy * p.y() / p.z() + view.cy};
    out.cov2d = t * cov3d * t.transpose();
    out.cov2d(0, 1) = out.cov2d(1, 0) = 0.5 * (out.cov2d(0, 1) + out.cov2d(1, 0));
    out.cov2d(0, 0) += kCov2dBlur;
    out.cov2d(1, 1) += kCov2dBlur;
    return out;
}

Projection
project_gaussian(const Vec3 &mean, const Mat3 &cov3d, const CameraView &view) {
    auto proj = try_project_gaussian(mean, cov3d, view);
    if (!proj) {
        throw Error(ErrorKind::BehindCamera, "point is not in front of the near plane");
    }
    return *proj;
}

ProjectionBackward
project_gaussian_backward(const Vec3 &mean, const Mat3 &cov3d, const CameraView &view,
                          const Vec2 &d_mean2d, const Mat2 &d_cov2d) {
    const Mat3 w = view.rotation_matrix();
    const Vec3 p = w * mean + view.translation;
    const Mat23 j = projection_jacobian(p, view);
    const Mat23 t = j * w;

    ProjectionBackward out;
    out.d_cov3d = t.transpose() * d_cov2d * t;

    const Mat23 d_t = 2.0 * d_cov2d * t * cov3d;
    const Mat23 d_j = d_t * w.transpose();

    const double x = p.x(), y = p.y(), z = p.z();
    const double inv_z = 1.0 / z;
    const double inv_z2 = inv_z * inv_z;
    const double inv_z3 = inv_z2 * inv_z;
    const double fx = view.fx, fy = view.fy;

    Vec3 d_p;
    d_p.x() = d_mean2d.x() * fx * inv_z - d_j(0, 2) * fx * inv_z2;
    d_p.y() = d_mean2d.y() * fy * inv_z - d_j(1, 2) * fy * inv_z2;
    d_p.z() = -d_mean2d.x() * fx * x * inv_z2 - d_mean2d.y() * fy * y * inv_z2 -
              d_j(0, 0) * fx * inv_z2 + d_j(0, 2) * 2.0 * fx * x * inv_z3 -
              d_j(1, 1) * fy * inv_z2 + d_j(1, 2) * 2.0 * fy * y * inv_z3;

    out.d_mean = w.transpose() * d_p;
    return out;
}

} // namespace evsplat
