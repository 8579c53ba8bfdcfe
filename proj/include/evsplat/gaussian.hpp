// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/core_math.hpp"

#include <vector>

namespace evsplat {

/// One splat. Scales are stored as logs and opacity as a logit so that
/// unconstrained optimization keeps both in their valid ranges.
struct Gaussian {
    Vec3 mean = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Quaternion rotation;
    double opacity_logit = 0.0;
    SHCoefficients sh;

    Vec3 scale() const { return log_scale.array().exp(); }
    double opacity() const { return sigmoid(opacity_logit); }
    Mat3 covariance() const { return covariance_from_factors(scale(), rotation); }
    bool is_finite() const;
};

struct GaussianCloud {
    std::vector<Gaussian> gaussians;
    int sh_degree = kMaxShDegree;

    std::size_t size() const { return gaussians.size(); }
    bool empty() const { return gaussians.empty(); }
    /// Appends `g` after forcing its SH degree to the cloud's.
    void add(Gaussian g);
};

/// Gradients laid out like a GaussianCloud. `d_mean2d` and `visible` are
/// per-splat screen-space diagnostics consumed by densification.
struct GradientBundle {
    std::vector<Vec3> d_mean;
    std::vector<Vec3> d_log_scale;
    std::vector<Vec4> d_rotation;
    std::vector<double> d_opacity_logit;
    std::vector<SHCoefficients> d_sh;
    std::vector<Vec2> d_mean2d;
    std::vector<unsigned char> visible;

    GradientBundle() = default;
    GradientBundle(std::size_t n, int sh_degree);

    std::size_t size() const { return d_mean.size(); }
    /// Elementwise this += scale * other. Shapes must match.
    void accumulate(const GradientBundle &other, double scale = 1.0);
    bool all_finite() const;
};

} // namespace evsplat
