// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/gaussian.hpp"

#include <cmath>

namespace evsplat {

bool
Gaussian::is_finite() const {
    if (!mean.allFinite() || !log_scale.allFinite() || !rotation.as_vec().allFinite() ||
        !std::isfinite(opacity_logit)) {
        return false;
    }
    for (int k = 0; k < sh.coeff_count(); ++k) {
        if (!sh.bands[k].allFinite()) {
            return false;
        }
    }
    return true;
}

void
GaussianCloud::add(Gaussian g) {
    g.sh.degree = sh_degree;
    gaussians.push_back(std::move(g));
}

GradientBundle::GradientBundle(std::size_t n, int sh_degree)
    : d_mean(n, Vec3::Zero()), d_log_scale(n, Vec3::Zero()), d_rotation(n, Vec4::Zero()),
      d_opacity_logit(n, 0.0), d_sh(n, SHCoefficients(sh_degree)), d_mean2d(n, Vec2::Zero()),
      visible(n, 0) {}

void
GradientBundle::accumulate(const GradientBundle &other, double scale) {
    for (std::size_t i = 0; i < size(); ++i) {
        d_mean[i] += scale * other.d_mean[i];
        d_log_scale[i] += scale * other.d_log_scale[i];
        d_rotation[i] += scale * other.d_rotation[i];
        d_opacity_logit[i] += scale * other.d_opacity_logit[i];
        for (int k = 0; k < d_sh[i].coeff_count(); ++k) {
            d_sh[i].bands[k] += scale * other.d_sh[i].bands[k];
        }
        d_mean2d[i] += scale * other.d_mean2d[i];
        visible[i] = visible[i] | other.visible[i];
    }
}

bool
GradientBundle::all_finite() const {
    for (std::size_t i = 0; i < size(); ++i) {
        if (!d_mean[i].allFinite() || !d_log_scale[i].allFinite() ||
            !d_rotation[i].allFinite() || !std::isfinite(d_opacity_logit[i])) {
            return false;
        }
        for (int k = 0; k < d_sh[i].coeff_count(); ++k) {
            if (!d_sh[i].bands[k].allFinite()) {
                return false;
            }
        }
    }
    return true;
}

} // namespace evsplat
