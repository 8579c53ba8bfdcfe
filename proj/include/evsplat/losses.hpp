// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/events.hpp"
#include "evsplat/image.hpp"

namespace evsplat {

struct LossConfig {
    double lambda_dssim = 0.2;
    double gamma = 2.2;
    double log_floor = 1e-5;
    int ssim_window = 11;
    double ssim_sigma = 1.5;
    double ssim_c1 = 0.01 * 0.01;
    double ssim_c2 = 0.03 * 0.03;
    /// Half-width R of the fixed range [-R, R] mapped onto [0, 1] before
    /// the structural term of the event loss.
    double dssim_range = 1.0;

    void validate() const;
};

struct LossValue {
    double total = 0.0;
    double l1_part = 0.0;
    double dssim_part = 0.0;
    /// Event loss: gradients with respect to the start and end RGB renders.
    Image d_image_start;
    Image d_image_end;
    /// Blur loss: gradient with respect to the blurred RGB render.
    Image d_blur_image;
    double d_gamma = 0.0;
};

/// ln(max(x, floor)) of the Bayer-selected channel (or channel mean when the
/// mask is disabled). Single-channel output.
Image log_radiance(const Image &rgb, const BayerMask &mask, double log_floor);

/// Pulls a gradient on log_radiance's output back onto the RGB input.
Image log_radiance_backward(const Image &rgb, const BayerMask &mask, double log_floor,
                            const Image &upstream);

struct DssimResult {
    double value = 0.0;
    Image d_a;
};

/// (1 - mean SSIM) / 2 with a Gaussian window and zero padding, averaged over
/// all channels. Gradient is taken with respect to `a`.
DssimResult dssim(const Image &a, const Image &b, const LossConfig &cfg);

/// Mean SSIM map value; exposed for evaluation.
double ssim(const Image &a, const Image &b, const LossConfig &cfg);

/// Log-difference loss between two renders and an accumulated event frame.
LossValue event_loss(const Image &render_start, const Image &render_end, const EventFrame &frame,
                     const BayerMask &mask, const LossConfig &cfg);

/// L1 + structural loss in linear color between a blurred render and a
/// captured blurry frame.
LossValue blur_loss(const Image &render_blur, const Image &target, const LossConfig &cfg);

} // namespace evsplat
