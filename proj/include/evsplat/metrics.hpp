// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/image.hpp"
#include "evsplat/losses.hpp"
#include "evsplat/renderer.hpp"

#include <array>
#include <string>
#include <vector>

namespace evsplat {

enum class AlignMode {
    /// One (a, b) per channel fitted over all views together.
    Global,
    /// One (a, b) per channel and view.
    PerView,
    /// Compare renders as they are.
    None,
};

struct EvalOptions {
    AlignMode align = AlignMode::Global;
    /// Floor applied before taking logs for the alignment fit.
    double log_floor = 1e-5;
    /// MSE at or below this reports PSNR as infinite.
    double infinite_mse = 1e-24;
    LossConfig ssim;
};

struct ChannelFit {
    double a = 1.0;
    double b = 0.0;
};

struct EvalReport {
    std::vector<double> psnr;
    std::vector<bool> psnr_infinite;
    std::vector<double> ssim;
    /// fits[v][c]; a single entry per channel under global alignment.
    std::vector<std::array<ChannelFit, 3>> fits;
    double mean_psnr = 0.0;
    /// True when any view's PSNR is infinite.
    bool mean_psnr_infinite = false;
    double mean_ssim = 0.0;

    std::string to_json() const;
};

/// PSNR with peak 1.0. Returns +inf when mse <= infinite_mse.
double psnr_from_mse(double mse, double infinite_mse = 0.0);

/// Least-squares fit of a*log(x) + b to log(y) over the given pixel pairs of
/// channel c, with both sides floored at `log_floor`.
ChannelFit fit_log_affine(const std::vector<const Image *> &rendered,
                          const std::vector<const Image *> &truth, int channel, double log_floor);

/// Aligns, clamps to [0, 1] and scores every view. Throws DimensionMismatch.
EvalReport evaluate(const std::vector<Image> &rendered, const std::vector<Image> &truth,
                    const EvalOptions &opts = {});
EvalReport evaluate(const std::vector<RenderedImage> &rendered, const std::vector<Image> &truth,
                    const EvalOptions &opts = {});

/// exp(a*log(max(x, floor)) + b) clamped to [0, 1], per channel.
Image apply_alignment(const Image &rendered, const std::array<ChannelFit, 3> &fit,
                      double log_floor);

} // namespace evsplat
