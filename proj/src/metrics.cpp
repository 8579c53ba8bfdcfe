// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/metrics.hpp"

#include "evsplat/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace evsplat {

namespace {

Image
clamped(const Image &img) {
    Image out = img;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(out[i], 0.0, 1.0);
    }
    return out;
}

double
mse(const Image &a, const Image &b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return a.size() > 0 ? sum / static_cast<double>(a.size()) : 0.0;
}

nlohmann::json
number_or_inf(double v) {
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    return v;
}

} // namespace

double
psnr_from_mse(double mse_value, double infinite_mse) {
    if (mse_value <= infinite_mse) {
        return std::numeric_limits<double>::infinity();
    }
    return -10.0 * std::log10(mse_value);
}

ChannelFit
fit_log_affine(const std::vector<const Image *> &rendered, const std::vector<const Image *> &truth,
               int channel, double log_floor) {
    // Two passes: means first, then centered moments.
    double n = 0.0, mx = 0.0, my = 0.0;
    for (std::size_t v = 0; v < rendered.size(); ++v) {
        const Image &r = *rendered[v];
        const Image &t = *truth[v];
        for (std::size_t p = 0; p < r.pixel_count(); ++p) {
            const std::size_t i = p * 3 + static_cast<std::size_t>(channel);
            mx += std::log(std::max(r[i], log_floor));
            my += std::log(std::max(t[i], log_floor));
            n += 1.0;
        }
    }
    if (n == 0.0) {
        return {};
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t v = 0; v < rendered.size(); ++v) {
        const Image &r = *rendered[v];
        const Image &t = *truth[v];
        for (std::size_t p = 0; p < r.pixel_count(); ++p) {
            const std::size_t i = p * 3 + static_cast<std::size_t>(channel);
            const double dx = std::log(std::max(r[i], log_floor)) - mx;
            const double dy = std::log(std::max(t[i], log_floor)) - my;
            sxx += dx * dx;
            sxy += dx * dy;
        }
    }
    ChannelFit fit;
    if (sxx > 0.0) {
        fit.a = sxy / sxx;
    }
    fit.b = my - fit.a * mx;
    return fit;
}

Image
apply_alignment(const Image &rendered, const std::array<ChannelFit, 3> &fit, double log_floor) {
    Image out = rendered;
    for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            double &v = out[p * 3 + static_cast<std::size_t>(c)];
            v = std::clamp(std::exp(fit[c].a * std::log(std::max(v, log_floor)) + fit[c].b), 0.0,
                           1.0);
        }
    }
    return out;
}

EvalReport
evaluate(const std::vector<Image> &rendered, const std::vector<Image> &truth,
         const EvalOptions &opts) {
    if (rendered.size() != truth.size()) {
        throw Error(ErrorKind::DimensionMismatch, "need one ground-truth image per render");
    }
    for (std::size_t v = 0; v < rendered.size(); ++v) {
        if (!rendered[v].same_shape(truth[v]) || rendered[v].channels() != 3) {
            throw Error(ErrorKind::DimensionMismatch,
                        "view " + std::to_string(v) + ": render and ground truth differ in shape");
        }
    }
    EvalReport report;
    const auto fit_views = [&](std::size_t first, std::size_t last) {
        std::vector<const Image *> r, t;
        for (std::size_t v = first; v < last; ++v) {
            r.push_back(&rendered[v]);
            t.push_back(&truth[v]);
        }
        std::array<ChannelFit, 3> fit;
        for (int c = 0; c < 3; ++c) {
            fit[c] = fit_log_affine(r, t, c, opts.log_floor);
        }
        return fit;
    };
    if (opts.align == AlignMode::Global) {
        report.fits.push_back(fit_views(0, rendered.size()));
    }
    for (std::size_t v = 0; v < rendered.size(); ++v) {
        Image aligned;
        if (opts.align == AlignMode::None) {
            aligned = clamped(rendered[v]);
        } else {
            if (opts.align == AlignMode::PerView) {
                report.fits.push_back(fit_views(v, v + 1));
            }
            aligned = apply_alignment(rendered[v], report.fits.back(), opts.log_floor);
        }
        const Image gt = clamped(truth[v]);
        const double p = psnr_from_mse(mse(aligned, gt), opts.infinite_mse);
        report.psnr.push_back(p);
        report.psnr_infinite.push_back(std::isinf(p));
        report.ssim.push_back(ssim(aligned, gt, opts.ssim));
    }
    if (!rendered.empty()) {
        double psum = 0.0, ssum = 0.0;
        for (std::size_t v = 0; v < rendered.size(); ++v) {
            report.mean_psnr_infinite = report.mean_psnr_infinite || report.psnr_infinite[v];
            psum += report.psnr[v];
            ssum += report.ssim[v];
        }
        const double n = static_cast<double>(rendered.size());
        report.mean_psnr = psum / n;
        report.mean_ssim = ssum / n;
    }
    return report;
}

EvalReport
evaluate(const std::vector<RenderedImage> &rendered, const std::vector<Image> &truth,
         const EvalOptions &opts) {
    std::vector<Image> rgb;
    rgb.reserve(rendered.size());
    for (const RenderedImage &r : rendered) {
        rgb.push_back(r.rgb);
    }
    return evaluate(rgb, truth, opts);
}

std::string
EvalReport::to_json() const {
    nlohmann::json j;
    j["mean_psnr"] = number_or_inf(mean_psnr);
    j["mean_psnr_infinite"] = mean_psnr_infinite;
    j["mean_ssim"] = mean_ssim;
    nlohmann::json views = nlohmann::json::array();
    for (std::size_t v = 0; v < psnr.size(); ++v) {
        views.push_back({{"psnr", number_or_inf(psnr[v])},
                         {"psnr_infinite", static_cast<bool>(psnr_infinite[v])},
                         {"ssim", ssim[v]}});
    }
    j["views"] = views;
    nlohmann::json fj = nlohmann::json::array();
    for (const auto &f : fits) {
        nlohmann::json per = nlohmann::json::array();
        for (const ChannelFit &c : f) {
            per.push_back({{"a", c.a}, {"b", c.b}});
        }
        fj.push_back(per);
    }
    j["alignment"] = fj;
    return j.dump(2);
}

} // namespace evsplat
