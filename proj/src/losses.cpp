// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/losses.hpp"

#include "evsplat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace evsplat {

namespace {

std::vector<double>
gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(size));
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - half;
        k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (double &v : k) {
        v /= sum;
    }
    return k;
}

// Separable "same" convolution of one W x H plane with zero padding. The
// kernel is symmetric, so this operator is its own adjoint.
std::vector<double>
blur_plane(const std::vector<double> &in, int w, int h, const std::vector<double> &k) {
    const int half = static_cast<int>(k.size()) / 2;
    std::vector<double> tmp(in.size(), 0.0);
    std::vector<double> out(in.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int j = -half; j <= half; ++j) {
                const int xx = x + j;
                if (xx >= 0 && xx < w) {
                    s += k[static_cast<std::size_t>(j + half)] *
                         in[static_cast<std::size_t>(y) * w + xx];
                }
            }
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int j = -half; j <= half; ++j) {
                const int yy = y + j;
                if (yy >= 0 && yy < h) {
                    s += k[static_cast<std::size_t>(j + half)] *
                         tmp[static_cast<std::size_t>(yy) * w + x];
                }
            }
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    }
    return out;
}

std::vector<double>
extract_channel(const Image &img, int c) {
    std::vector<double> out(img.pixel_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = img[i * static_cast<std::size_t>(img.channels()) + static_cast<std::size_t>(c)];
    }
    return out;
}

struct SsimPlane {
    double sum = 0.0;
    std::vector<double> grad; // d(sum of SSIM map) / d a
};

SsimPlane
ssim_plane(const std::vector<double> &a, const std::vector<double> &b, int w, int h,
           const LossConfig &cfg, bool want_grad) {
    const std::vector<double> k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    const std::size_t n = a.size();
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const std::vector<double> mu_a = blur_plane(a, w, h, k);
    const std::vector<double> mu_b = blur_plane(b, w, h, k);
    const std::vector<double> e_aa = blur_plane(aa, w, h, k);
    const std::vector<double> e_bb = blur_plane(bb, w, h, k);
    const std::vector<double> e_ab = blur_plane(ab, w, h, k);

    const double c1 = cfg.ssim_c1;
    const double c2 = cfg.ssim_c2;
    SsimPlane out;
    std::vector<double> g_mu, g_eaa, g_eab;
    if (want_grad) {
        g_mu.resize(n);
        g_eaa.resize(n);
        g_eab.resize(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double ma = mu_a[i];
        const double mb = mu_b[i];
        const double a1 = 2.0 * ma * mb + c1;
        const double a2 = 2.0 * (e_ab[i] - ma * mb) + c2;
        const double b1 = ma * ma + mb * mb + c1;
        const double b2 = (e_aa[i] - ma * ma) + (e_bb[i] - mb * mb) + c2;
        const double den = b1 * b2;
        const double s = a1 * a2 / den;
        out.sum += s;
        if (want_grad) {
            // Partials of the SSIM value with respect to the filtered moments.
            g_mu[i] = (2.0 * mb * a2 - 2.0 * mb * a1) / den - s * 2.0 * ma / b1 +
                      s * 2.0 * ma / b2;
            g_eaa[i] = -s / b2;
            g_eab[i] = 2.0 * a1 / den;
        }
    }
    if (want_grad) {
        const std::vector<double> t_mu = blur_plane(g_mu, w, h, k);
        const std::vector<double> t_eaa = blur_plane(g_eaa, w, h, k);
        const std::vector<double> t_eab = blur_plane(g_eab, w, h, k);
        out.grad.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            out.grad[i] = t_mu[i] + 2.0 * a[i] * t_eaa[i] + b[i] * t_eab[i];
        }
    }
    return out;
}

void
require_same_shape(const Image &a, const Image &b, const char *what) {
    if (!a.same_shape(b)) {
        throw Error(ErrorKind::DimensionMismatch, what);
    }
}

double
sign(double v) {
    return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
}

} // namespace

void
LossConfig::validate() const {
    if (!(lambda_dssim >= 0.0 && lambda_dssim <= 1.0)) {
        throw Error(ErrorKind::BadSpec, "lambda_dssim must lie in [0, 1]");
    }
    if (!(gamma > 0.0) || !(log_floor > 0.0) || !(dssim_range > 0.0)) {
        throw Error(ErrorKind::BadSpec, "gamma, log floor and DSSIM range must be positive");
    }
    if (ssim_window < 1 || ssim_window % 2 == 0 || !(ssim_sigma > 0.0)) {
        throw Error(ErrorKind::BadSpec, "SSIM window must be odd and sigma positive");
    }
}

Image
log_radiance(const Image &rgb, const BayerMask &mask, double log_floor) {
    Image sel = apply_bayer(rgb, mask);
    for (std::size_t i = 0; i < sel.size(); ++i) {
        sel[i] = std::log(std::max(sel[i], log_floor));
    }
    return sel;
}

Image
log_radiance_backward(const Image &rgb, const BayerMask &mask, double log_floor,
                      const Image &upstream) {
    if (upstream.width() != rgb.width() || upstream.height() != rgb.height() ||
        upstream.channels() != 1) {
        throw Error(ErrorKind::DimensionMismatch, "log radiance gradient shape");
    }
    const Image sel = apply_bayer(rgb, mask);
    Image out(rgb.width(), rgb.height(), 3, 0.0);
    for (int y = 0; y < rgb.height(); ++y) {
        for (int x = 0; x < rgb.width(); ++x) {
            const double v = sel.at(x, y);
            if (!(v > log_floor)) {
                continue;
            }
            const double g = upstream.at(x, y) / v;
            if (mask.enabled) {
                out.at(x, y, static_cast<int>(BayerMask::channel_at(x, y))) = g;
            } else {
                for (int c = 0; c < 3; ++c) {
                    out.at(x, y, c) = g / 3.0;
                }
            }
        }
    }
    return out;
}

DssimResult
dssim(const Image &a, const Image &b, const LossConfig &cfg) {
    require_same_shape(a, b, "DSSIM inputs differ in shape");
    DssimResult r;
    r.d_a = Image(a.width(), a.height(), a.channels(), 0.0);
    if (a.empty()) {
        return r;
    }
    const double count = static_cast<double>(a.size());
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        const SsimPlane p = ssim_plane(extract_channel(a, c), extract_channel(b, c), a.width(),
                                       a.height(), cfg, true);
        total += p.sum;
        for (std::size_t i = 0; i < p.grad.size(); ++i) {
            r.d_a[i * static_cast<std::size_t>(a.channels()) + static_cast<std::size_t>(c)] =
                -0.5 * p.grad[i] / count;
        }
    }
    r.value = 0.5 * (1.0 - total / count);
    return r;
}

double
ssim(const Image &a, const Image &b, const LossConfig &cfg) {
    require_same_shape(a, b, "SSIM inputs differ in shape");
    if (a.empty()) {
        return 1.0;
    }
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        total += ssim_plane(extract_channel(a, c), extract_channel(b, c), a.width(), a.height(),
                            cfg, false)
                     .sum;
    }
    return total / static_cast<double>(a.size());
}

LossValue
event_loss(const Image &render_start, const Image &render_end, const EventFrame &frame,
           const BayerMask &mask, const LossConfig &cfg) {
    require_same_shape(render_start, render_end, "event loss renders differ in shape");
    if (render_start.channels() != 3 || frame.width != render_start.width() ||
        frame.height != render_start.height()) {
        throw Error(ErrorKind::DimensionMismatch, "event frame does not match render shape");
    }
    const Image log_s = log_radiance(render_start, mask, cfg.log_floor);
    const Image log_e = log_radiance(render_end, mask, cfg.log_floor);
    const std::size_t n = log_s.size();
    const double g = cfg.gamma;
    const double range = cfg.dssim_range;

    Image pred(log_s.width(), log_s.height(), 1);
    Image mapped_pred(pred.width(), pred.height(), 1);
    Image mapped_target(pred.width(), pred.height(), 1);
    double l1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        pred[i] = (log_e[i] - log_s[i]) / g;
        l1 += std::abs(pred[i] - frame.accumulated[i]);
        mapped_pred[i] = (pred[i] + range) / (2.0 * range);
        mapped_target[i] = (frame.accumulated[i] + range) / (2.0 * range);
    }
    l1 /= static_cast<double>(n);

    const double lambda = cfg.lambda_dssim;
    LossValue out;
    out.l1_part = l1;
    Image d_pred(pred.width(), pred.height(), 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        d_pred[i] = (1.0 - lambda) * sign(pred[i] - frame.accumulated[i]) / static_cast<double>(n);
    }
    if (lambda > 0.0) {
        const DssimResult ds = dssim(mapped_pred, mapped_target, cfg);
        out.dssim_part = ds.value;
        for (std::size_t i = 0; i < n; ++i) {
            d_pred[i] += lambda * ds.d_a[i] / (2.0 * range);
        }
    } else {
        out.dssim_part = dssim(mapped_pred, mapped_target, cfg).value;
    }
    out.total = (1.0 - lambda) * out.l1_part + lambda * out.dssim_part;

    Image d_log_e(pred.width(), pred.height(), 1);
    Image d_log_s(pred.width(), pred.height(), 1);
    double d_gamma = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d_log_e[i] = d_pred[i] / g;
        d_log_s[i] = -d_pred[i] / g;
        d_gamma -= d_pred[i] * pred[i] / g;
    }
    out.d_gamma = d_gamma;
    out.d_image_start = log_radiance_backward(render_start, mask, cfg.log_floor, d_log_s);
    out.d_image_end = log_radiance_backward(render_end, mask, cfg.log_floor, d_log_e);
    return out;
}

LossValue
blur_loss(const Image &render_blur, const Image &target, const LossConfig &cfg) {
    require_same_shape(render_blur, target, "blur loss inputs differ in shape");
    const std::size_t n = render_blur.size();
    const double lambda = cfg.lambda_dssim;
    LossValue out;
    out.d_blur_image = Image(render_blur.width(), render_blur.height(), render_blur.channels());
    double l1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = render_blur[i] - target[i];
        l1 += std::abs(d);
        out.d_blur_image[i] = (1.0 - lambda) * sign(d) / static_cast<double>(n);
    }
    out.l1_part = l1 / static_cast<double>(n);
    const DssimResult ds = dssim(render_blur, target, cfg);
    out.dssim_part = ds.value;
    if (lambda > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            out.d_blur_image[i] += lambda * ds.d_a[i];
        }
    }
    out.total = (1.0 - lambda) * out.l1_part + lambda * out.dssim_part;
    return out;
}

} // namespace evsplat
