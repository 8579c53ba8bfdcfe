// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/renderer.hpp"

#include "evsplat/errors.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <string>

namespace evsplat {

int
effective_threads(int requested) {
    int n = requested > 0 ? requested : omp_get_max_threads();
    if (const char *cap = std::getenv("EVSPLAT_THREADS")) {
        const int limit = std::atoi(cap);
        if (limit > 0) {
            n = std::min(n, limit);
        }
    }
    return std::max(n, 1);
}

namespace {

// Slack on the footprint so pixels that sit exactly on the alpha cutoff
// are never dropped by the tile test due to rounding.
constexpr double kFootprintMargin = 1e-3;
constexpr double kMinDet = 1e-12;
constexpr double kPowerSlack = 1e-6;

void
compute_footprint(ProjectedSplat &s, const RenderSettings &settings, int width, int height) {
    const int ts = settings.tile_size;
    const int tiles_x = (width + ts - 1) / ts;
    const int tiles_y = (height + ts - 1) / ts;
    if (settings.alpha_min <= 0.0) {
        s.tile_x0 = 0;
        s.tile_y0 = 0;
        s.tile_x1 = tiles_x;
        s.tile_y1 = tiles_y;
        return;
    }
    // alpha >= alpha_min  <=>  d^T cov^-1 d <= 2 ln(opacity / alpha_min); the
    // axis-aligned box of that ellipse has half-widths sqrt(q * cov_ii).
    const double q = 2.0 * std::log(s.opacity / settings.alpha_min);
    const double hx = std::sqrt(q * s.cov2d(0, 0)) + kFootprintMargin;
    const double hy = std::sqrt(q * s.cov2d(1, 1)) + kFootprintMargin;
    const double px0 = std::max(std::ceil(s.mean2d.x() - hx), 0.0);
    const double px1 = std::min(std::floor(s.mean2d.x() + hx), double(width - 1));
    const double py0 = std::max(std::ceil(s.mean2d.y() - hy), 0.0);
    const double py1 = std::min(std::floor(s.mean2d.y() + hy), double(height - 1));
    if (!(px0 <= px1) || !(py0 <= py1)) {
        s.visible = false;
        return;
    }
    s.tile_x0 = int(px0) / ts;
    s.tile_x1 = int(px1) / ts + 1;
    s.tile_y0 = int(py0) / ts;
    s.tile_y1 = int(py1) / ts + 1;
}

struct EntryGrad {
    Vec2 d_mean2d = Vec2::Zero();
    Vec3 d_conic = Vec3::Zero();
    Vec3 d_color = Vec3::Zero();
    double d_opacity = 0.0;
};

struct Contribution {
    std::uint32_t entry;
    double alpha;
    double gauss;
    double transmittance;
    double dx;
    double dy;
};

} // namespace

std::vector<ProjectedSplat>
project_cloud(const GaussianCloud &cloud, const CameraView &view,
              const RenderSettings &settings) {
    const std::size_t n = cloud.size();
    std::vector<ProjectedSplat> out(n);
    const Vec3 cam_center = view.camera_center();
    const int threads = effective_threads(settings.threads);

#pragma omp parallel for num_threads(threads) schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) {
        const Gaussian &g = cloud.gaussians[i];
        ProjectedSplat &s = out[i];
        const auto proj = try_project_gaussian(g.mean, g.covariance(), view);
        if (!proj || !proj->mean2d.allFinite() || !proj->cov2d.allFinite()) {
            continue;
        }
        const Mat2 &cov = proj->cov2d;
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
        if (!(det > kMinDet)) {
            continue;
        }
        s.opacity = g.opacity();
        if (settings.alpha_min > 0.0 && s.opacity < settings.alpha_min) {
            continue;
        }
        s.visible = true;
        s.mean2d = proj->mean2d;
        s.cov2d = cov;
        s.conic = {cov(1, 1) / det, -cov(0, 1) / det, cov(0, 0) / det};
        s.depth = proj->depth;
        compute_footprint(s, settings, view.width, view.height);
        if (!s.visible) {
            continue;
        }
        s.view_dir = (g.mean - cam_center).normalized();
        s.color = eval_sh(g.sh, s.view_dir, settings.active_sh_degree);
    }
    return out;
}

RenderedImage
render(const GaussianCloud &cloud, const CameraView &view, const RenderSettings &settings) {
    if (cloud.empty()) {
        throw Error(ErrorKind::EmptyCloud, "cannot render an empty cloud");
    }
    view.validate();
    if (settings.tile_size <= 0) {
        throw Error(ErrorKind::BadSpec, "tile size must be positive");
    }

    auto state = std::make_shared<ForwardState>();
    state->view = view;
    state->settings = settings;
    state->cloud_size = cloud.size();
    state->splats = project_cloud(cloud, view, settings);

    const int width = view.width;
    const int height = view.height;
    const int ts = settings.tile_size;
    state->tiles_x = (width + ts - 1) / ts;
    state->tiles_y = (height + ts - 1) / ts;
    const int num_tiles = state->tiles_x * state->tiles_y;

    // Global (depth, id) order; appending in that order keeps every tile list sorted.
    std::vector<std::uint32_t> order;
    order.reserve(cloud.size());
    for (std::uint32_t i = 0; i < cloud.size(); ++i) {
        if (state->splats[i].visible) {
            order.push_back(i);
        }
    }
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double da = state->splats[a].depth;
        const double db = state->splats[b].depth;
        return da < db || (da == db && a < b);
    });

    std::vector<std::size_t> counts(num_tiles + 1, 0);
    for (const std::uint32_t id : order) {
        const ProjectedSplat &s = state->splats[id];
        for (int ty = s.tile_y0; ty < s.tile_y1; ++ty) {
            for (int tx = s.tile_x0; tx < s.tile_x1; ++tx) {
                ++counts[ty * state->tiles_x + tx + 1];
            }
        }
    }
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    state->tile_offsets = counts;
    state->tile_entries.resize(counts.back());
    std::vector<std::size_t> cursor(counts.begin(), counts.end() - 1);
    for (const std::uint32_t id : order) {
        const ProjectedSplat &s = state->splats[id];
        for (int ty = s.tile_y0; ty < s.tile_y1; ++ty) {
            for (int tx = s.tile_x0; tx < s.tile_x1; ++tx) {
                state->tile_entries[cursor[ty * state->tiles_x + tx]++] = id;
            }
        }
    }

    state->packed.resize(state->tile_entries.size());
    for (std::size_t e = 0; e < state->tile_entries.size(); ++e) {
        const ProjectedSplat &s = state->splats[state->tile_entries[e]];
        const double floor = settings.alpha_min > 0.0
                                 ? std::log(settings.alpha_min / s.opacity) - kPowerSlack
                                 : -std::numeric_limits<double>::infinity();
        state->packed[e] = {s.mean2d.x(), s.mean2d.y(), s.conic[0], s.conic[1],
                            s.conic[2], s.opacity,    floor};
    }

    RenderedImage out;
    out.rgb = Image(width, height, 3);
    out.alpha = Image(width, height, 1);
    out.depth = Image(width, height, 1);
    out.contributors.assign(out.rgb.pixel_count(), 0);
    state->last_entry.assign(out.rgb.pixel_count(), 0);
    state->final_transmittance.assign(out.rgb.pixel_count(), 1.0);

    const double alpha_min = settings.alpha_min;
    const double t_min = settings.transmittance_min;
    const int threads = effective_threads(settings.threads);

#pragma omp parallel for num_threads(threads) schedule(dynamic, 1)
    for (int tile = 0; tile < num_tiles; ++tile) {
        const int tx = tile % state->tiles_x;
        const int ty = tile / state->tiles_x;
        const std::size_t begin = state->tile_offsets[tile];
        const std::size_t end = state->tile_offsets[tile + 1];
        for (int py = ty * ts; py < std::min((ty + 1) * ts, height); ++py) {
            for (int px = tx * ts; px < std::min((tx + 1) * ts, width); ++px) {
                double t = 1.0;
                Vec3 color = Vec3::Zero();
                double depth = 0.0;
                std::uint32_t used = 0;
                std::uint32_t contributors = 0;
                for (std::size_t e = begin; e < end; ++e) {
                    used = std::uint32_t(e - begin + 1);
                    const PackedEntry &p = state->packed[e];
                    const double dx = px - p.mx;
                    const double dy = py - p.my;
                    const double power =
                        -0.5 * (p.c0 * dx * dx + p.c2 * dy * dy) - p.c1 * dx * dy;
                    if (power < p.power_floor) {
                        continue;
                    }
                    const double alpha = p.opacity * std::exp(power);
                    if (alpha < alpha_min || alpha <= 0.0) {
                        continue;
                    }
                    const ProjectedSplat &s = state->splats[state->tile_entries[e]];
                    color += s.color * (alpha * t);
                    depth += s.depth * alpha * t;
                    t *= 1.0 - alpha;
                    ++contributors;
                    if (t < t_min) {
                        break;
                    }
                }
                const std::size_t pix = std::size_t(py) * width + px;
                state->last_entry[pix] = used;
                state->final_transmittance[pix] = t;
                out.contributors[pix] = contributors;
                for (int c = 0; c < 3; ++c) {
                    out.rgb.at(px, py, c) = color[c] + t * settings.background[c];
                }
                out.alpha.at(px, py) = 1.0 - t;
                out.depth.at(px, py) = depth;
            }
        }
    }

    out.state = std::move(state);
    return out;
}

GradientBundle
render_backward(const GaussianCloud &cloud, const RenderedImage &rendered,
                const Image &upstream) {
    const ForwardState *state = rendered.state.get();
    if (!state || state->cloud_size != cloud.size() ||
        state->last_entry.size() != rendered.rgb.pixel_count()) {
        throw Error(ErrorKind::MissingForwardState,
                    "backward pass requires the forward state of the same cloud");
    }
    const CameraView &view = state->view;
    const RenderSettings &settings = state->settings;
    if (upstream.width() != view.width || upstream.height() != view.height ||
        upstream.channels() != 3) {
        throw Error(ErrorKind::DimensionMismatch, "upstream gradient must be H x W x 3");
    }

    const int width = view.width;
    const int height = view.height;
    const int ts = settings.tile_size;
    const int num_tiles = state->tiles_x * state->tiles_y;
    const double alpha_min = settings.alpha_min;
    const int threads = effective_threads(settings.threads);

    // One accumulator per tile entry: tiles own disjoint slices, so the
    // tile loop is race-free and the reduction below runs in fixed order.
    std::vector<EntryGrad> entry_grads(state->tile_entries.size());

#pragma omp parallel for num_threads(threads) schedule(dynamic, 1)
    for (int tile = 0; tile < num_tiles; ++tile) {
        const int tx = tile % state->tiles_x;
        const int ty = tile / state->tiles_x;
        const std::size_t begin = state->tile_offsets[tile];
        std::vector<Contribution> replay;
        replay.reserve(state->tile_offsets[tile + 1] - begin);
        for (int py = ty * ts; py < std::min((ty + 1) * ts, height); ++py) {
            for (int px = tx * ts; px < std::min((tx + 1) * ts, width); ++px) {
                const std::size_t pix = std::size_t(py) * width + px;
                const Vec3 up(upstream.at(px, py, 0), upstream.at(px, py, 1),
                              upstream.at(px, py, 2));
                if (up.isZero(0.0)) {
                    continue;
                }
                // Replay the forward scan to recover per-contributor transmittance.
                replay.clear();
                double t = 1.0;
                const std::uint32_t used = state->last_entry[pix];
                for (std::uint32_t k = 0; k < used; ++k) {
                    const PackedEntry &p = state->packed[begin + k];
                    const double dx = px - p.mx;
                    const double dy = py - p.my;
                    const double power =
                        -0.5 * (p.c0 * dx * dx + p.c2 * dy * dy) - p.c1 * dx * dy;
                    if (power < p.power_floor) {
                        continue;
                    }
                    const double gauss = std::exp(power);
                    const double alpha = p.opacity * gauss;
                    if (alpha < alpha_min || alpha <= 0.0) {
                        continue;
                    }
                    replay.push_back({k, alpha, gauss, t, dx, dy});
                    t *= 1.0 - alpha;
                }

                // Back to front: `behind` is the color seen through the splat,
                // normalized to unit transmittance right after it.
                Vec3 behind = settings.background;
                for (auto it = replay.rbegin(); it != replay.rend(); ++it) {
                    const std::size_t e = begin + it->entry;
                    const ProjectedSplat &s = state->splats[state->tile_entries[e]];
                    EntryGrad &eg = entry_grads[e];
                    const double weight = it->alpha * it->transmittance;
                    eg.d_color += weight * up;
                    const double d_alpha = it->transmittance * up.dot(s.color - behind);
                    behind = it->alpha * s.color + (1.0 - it->alpha) * behind;

                    eg.d_opacity += d_alpha * it->gauss;
                    const double d_power = d_alpha * it->alpha;
                    const double dx = it->dx;
                    const double dy = it->dy;
                    eg.d_conic[0] += -0.5 * dx * dx * d_power;
                    eg.d_conic[1] += -dx * dy * d_power;
                    eg.d_conic[2] += -0.5 * dy * dy * d_power;
                    eg.d_mean2d.x() += (s.conic[0] * dx + s.conic[1] * dy) * d_power;
                    eg.d_mean2d.y() += (s.conic[2] * dy + s.conic[1] * dx) * d_power;
                }
            }
        }
    }

    const std::size_t n = cloud.size();
    std::vector<EntryGrad> splat_grads(n);
    for (std::size_t e = 0; e < state->tile_entries.size(); ++e) {
        EntryGrad &dst = splat_grads[state->tile_entries[e]];
        const EntryGrad &src = entry_grads[e];
        dst.d_mean2d += src.d_mean2d;
        dst.d_conic += src.d_conic;
        dst.d_color += src.d_color;
        dst.d_opacity += src.d_opacity;
    }

    GradientBundle out(n, cloud.sh_degree);
    const Vec3 cam_center = view.camera_center();

#pragma omp parallel for num_threads(threads) schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) {
        const ProjectedSplat &s = state->splats[i];
        if (!s.visible) {
            continue;
        }
        const Gaussian &g = cloud.gaussians[i];
        const EntryGrad &sg = splat_grads[i];
        out.visible[i] = 1;
        out.d_mean2d[i] = sg.d_mean2d;

        // conic = inverse(cov2d) with cov2d = [[a, b], [b, c]].
        const double a = s.cov2d(0, 0);
        const double b = s.cov2d(0, 1);
        const double c = s.cov2d(1, 1);
        const double det = a * c - b * b;
        const double inv_det2 = 1.0 / (det * det);
        const Vec3 &dq = sg.d_conic;
        const double d_a = (-c * c * dq[0] + b * c * dq[1] - b * b * dq[2]) * inv_det2;
        const double d_b =
            (2.0 * b * c * dq[0] + (-det - 2.0 * b * b) * dq[1] + 2.0 * a * b * dq[2]) *
            inv_det2;
        const double d_c = (-b * b * dq[0] + a * b * dq[1] - a * a * dq[2]) * inv_det2;
        Mat2 d_cov2d;
        d_cov2d << d_a, 0.5 * d_b, 0.5 * d_b, d_c;

        const Vec3 scale = g.scale();
        const Mat3 cov3d = covariance_from_factors(scale, g.rotation);
        const ProjectionBackward pb =
            project_gaussian_backward(g.mean, cov3d, view, sg.d_mean2d, d_cov2d);
        const CovarianceBackward cb = covariance_backward(scale, g.rotation, pb.d_cov3d);

        const ShBackward shb =
            eval_sh_backward(g.sh, s.view_dir, sg.d_color, settings.active_sh_degree);
        const Vec3 offset = g.mean - cam_center;
        const double dist = offset.norm();
        const Vec3 d_offset = (shb.d_dir - s.view_dir * s.view_dir.dot(shb.d_dir)) / dist;

        out.d_mean[i] = pb.d_mean + d_offset;
        out.d_log_scale[i] = cb.d_scale.cwiseProduct(scale);
        out.d_rotation[i] = cb.d_rotation;
        out.d_opacity_logit[i] = sg.d_opacity * s.opacity * (1.0 - s.opacity);
        out.d_sh[i] = shb.d_coeffs;
        out.d_sh[i].degree = cloud.sh_degree;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blur-aware rendering

void
BlurConfig::validate() const {
    if (n_eiw <= 0 || std::size_t(n_eiw) != sub_poses.size()) {
        throw Error(ErrorKind::BadSpec, "blur config needs exactly n_eiw sub-poses");
    }
    for (std::size_t i = 1; i < sub_poses.size(); ++i) {
        if (sub_poses[i].time < sub_poses[i - 1].time) {
            throw Error(ErrorKind::BadSpec, "blur sub-poses must be time ordered");
        }
    }
}

CameraView
pose_at_time(const std::vector<CameraView> &track, double time) {
    if (track.empty()) {
        throw Error(ErrorKind::BadSpec, "empty pose track");
    }
    if (time <= track.front().time) {
        CameraView v = track.front();
        v.time = time;
        return v;
    }
    if (time >= track.back().time) {
        CameraView v = track.back();
        v.time = time;
        return v;
    }
    const auto it = std::upper_bound(track.begin(), track.end(), time,
                                     [](double t, const CameraView &v) { return t < v.time; });
    const CameraView &b = *it;
    const CameraView &a = *(it - 1);
    const double s = (time - a.time) / (b.time - a.time);
    CameraView v = interpolate_view(a, b, s);
    v.time = time;
    return v;
}

BlurConfig
make_blur_config(const std::vector<CameraView> &track, double t_start, double t_end,
                 int n_eiw) {
    if (n_eiw <= 0 || !(t_end >= t_start)) {
        throw Error(ErrorKind::BadSpec, "invalid exposure interval or sub-pose count");
    }
    BlurConfig cfg;
    cfg.n_eiw = n_eiw;
    const double step = (t_end - t_start) / n_eiw;
    for (int i = 0; i < n_eiw; ++i) {
        cfg.sub_poses.push_back(pose_at_time(track, t_start + (i + 0.5) * step));
    }
    return cfg;
}

BlurRender
render_blur(const GaussianCloud &cloud, const BlurConfig &config,
            const RenderSettings &settings) {
    config.validate();
    BlurRender out;
    for (const CameraView &pose : config.sub_poses) {
        out.sub_renders.push_back(render(cloud, pose, settings));
    }
    const RenderedImage &first = out.sub_renders.front();
    out.image.rgb = first.rgb;
    out.image.alpha = first.alpha;
    out.image.depth = first.depth;
    out.image.contributors = first.contributors;
    for (std::size_t k = 1; k < out.sub_renders.size(); ++k) {
        const RenderedImage &r = out.sub_renders[k];
        for (std::size_t i = 0; i < r.rgb.size(); ++i) {
            out.image.rgb[i] += r.rgb[i];
        }
        for (std::size_t i = 0; i < r.alpha.size(); ++i) {
            out.image.alpha[i] += r.alpha[i];
            out.image.depth[i] += r.depth[i];
            out.image.contributors[i] += r.contributors[i];
        }
    }
    const double n = double(config.n_eiw);
    for (std::size_t i = 0; i < out.image.rgb.size(); ++i) {
        out.image.rgb[i] /= n;
    }
    for (std::size_t i = 0; i < out.image.alpha.size(); ++i) {
        out.image.alpha[i] /= n;
        out.image.depth[i] /= n;
    }
    return out;
}

GradientBundle
render_blur_backward(const GaussianCloud &cloud, const BlurRender &rendered,
                     const Image &upstream) {
    if (rendered.sub_renders.empty()) {
        throw Error(ErrorKind::MissingForwardState, "blur backward requires sub-renders");
    }
    const double n = double(rendered.sub_renders.size());
    Image scaled = upstream;
    for (std::size_t i = 0; i < scaled.size(); ++i) {
        scaled[i] /= n;
    }
    GradientBundle out = render_backward(cloud, rendered.sub_renders.front(), scaled);
    for (std::size_t k = 1; k < rendered.sub_renders.size(); ++k) {
        out.accumulate(render_backward(cloud, rendered.sub_renders[k], scaled));
    }
    return out;
}

} // namespace evsplat
