// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/simulator.hpp"

#include "evsplat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace evsplat {

std::vector<CameraView>
make_trajectory(const TrajectorySpec &spec) {
    if (spec.n_views < 2) {
        throw Error(ErrorKind::BadSpec, "trajectory needs at least 2 views");
    }
    if (!(spec.duration > 0.0)) {
        throw Error(ErrorKind::BadSpec, "trajectory duration must be positive");
    }
    spec.intrinsics.validate();
    const Vec3 up = Vec3::UnitZ();
    std::vector<CameraView> views;
    views.reserve(static_cast<std::size_t>(spec.n_views));
    if (spec.kind == TrajectorySpec::Kind::Orbit) {
        if (!(spec.radius > 0.0)) {
            throw Error(ErrorKind::BadSpec, "orbit radius must be positive");
        }
        for (int k = 0; k < spec.n_views; ++k) {
            const double az = spec.azimuth_offset + 2.0 * std::numbers::pi * k / spec.n_views;
            const Vec3 eye =
                spec.center + spec.radius * Vec3(std::cos(spec.elevation) * std::cos(az),
                                                 std::cos(spec.elevation) * std::sin(az),
                                                 std::sin(spec.elevation));
            CameraView v = CameraView::look_at(eye, spec.center, up, spec.intrinsics);
            v.time = k * spec.duration / spec.n_views;
            views.push_back(v);
        }
        return views;
    }
    if ((spec.line_end - spec.line_start).norm() < 1e-12) {
        throw Error(ErrorKind::BadSpec, "line trajectory endpoints coincide");
    }
    for (int k = 0; k < spec.n_views; ++k) {
        const double s = static_cast<double>(k) / (spec.n_views - 1);
        const Vec3 eye = (1.0 - s) * spec.line_start + s * spec.line_end;
        CameraView v = CameraView::look_at(eye, spec.center, up, spec.intrinsics);
        v.time = s * spec.duration;
        views.push_back(v);
    }
    return views;
}

EventStream
frames_to_events(const std::vector<Image> &frames, const std::vector<double> &times,
                 const EventCameraModel &model, const BayerMask &mask, double log_floor) {
    if (frames.size() < 2) {
        throw Error(ErrorKind::TooFewFrames, "event simulation needs at least 2 frames");
    }
    if (times.size() != frames.size()) {
        throw Error(ErrorKind::DimensionMismatch, "one timestamp per frame required");
    }
    for (std::size_t k = 1; k < times.size(); ++k) {
        if (!(times[k] > times[k - 1])) {
            throw Error(ErrorKind::BadSpec, "frame timestamps must increase strictly");
        }
    }
    model.validate();
    const int w = frames.front().width();
    const int h = frames.front().height();
    for (const Image &f : frames) {
        if (f.width() != w || f.height() != h || f.channels() != 3) {
            throw Error(ErrorKind::DimensionMismatch, "frames differ in shape");
        }
    }
    const auto log_frame = [&](const Image &rgb) {
        Image sel = apply_bayer(rgb, mask);
        for (std::size_t i = 0; i < sel.size(); ++i) {
            sel[i] = std::log(std::max(sel[i], log_floor));
        }
        return sel;
    };

    const double delta = model.threshold;
    Image prev = log_frame(frames.front());
    const Image initial = prev;
    const std::size_t pixels = prev.size();
    std::vector<long> count(pixels, 0); // signed crossings emitted so far

    EventStream out;
    out.width = w;
    out.height = h;
    std::vector<Event> step;
    for (std::size_t k = 1; k < frames.size(); ++k) {
        const Image cur = log_frame(frames[k]);
        const double t0 = times[k - 1] * 1e6;
        const double t1 = times[k] * 1e6;
        step.clear();
        for (std::size_t px = 0; px < pixels; ++px) {
            const double ref = initial[px] + delta * static_cast<double>(count[px]);
            const double diff = cur[px] - ref;
            const long n = static_cast<long>(std::floor(std::abs(diff) / delta + 1e-9));
            if (n == 0) {
                continue;
            }
            const int pol = diff > 0.0 ? 1 : -1;
            const double span = cur[px] - prev[px];
            for (long j = 1; j <= n; ++j) {
                const double level = ref + pol * delta * static_cast<double>(j);
                double frac = span != 0.0 ? (level - prev[px]) / span : 1.0;
                frac = std::clamp(frac, 0.0, 1.0);
                Event e;
                e.t_us = std::llround(t0 + frac * (t1 - t0));
                e.x = static_cast<int>(px % static_cast<std::size_t>(w));
                e.y = static_cast<int>(px / static_cast<std::size_t>(w));
                e.polarity = pol;
                step.push_back(e);
            }
            count[px] += pol * n;
        }
        std::stable_sort(step.begin(), step.end(),
                         [](const Event &a, const Event &b) { return a.t_us < b.t_us; });
        out.events.insert(out.events.end(), step.begin(), step.end());
        prev = cur;
    }
    return out;
}

Image
synthesize_blur(const std::vector<Image> &frames) {
    if (frames.empty()) {
        throw Error(ErrorKind::TooFewFrames, "blur synthesis needs at least one frame");
    }
    // Running mean: identical frames reproduce the frame exactly.
    Image out = frames.front();
    for (std::size_t k = 1; k < frames.size(); ++k) {
        if (!frames[k].same_shape(out)) {
            throw Error(ErrorKind::DimensionMismatch, "blur frames differ in shape");
        }
        const double n = static_cast<double>(k + 1);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += (frames[k][i] - out[i]) / n;
        }
    }
    return out;
}

GaussianCloud
toy_ground_truth() {
    struct Spec {
        Vec3 mean;
        Vec3 scale;
        Vec3 axis;
        double angle;
        Vec3 rgb;
    };
    const Spec specs[5] = {
        {{0.0, 0.0, 0.0}, {0.28, 0.2, 0.16}, {0, 0, 1}, 0.4, {0.9, 0.15, 0.1}},
        {{0.45, 0.15, 0.12}, {0.12, 0.2, 0.1}, {1, 0, 0}, 0.7, {0.1, 0.85, 0.2}},
        {{-0.4, 0.3, -0.08}, {0.18, 0.1, 0.14}, {0, 1, 0}, -0.5, {0.15, 0.25, 0.95}},
        {{0.12, -0.42, 0.22}, {0.1, 0.16, 0.12}, {1, 1, 0}, 0.9, {0.95, 0.85, 0.1}},
        {{-0.22, -0.2, -0.3}, {0.15, 0.15, 0.09}, {0, 1, 1}, 1.2, {0.8, 0.2, 0.85}},
    };
    GaussianCloud cloud;
    cloud.sh_degree = 0;
    for (const Spec &s : specs) {
        Gaussian g;
        g.mean = s.mean;
        g.log_scale = s.scale.array().log();
        g.rotation = Quaternion::from_axis_angle(s.axis.normalized(), s.angle);
        g.opacity_logit = logit(0.99);
        g.sh = SHCoefficients(0);
        g.sh.bands[0] = (s.rgb - Vec3::Constant(0.5)) / kShC0;
        cloud.add(g);
    }
    return cloud;
}

SimulatedDataset
simulate_dataset(const GaussianCloud &truth, const SimulationConfig &cfg) {
    if (cfg.sim_frames < 2 || cfg.track_views < 2 || cfg.heldout_views < 0 ||
        cfg.blurred_frames < 0 || cfg.exposure_substeps < 1 || cfg.n_eiw < 1) {
        throw Error(ErrorKind::BadSpec, "invalid simulation configuration");
    }
    CameraView intr;
    intr.width = cfg.width;
    intr.height = cfg.height;
    intr.fx = intr.fy = cfg.focal;
    intr.cx = 0.5 * (cfg.width - 1);
    intr.cy = 0.5 * (cfg.height - 1);

    TrajectorySpec spec;
    spec.radius = cfg.orbit_radius;
    spec.elevation = cfg.elevation;
    spec.n_views = cfg.track_views;
    spec.duration = cfg.duration;
    spec.intrinsics = intr;

    SimulatedDataset ds;
    ds.background = cfg.background;
    ds.color = cfg.color;
    ds.track = make_trajectory(spec);

    RenderSettings rs;
    rs.background = cfg.background;

    const double t_last = ds.track.back().time;
    std::vector<Image> frames;
    std::vector<double> times;
    frames.reserve(static_cast<std::size_t>(cfg.sim_frames));
    for (int j = 0; j < cfg.sim_frames; ++j) {
        const double t = t_last * j / (cfg.sim_frames - 1);
        times.push_back(t);
        frames.push_back(render(truth, pose_at_time(ds.track, t), rs).rgb);
    }
    const BayerMask mask{cfg.width, cfg.height, cfg.color};
    ds.events = frames_to_events(frames, times, cfg.events, mask);
    frames.clear();

    // Held-out views sit halfway between track views.
    if (cfg.heldout_views > 0) {
        TrajectorySpec half = spec;
        half.azimuth_offset = std::numbers::pi / cfg.track_views;
        const std::vector<CameraView> between = make_trajectory(half);
        for (int j = 0; j < cfg.heldout_views; ++j) {
            const std::size_t k =
                static_cast<std::size_t>(j) * between.size() / static_cast<std::size_t>(cfg.heldout_views);
            CameraView v = between[k];
            v.time += 0.5 * cfg.duration / cfg.track_views;
            ds.heldout_views.push_back(v);
            ds.heldout_images.push_back(render(truth, v, rs).rgb);
        }
    }

    const double exposure = cfg.exposure_steps * cfg.duration / cfg.track_views;
    for (int j = 0; j < cfg.blurred_frames; ++j) {
        Exposure ex;
        const double room = std::max(0.0, t_last - exposure);
        ex.start = cfg.blurred_frames > 1 ? room * (j + 0.5) / cfg.blurred_frames : 0.0;
        ex.end = ex.start + exposure;
        ex.n_eiw = cfg.n_eiw;
        std::vector<Image> sub;
        for (int s = 0; s < cfg.exposure_substeps; ++s) {
            const double t = ex.start + (s + 0.5) * exposure / cfg.exposure_substeps;
            sub.push_back(render(truth, pose_at_time(ds.track, t), rs).rgb);
        }
        ex.image = synthesize_blur(sub);
        ds.exposures.push_back(std::move(ex));
    }
    return ds;
}

} // namespace evsplat
