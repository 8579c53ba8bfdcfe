// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/optimizer.hpp"

#include "evsplat/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace evsplat {

namespace {

template <typename T>
void
keep_rows(std::vector<T> &v, const std::vector<unsigned char> &keep) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (keep[i]) {
            v[out++] = std::move(v[i]);
        }
    }
    v.resize(out);
}

void
keep_rows(GradientBundle &b, const std::vector<unsigned char> &keep) {
    keep_rows(b.d_mean, keep);
    keep_rows(b.d_log_scale, keep);
    keep_rows(b.d_rotation, keep);
    keep_rows(b.d_opacity_logit, keep);
    keep_rows(b.d_sh, keep);
    keep_rows(b.d_mean2d, keep);
    keep_rows(b.visible, keep);
}

void
append_zero_rows(GradientBundle &b, std::size_t count, int sh_degree) {
    GradientBundle extra(count, sh_degree);
    b.d_mean.insert(b.d_mean.end(), extra.d_mean.begin(), extra.d_mean.end());
    b.d_log_scale.insert(b.d_log_scale.end(), extra.d_log_scale.begin(), extra.d_log_scale.end());
    b.d_rotation.insert(b.d_rotation.end(), extra.d_rotation.begin(), extra.d_rotation.end());
    b.d_opacity_logit.insert(b.d_opacity_logit.end(), extra.d_opacity_logit.begin(),
                             extra.d_opacity_logit.end());
    b.d_sh.insert(b.d_sh.end(), extra.d_sh.begin(), extra.d_sh.end());
    b.d_mean2d.insert(b.d_mean2d.end(), extra.d_mean2d.begin(), extra.d_mean2d.end());
    b.visible.insert(b.visible.end(), extra.visible.begin(), extra.visible.end());
}

struct AdamCoeffs {
    double bias1;
    double bias2;
};

inline void
adam_update(double &p, double g, double &m, double &v, double lr, const AdamCoeffs &c) {
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
    p -= lr * (m / c.bias1) / (std::sqrt(v / c.bias2) + kAdamEps);
}

Vec3
random_color_dc(std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Vec3 rgb(u(rng), u(rng), u(rng));
    return (rgb - Vec3::Constant(0.5)) / kShC0;
}

double
mean_lr(const LearningRates &lr, int iter, int total) {
    if (total <= 0) {
        return lr.mean_init;
    }
    const double s = std::clamp(static_cast<double>(iter) / total, 0.0, 1.0);
    return std::exp((1.0 - s) * std::log(lr.mean_init) + s * std::log(lr.mean_final));
}

void
reset_opacity(GaussianCloud &cloud, AdamState &adam) {
    const double cap = logit(0.01);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        cloud.gaussians[i].opacity_logit = std::min(cloud.gaussians[i].opacity_logit, cap);
        adam.m.d_opacity_logit[i] = 0.0;
        adam.v.d_opacity_logit[i] = 0.0;
    }
}

} // namespace

void
TrainConfig::validate() const {
    if (iterations < 0 || refine_iterations < 0) {
        throw Error(ErrorKind::BadSpec, "iteration counts must be non-negative");
    }
    if (!(lr.mean_init > 0 && lr.mean_final > 0 && lr.sh > 0 && lr.opacity > 0 && lr.scale > 0 &&
          lr.rotation > 0 && lr.gamma > 0 && lr.sh_rest_factor > 0)) {
        throw Error(ErrorKind::BadSpec, "learning rates must be positive");
    }
    if (!(alpha_pro > 0.0 && alpha_pro < 1.0)) {
        throw Error(ErrorKind::BadSpec, "alpha_pro must lie in (0, 1)");
    }
    if (rounds < 1) {
        throw Error(ErrorKind::BadSpec, "rounds must be at least 1");
    }
    if (densify_interval < 1 || opacity_reset_interval < 1 || sh_increase_interval < 1) {
        throw Error(ErrorKind::BadSpec, "intervals must be positive");
    }
    if (sh_degree < 0 || sh_degree > kMaxShDegree) {
        throw Error(ErrorKind::BadSpec, "SH degree must lie in [0, 3]");
    }
    if (!(eta_alpha > 0.0) || !(init_cube_scale > 0.0)) {
        throw Error(ErrorKind::BadSpec, "eta_alpha and init cube scale must be positive");
    }
    loss.validate();
}

TrainingDataset
make_training_dataset(const EventStream &stream, const std::vector<CameraView> &track,
                      const EventCameraModel &model, bool color) {
    TrainingDataset ds;
    ds.model = model;
    ds.windows = slice_stream(stream, model);
    ds.mask = {stream.width, stream.height, color};
    for (const EventWindow &w : ds.windows) {
        ds.start_views.push_back(pose_at_time(track, static_cast<double>(w.start_time) * 1e-6));
        ds.end_views.push_back(pose_at_time(track, static_cast<double>(w.end_time) * 1e-6));
    }
    ds.dssim_range = 5.0 * model.threshold * polarity_count_quantile(ds.windows, 0.99);
    return ds;
}

double
camera_extent(const std::vector<CameraView> &views) {
    if (views.empty()) {
        return 1.0;
    }
    Vec3 mean = Vec3::Zero();
    for (const CameraView &v : views) {
        mean += v.camera_center();
    }
    mean /= static_cast<double>(views.size());
    double radius = 0.0;
    for (const CameraView &v : views) {
        radius = std::max(radius, (v.camera_center() - mean).norm());
    }
    return radius > 0.0 ? 1.1 * radius : 1.0;
}

std::string
TrainingLog::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "iter,loss,l1,dssim,num_splats,gamma\n";
    for (const LogRow &r : rows) {
        os << r.iter << ',' << r.loss << ',' << r.l1 << ',' << r.dssim << ',' << r.num_splats
           << ',' << r.gamma << '\n';
    }
    return os.str();
}

void
adam_step(GaussianCloud &cloud, AdamState &state, const GradientBundle &grad,
          const StepRates &rates, const ParamMask &mask) {
    if (state.size() != cloud.size() || grad.size() != cloud.size()) {
        throw Error(ErrorKind::DimensionMismatch, "optimizer state does not match the cloud");
    }
    ++state.step;
    const AdamCoeffs c{1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step)),
                       1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step))};
    const int coeffs = SHCoefficients::coeff_count(cloud.sh_degree);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        Gaussian &g = cloud.gaussians[i];
        for (int k = 0; k < 3; ++k) {
            if (mask.mean) {
                adam_update(g.mean[k], grad.d_mean[i][k], state.m.d_mean[i][k],
                            state.v.d_mean[i][k], rates.mean, c);
            }
            if (mask.scale) {
                adam_update(g.log_scale[k], grad.d_log_scale[i][k], state.m.d_log_scale[i][k],
                            state.v.d_log_scale[i][k], rates.scale, c);
            }
        }
        if (mask.rotation) {
            double *q[4] = {&g.rotation.w, &g.rotation.x, &g.rotation.y, &g.rotation.z};
            for (int k = 0; k < 4; ++k) {
                adam_update(*q[k], grad.d_rotation[i][k], state.m.d_rotation[i][k],
                            state.v.d_rotation[i][k], rates.rotation, c);
            }
        }
        if (mask.opacity) {
            adam_update(g.opacity_logit, grad.d_opacity_logit[i], state.m.d_opacity_logit[i],
                        state.v.d_opacity_logit[i], rates.opacity, c);
        }
        if (mask.sh) {
            for (int k = 0; k < coeffs; ++k) {
                const double lr = k == 0 ? rates.sh_dc : rates.sh_rest;
                for (int ch = 0; ch < 3; ++ch) {
                    adam_update(g.sh.bands[k][ch], grad.d_sh[i].bands[k][ch],
                                state.m.d_sh[i].bands[k][ch], state.v.d_sh[i].bands[k][ch], lr,
                                c);
                }
            }
        }
    }
}

std::vector<double>
nearest_neighbor_scale(const std::vector<Vec3> &points) {
    const std::size_t n = points.size();
    std::vector<double> out(n, 0.01);
    if (n < 2) {
        return out;
    }
    Vec3 lo = points.front(), hi = points.front();
    for (const Vec3 &p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Vec3 span = (hi - lo).cwiseMax(Vec3::Constant(1e-9));
    const int per_axis = std::clamp(static_cast<int>(std::cbrt(static_cast<double>(n) / 2.0)), 1, 128);
    const Vec3 cell = span / per_axis;
    const auto cell_of = [&](const Vec3 &p, int axis) {
        return std::clamp(static_cast<int>((p[axis] - lo[axis]) / cell[axis]), 0, per_axis - 1);
    };
    const auto flat = [&](int x, int y, int z) {
        return (static_cast<std::size_t>(z) * per_axis + y) * per_axis + x;
    };
    std::vector<std::size_t> start(static_cast<std::size_t>(per_axis) * per_axis * per_axis + 1, 0);
    for (const Vec3 &p : points) {
        ++start[flat(cell_of(p, 0), cell_of(p, 1), cell_of(p, 2)) + 1];
    }
    std::partial_sum(start.begin(), start.end(), start.begin());
    std::vector<std::size_t> items(n);
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 &p = points[i];
        items[fill[flat(cell_of(p, 0), cell_of(p, 1), cell_of(p, 2))]++] = i;
    }
    const double min_cell = cell.minCoeff();
    const int want = static_cast<int>(std::min<std::size_t>(3, n - 1));
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 &p = points[i];
        const int cx = cell_of(p, 0), cy = cell_of(p, 1), cz = cell_of(p, 2);
        double best[3] = {INFINITY, INFINITY, INFINITY};
        for (int r = 0;; ++r) {
            // Visit only the shell at Chebyshev distance r.
            for (int z = cz - r; z <= cz + r; ++z) {
                for (int y = cy - r; y <= cy + r; ++y) {
                    for (int x = cx - r; x <= cx + r; ++x) {
                        if (std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)}) != r ||
                            x < 0 || y < 0 || z < 0 || x >= per_axis || y >= per_axis ||
                            z >= per_axis) {
                            continue;
                        }
                        const std::size_t c = flat(x, y, z);
                        for (std::size_t k = start[c]; k < start[c + 1]; ++k) {
                            const std::size_t j = items[k];
                            if (j == i) {
                                continue;
                            }
                            const double d2 = (points[j] - p).squaredNorm();
                            if (d2 < best[2]) {
                                best[2] = d2;
                                std::sort(best, best + 3);
                            }
                        }
                    }
                }
            }
            const double reach = r * min_cell;
            if ((best[want - 1] < INFINITY && best[want - 1] <= reach * reach) || r > per_axis) {
                break;
            }
        }
        double mean_d2 = 0.0;
        for (int k = 0; k < want; ++k) {
            mean_d2 += best[k];
        }
        out[i] = std::sqrt(std::max(mean_d2 / want, 1e-7));
    }
    return out;
}

GaussianCloud
init_cloud_at(const std::vector<Vec3> &means, int sh_degree, std::mt19937_64 &rng) {
    const std::vector<double> scales = nearest_neighbor_scale(means);
    GaussianCloud cloud;
    cloud.sh_degree = sh_degree;
    cloud.gaussians.reserve(means.size());
    for (std::size_t i = 0; i < means.size(); ++i) {
        Gaussian g;
        g.mean = means[i];
        g.log_scale = Vec3::Constant(std::log(scales[i]));
        g.rotation = Quaternion::identity();
        g.opacity_logit = logit(0.1);
        g.sh = SHCoefficients(sh_degree);
        g.sh.bands[0] = random_color_dc(rng);
        cloud.add(std::move(g));
    }
    return cloud;
}

GaussianCloud
init_random_cloud(const TrainConfig &cfg, std::mt19937_64 &rng) {
    if (cfg.init_count <= 0) {
        throw Error(ErrorKind::BadSpec, "init_count must be positive");
    }
    const double l = cfg.init_cube_scale;
    std::uniform_real_distribution<double> u(-l, l);
    std::vector<Vec3> means(static_cast<std::size_t>(cfg.init_count));
    for (Vec3 &m : means) {
        m = cfg.init_center + Vec3(u(rng), u(rng), u(rng));
        if (cfg.forward_facing) {
            m.z() += l;
        }
    }
    return init_cloud_at(means, cfg.sh_degree, rng);
}

void
DensifyStats::add(const GradientBundle &grad, int width, int height) {
    for (std::size_t i = 0; i < grad.size() && i < count.size(); ++i) {
        if (!grad.visible[i]) {
            continue;
        }
        const Vec2 ndc(grad.d_mean2d[i].x() * 0.5 * width, grad.d_mean2d[i].y() * 0.5 * height);
        grad_norm_sum[i] += ndc.norm();
        ++count[i];
    }
}

void
densify_and_prune(GaussianCloud &cloud, const DensifyStats &stats, const TrainConfig &cfg,
                  double extent, std::mt19937_64 &rng, AdamState *adam) {
    const std::size_t n = cloud.size();
    const bool have_stats = stats.count.size() == n;
    const double dense_limit = cfg.percent_dense * extent;
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<unsigned char> keep(n, 1);
    std::vector<Gaussian> added;
    for (std::size_t i = 0; i < n && have_stats; ++i) {
        if (!(stats.mean(i) > cfg.densify_grad_threshold)) {
            continue;
        }
        const Gaussian &g = cloud.gaussians[i];
        if (g.scale().maxCoeff() <= dense_limit) {
            added.push_back(g);
            continue;
        }
        const Mat3 rot = g.rotation.normalized().to_matrix();
        const Vec3 s = g.scale();
        for (int child = 0; child < 2; ++child) {
            Gaussian c = g;
            const Vec3 z(normal(rng), normal(rng), normal(rng));
            c.mean = g.mean + rot * s.cwiseProduct(z);
            c.log_scale = g.log_scale - Vec3::Constant(std::log(1.6));
            added.push_back(std::move(c));
        }
        keep[i] = 0;
    }
    const std::size_t added_count = added.size();
    for (Gaussian &g : added) {
        cloud.gaussians.push_back(std::move(g));
    }
    keep.resize(cloud.size(), 1);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (cloud.gaussians[i].opacity() < cfg.prune_opacity) {
            keep[i] = 0;
        }
    }
    if (std::none_of(keep.begin(), keep.end(), [](unsigned char k) { return k != 0; })) {
        throw Error(ErrorKind::EmptyCloud, "pruning removed every splat");
    }
    keep_rows(cloud.gaussians, keep);
    if (adam) {
        append_zero_rows(adam->m, added_count, cloud.sh_degree);
        append_zero_rows(adam->v, added_count, cloud.sh_degree);
        keep_rows(adam->m, keep);
        keep_rows(adam->v, keep);
    }
}

std::vector<Vec3>
progressive_filter(const GaussianCloud &cloud, double alpha_pro) {
    std::vector<Vec3> out;
    for (const Gaussian &g : cloud.gaussians) {
        if (g.opacity() > alpha_pro) {
            out.push_back(g.mean);
        }
    }
    if (out.empty()) {
        throw Error(ErrorKind::NoSurvivors,
                    "no splat has opacity above " + std::to_string(alpha_pro));
    }
    return out;
}

TrainResult
train_round(GaussianCloud cloud, const TrainingDataset &dataset, const TrainConfig &cfg,
            int round, double gamma) {
    if (dataset.windows.empty()) {
        throw Error(ErrorKind::EmptyDataset, "no event windows to train on");
    }
    if (dataset.start_views.size() != dataset.size() || dataset.end_views.size() != dataset.size()) {
        throw Error(ErrorKind::DimensionMismatch, "every window needs start and end poses");
    }
    cfg.validate();
    TrainResult result;
    result.gamma = gamma > 0.0 ? gamma : cfg.loss.gamma;
    if (cfg.iterations == 0) {
        result.cloud = std::move(cloud);
        return result;
    }
    if (cloud.empty()) {
        throw Error(ErrorKind::EmptyCloud, "cannot train an empty cloud");
    }

    const double extent =
        cfg.scene_extent > 0.0 ? cfg.scene_extent : camera_extent(dataset.start_views);
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(round), 0x7261696eULL));
    AdamState adam(cloud.size(), cloud.sh_degree);
    DensifyStats stats(cloud.size());
    LossConfig lc = cfg.loss;
    lc.dssim_range = dataset.dssim_range;
    const int width = dataset.start_views.front().width;
    const int height = dataset.start_views.front().height;

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    for (int it = 1; it <= cfg.iterations; ++it) {
        if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t idx = order[cursor++];
        const std::uint64_t noise_seed = mix_seed(
            cfg.seed, (static_cast<std::uint64_t>(round) << 32) | static_cast<std::uint64_t>(it),
            idx);
        const EventFrame frame = accumulate(dataset.windows[idx], dataset.model, noise_seed);

        RenderSettings rs = cfg.render;
        rs.active_sh_degree = std::min(cloud.sh_degree, (it - 1) / cfg.sh_increase_interval);
        const RenderedImage r0 = render(cloud, dataset.start_views[idx], rs);
        const RenderedImage r1 = render(cloud, dataset.end_views[idx], rs);
        lc.gamma = result.gamma;
        const LossValue lv = event_loss(r0.rgb, r1.rgb, frame, dataset.mask, lc);
        GradientBundle grad = render_backward(cloud, r0, lv.d_image_start);
        const GradientBundle grad_end = render_backward(cloud, r1, lv.d_image_end);
        stats.add(grad, width, height);
        stats.add(grad_end, width, height);
        grad.accumulate(grad_end);

        StepRates rates;
        rates.mean = mean_lr(cfg.lr, it - 1, cfg.iterations) * extent;
        rates.scale = cfg.lr.scale;
        rates.rotation = cfg.lr.rotation;
        rates.opacity = cfg.lr.opacity;
        rates.sh_dc = cfg.lr.sh;
        rates.sh_rest = cfg.lr.sh * cfg.lr.sh_rest_factor;
        adam_step(cloud, adam, grad, rates);
        if (cfg.learn_gamma) {
            const AdamCoeffs c{1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.step)),
                               1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.step))};
            adam_update(result.gamma, lv.d_gamma, adam.gamma_m, adam.gamma_v, cfg.lr.gamma, c);
            result.gamma = std::max(result.gamma, 0.05);
        }

        if (it >= cfg.densify_from && it <= cfg.densify_until && it % cfg.densify_interval == 0) {
            densify_and_prune(cloud, stats, cfg, extent, rng, &adam);
            stats.reset(cloud.size());
        }
        if (it % cfg.opacity_reset_interval == 0 && it <= cfg.densify_until &&
            it < cfg.iterations) {
            reset_opacity(cloud, adam);
        }
        result.log.rows.push_back(
            {round, it, lv.total, lv.l1_part, lv.dssim_part, cloud.size(), result.gamma});
    }
    result.cloud = std::move(cloud);
    return result;
}

TrainResult
train_progressive(const TrainingDataset &dataset, const TrainConfig &cfg,
                  const RoundCallback &on_round) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0, 0x696e6974ULL));
    GaussianCloud cloud = init_random_cloud(cfg, rng);
    TrainResult last;
    TrainingLog log;
    for (int round = 1; round <= cfg.rounds; ++round) {
        double gamma = cfg.loss.gamma;
        if (round > 1) {
            try {
                if (cfg.carry_params) {
                    GaussianCloud kept;
                    kept.sh_degree = last.cloud.sh_degree;
                    for (const Gaussian &g : last.cloud.gaussians) {
                        if (g.opacity() > cfg.alpha_pro) {
                            kept.add(g);
                        }
                    }
                    progressive_filter(last.cloud, cfg.alpha_pro);
                    cloud = std::move(kept);
                    gamma = last.gamma;
                } else {
                    cloud = init_cloud_at(progressive_filter(last.cloud, cfg.alpha_pro),
                                          cfg.sh_degree, rng);
                }
            } catch (const Error &e) {
                if (e.kind() != ErrorKind::NoSurvivors) {
                    throw;
                }
                spdlog::warn("round {}: {}; falling back to random initialization", round,
                             e.what());
                cloud = init_random_cloud(cfg, rng);
            }
        }
        spdlog::info("round {}: training {} splats for {} iterations", round, cloud.size(),
                     cfg.iterations);
        last = train_round(std::move(cloud), dataset, cfg, round, gamma);
        log.rows.insert(log.rows.end(), last.log.rows.begin(), last.log.rows.end());
        if (on_round) {
            on_round(round, last);
        }
    }
    last.log = std::move(log);
    return last;
}

GaussianCloud
refine_appearance(GaussianCloud cloud, const std::vector<BlurTarget> &frames,
                  const TrainConfig &cfg, TrainingLog *log) {
    if (frames.empty()) {
        throw Error(ErrorKind::EmptyRefinementSet, "no blurred frames to refine against");
    }
    if (cfg.refine_iterations == 0) {
        return cloud;
    }
    if (cloud.empty()) {
        throw Error(ErrorKind::EmptyCloud, "cannot refine an empty cloud");
    }
    cfg.loss.validate();
    AdamState adam(cloud.size(), cloud.sh_degree);
    StepRates rates;
    rates.opacity = cfg.lr.opacity * cfg.eta_alpha;
    rates.sh_dc = cfg.lr.sh;
    rates.sh_rest = cfg.lr.sh * cfg.lr.sh_rest_factor;
    const ParamMask mask{false, false, false, true, true};
    std::mt19937_64 rng(mix_seed(cfg.seed, 0, 0x726566696eULL));
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    for (int it = 1; it <= cfg.refine_iterations; ++it) {
        if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const BlurTarget &t = frames[order[cursor++]];
        const BlurRender br = render_blur(cloud, t.config, cfg.render);
        const LossValue lv = blur_loss(br.image.rgb, t.image, cfg.loss);
        const GradientBundle grad = render_blur_backward(cloud, br, lv.d_blur_image);
        adam_step(cloud, adam, grad, rates, mask);
        if (log) {
            log->rows.push_back(
                {0, it, lv.total, lv.l1_part, lv.dssim_part, cloud.size(), cfg.loss.gamma});
        }
    }
    return cloud;
}

} // namespace evsplat
