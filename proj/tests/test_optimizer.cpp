// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/errors.hpp"
#include "evsplat/optimizer.hpp"
#include "evsplat/simulator.hpp"
#include "support/test_scenes.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace evsplat {
namespace {

void
expect_throws_kind(const std::function<void()> &fn, ErrorKind kind) {
    try {
        fn();
        FAIL() << "expected " << to_string(kind);
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

bool
same_cloud(const GaussianCloud &a, const GaussianCloud &b) {
    if (a.size() != b.size() || a.sh_degree != b.sh_degree) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Gaussian &x = a.gaussians[i];
        const Gaussian &y = b.gaussians[i];
        if (x.mean != y.mean || x.log_scale != y.log_scale || !(x.rotation == y.rotation) ||
            x.opacity_logit != y.opacity_logit) {
            return false;
        }
        for (int k = 0; k < x.sh.coeff_count(); ++k) {
            if (x.sh.bands[k] != y.sh.bands[k]) {
                return false;
            }
        }
    }
    return true;
}

GaussianCloud
cloud_with_opacities(const std::vector<double> &opacities) {
    GaussianCloud c;
    c.sh_degree = 0;
    for (std::size_t i = 0; i < opacities.size(); ++i) {
        Gaussian g;
        g.mean = Vec3(static_cast<double>(i), 0.0, 0.0);
        g.log_scale = Vec3::Constant(std::log(0.1));
        g.opacity_logit = logit(opacities[i]);
        c.add(g);
    }
    return c;
}

/// Tiny simulated dataset shared by the training tests.
struct SmallScene {
    SimulatedDataset sim;
    TrainingDataset data;
    TrainConfig cfg;

    SmallScene() {
        SimulationConfig sc;
        sc.width = sc.height = 16;
        sc.focal = 16.0;
        sc.track_views = 20;
        sc.sim_frames = 40;
        sc.heldout_views = 2;
        sc.blurred_frames = 2;
        sc.exposure_substeps = 3;
        sc.events.window_event_count = 60;
        sim = simulate_dataset(toy_ground_truth(), sc);
        data = make_training_dataset(sim.events, sim.track, sc.events, true);
        cfg.iterations = 25;
        cfg.init_count = 60;
        cfg.init_cube_scale = 0.6;
        cfg.sh_degree = 1;
        cfg.densify_from = 10;
        cfg.densify_interval = 10;
        cfg.densify_until = 20;
        cfg.opacity_reset_interval = 15;
        cfg.sh_increase_interval = 10;
        cfg.refine_iterations = 10;
        cfg.render.background = sc.background;
        cfg.seed = 11;
    }
};

const SmallScene &
small_scene() {
    static const SmallScene scene;
    return scene;
}

TEST(Init, SameSeedSameCloud) {
    TrainConfig cfg;
    cfg.init_count = 500;
    std::mt19937_64 a(4), b(4), c(5);
    const GaussianCloud x = init_random_cloud(cfg, a);
    EXPECT_TRUE(same_cloud(x, init_random_cloud(cfg, b)));
    EXPECT_FALSE(same_cloud(x, init_random_cloud(cfg, c)));
}

TEST(Init, PointsStayInsideTheCube) {
    TrainConfig cfg;
    cfg.init_count = 100000;
    cfg.init_cube_scale = 0.2;
    cfg.sh_degree = 3;
    std::mt19937_64 rng(8);
    const GaussianCloud cloud = init_random_cloud(cfg, rng);
    ASSERT_EQ(cloud.size(), 100000u);
    Vec3 lo = Vec3::Constant(1e9), hi = Vec3::Constant(-1e9);
    for (const Gaussian &g : cloud.gaussians) {
        lo = lo.cwiseMin(g.mean);
        hi = hi.cwiseMax(g.mean);
        ASSERT_NEAR(g.opacity(), 0.1, 1e-12);
        ASSERT_TRUE(g.rotation == Quaternion::identity());
        ASSERT_TRUE(g.log_scale.allFinite());
        const Vec3 rgb = g.sh.bands[0] * kShC0 + Vec3::Constant(0.5);
        ASSERT_GE(rgb.minCoeff(), -1e-12);
        ASSERT_LE(rgb.maxCoeff(), 1.0 + 1e-12);
        for (int k = 1; k < 16; ++k) {
            ASSERT_TRUE(g.sh.bands[k].isZero(0.0));
        }
    }
    for (int k = 0; k < 3; ++k) {
        EXPECT_GE(lo[k], -0.2);
        EXPECT_LE(hi[k], 0.2);
        EXPECT_LT(lo[k], -0.199);
        EXPECT_GT(hi[k], 0.199);
    }
}

TEST(Init, ForwardFacingShiftsDepth) {
    TrainConfig cfg;
    cfg.init_count = 2000;
    cfg.init_cube_scale = 0.5;
    cfg.forward_facing = true;
    std::mt19937_64 rng(1);
    for (const Gaussian &g : init_random_cloud(cfg, rng).gaussians) {
        EXPECT_GE(g.mean.z(), 0.0);
        EXPECT_LE(g.mean.z(), 1.0);
    }
}

TEST(Init, BadCount) {
    TrainConfig cfg;
    cfg.init_count = 0;
    std::mt19937_64 rng(1);
    expect_throws_kind([&] { init_random_cloud(cfg, rng); }, ErrorKind::BadSpec);
}

// Brute-force oracle for the grid search.
TEST(Init, NearestNeighborScaleMatchesBruteForce) {
    std::mt19937_64 rng(12);
    for (const double spread : {0.01, 1.0, 50.0}) {
        std::uniform_real_distribution<double> u(-spread, spread);
        std::vector<Vec3> pts(700);
        for (Vec3 &p : pts) {
            p = Vec3(u(rng), u(rng), 0.3 * u(rng));
        }
        pts.push_back(pts[3]); // a duplicate point
        const std::vector<double> got = nearest_neighbor_scale(pts);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            std::vector<double> d;
            for (std::size_t j = 0; j < pts.size(); ++j) {
                if (j != i) {
                    d.push_back((pts[j] - pts[i]).squaredNorm());
                }
            }
            std::sort(d.begin(), d.end());
            const double want = std::sqrt(std::max((d[0] + d[1] + d[2]) / 3.0, 1e-7));
            ASSERT_NEAR(got[i], want, 1e-12 * std::max(1.0, want)) << i << " spread " << spread;
        }
    }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    GaussianCloud cloud = cloud_with_opacities({0.5, 0.3});
    AdamState state(2, 0);
    GradientBundle g(2, 0);
    g.d_mean[0] = Vec3(0.5, -2.0, 0.0);
    g.d_opacity_logit[1] = 3.0;
    StepRates r;
    r.mean = 0.01;
    r.opacity = 0.05;
    const GaussianCloud before = cloud;
    adam_step(cloud, state, g, r);
    // With bias correction the first update is lr * g / (|g| + eps).
    EXPECT_NEAR(cloud.gaussians[0].mean.x(), before.gaussians[0].mean.x() - 0.01, 1e-15);
    EXPECT_NEAR(cloud.gaussians[0].mean.y(), before.gaussians[0].mean.y() + 0.01, 1e-15);
    EXPECT_EQ(cloud.gaussians[0].mean.z(), before.gaussians[0].mean.z());
    EXPECT_NEAR(cloud.gaussians[1].opacity_logit, before.gaussians[1].opacity_logit - 0.05, 1e-15);
    EXPECT_EQ(state.step, 1);
    EXPECT_NEAR(state.m.d_mean[0].x(), 0.05, 1e-15);
    EXPECT_NEAR(state.v.d_mean[0].y(), 0.004, 1e-15);
}

TEST(Adam, MatchesScalarReference) {
    double p = 1.0, m = 0.0, v = 0.0;
    GaussianCloud cloud = cloud_with_opacities({0.5});
    cloud.gaussians[0].opacity_logit = p;
    AdamState state(1, 0);
    StepRates r;
    r.opacity = 0.1;
    for (int t = 1; t <= 20; ++t) {
        const double grad = std::sin(0.7 * t) + 0.2;
        GradientBundle g(1, 0);
        g.d_opacity_logit[0] = grad;
        adam_step(cloud, state, g, r);
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad * grad;
        const double mh = m / (1.0 - std::pow(0.9, t));
        const double vh = v / (1.0 - std::pow(0.999, t));
        p -= 0.1 * mh / (std::sqrt(vh) + 1e-15);
        ASSERT_NEAR(cloud.gaussians[0].opacity_logit, p, 1e-13) << t;
    }
}

TEST(Adam, MaskedGroupsAreUntouched) {
    std::mt19937_64 rng(3);
    GaussianCloud cloud = test::random_cloud(rng, 5, 2);
    AdamState state(5, 2);
    GradientBundle g(5, 2);
    for (std::size_t i = 0; i < 5; ++i) {
        g.d_mean[i] = Vec3::Constant(1.0);
        g.d_log_scale[i] = Vec3::Constant(1.0);
        g.d_rotation[i] = Vec4::Constant(1.0);
        g.d_opacity_logit[i] = 1.0;
        for (int k = 0; k < 9; ++k) {
            g.d_sh[i].bands[k] = Vec3::Constant(1.0);
        }
    }
    StepRates r{0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    const GaussianCloud before = cloud;
    adam_step(cloud, state, g, r, ParamMask{false, false, false, true, true});
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(cloud.gaussians[i].mean, before.gaussians[i].mean);
        EXPECT_EQ(cloud.gaussians[i].log_scale, before.gaussians[i].log_scale);
        EXPECT_TRUE(cloud.gaussians[i].rotation == before.gaussians[i].rotation);
        EXPECT_NE(cloud.gaussians[i].opacity_logit, before.gaussians[i].opacity_logit);
        EXPECT_TRUE(state.m.d_mean[i].isZero(0.0));
    }
}

TEST(Adam, ShapeMismatchThrows) {
    GaussianCloud cloud = cloud_with_opacities({0.5, 0.5});
    AdamState state(1, 0);
    GradientBundle g(2, 0);
    expect_throws_kind([&] { adam_step(cloud, state, g, {}); }, ErrorKind::DimensionMismatch);
}

TEST(Densify, ZeroStatsOnlyPrunes) {
    GaussianCloud cloud = cloud_with_opacities({0.5, 0.001, 0.9, 0.004, 0.2});
    DensifyStats stats(cloud.size());
    TrainConfig cfg;
    std::mt19937_64 rng(1);
    AdamState adam(cloud.size(), 0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        adam.m.d_opacity_logit[i] = static_cast<double>(i);
    }
    densify_and_prune(cloud, stats, cfg, 1.0, rng, &adam);
    ASSERT_EQ(cloud.size(), 3u);
    ASSERT_EQ(adam.size(), 3u);
    EXPECT_NEAR(cloud.gaussians[1].opacity(), 0.9, 1e-12);
    // Moments follow their splats.
    EXPECT_EQ(adam.m.d_opacity_logit[0], 0.0);
    EXPECT_EQ(adam.m.d_opacity_logit[1], 2.0);
    EXPECT_EQ(adam.m.d_opacity_logit[2], 4.0);
}

TEST(Densify, SplitReplacesParentWithTwoChildren) {
    GaussianCloud cloud = cloud_with_opacities({0.5, 0.5, 0.5});
    cloud.gaussians[1].log_scale = Vec3::Constant(std::log(0.5)); // large: split
    DensifyStats stats(3);
    stats.grad_norm_sum[1] = 1.0;
    stats.count[1] = 1;
    TrainConfig cfg;
    std::mt19937_64 rng(2);
    AdamState adam(3, 0);
    adam.v.d_opacity_logit = {7.0, 8.0, 9.0};
    densify_and_prune(cloud, stats, cfg, 1.0, rng, &adam);
    ASSERT_EQ(cloud.size(), 4u);
    ASSERT_EQ(adam.size(), 4u);
    EXPECT_EQ(cloud.gaussians[0].mean, Vec3(0, 0, 0));
    EXPECT_EQ(cloud.gaussians[1].mean, Vec3(2, 0, 0));
    for (int k = 2; k < 4; ++k) {
        EXPECT_NEAR(cloud.gaussians[k].scale().x(), 0.5 / 1.6, 1e-12);
        EXPECT_EQ(adam.v.d_opacity_logit[k], 0.0);
    }
    EXPECT_EQ(adam.v.d_opacity_logit[0], 7.0);
    EXPECT_EQ(adam.v.d_opacity_logit[1], 9.0);
}

TEST(Densify, CloneKeepsParent) {
    GaussianCloud cloud = cloud_with_opacities({0.5, 0.5});
    cloud.gaussians[0].log_scale = Vec3::Constant(std::log(0.001));
    DensifyStats stats(2);
    stats.grad_norm_sum[0] = 1.0;
    stats.count[0] = 2;
    TrainConfig cfg;
    std::mt19937_64 rng(2);
    densify_and_prune(cloud, stats, cfg, 1.0, rng, nullptr);
    ASSERT_EQ(cloud.size(), 3u);
    EXPECT_EQ(cloud.gaussians[2].mean, cloud.gaussians[0].mean);
    EXPECT_EQ(cloud.gaussians[2].log_scale, cloud.gaussians[0].log_scale);
}

TEST(Densify, EverythingPrunedThrows) {
    GaussianCloud cloud = cloud_with_opacities({0.001, 0.004});
    DensifyStats stats(2);
    TrainConfig cfg;
    std::mt19937_64 rng(2);
    expect_throws_kind([&] { densify_and_prune(cloud, stats, cfg, 1.0, rng); },
                       ErrorKind::EmptyCloud);
}

TEST(Densify, StatsScaleToDeviceCoordinates) {
    GradientBundle g(2, 0);
    g.d_mean2d[0] = Vec2(0.1, 0.0);
    g.d_mean2d[1] = Vec2(1.0, 1.0);
    g.visible[0] = 1;
    DensifyStats s(2);
    s.add(g, 20, 10);
    s.add(g, 20, 10);
    EXPECT_NEAR(s.mean(0), 1.0, 1e-15);
    EXPECT_EQ(s.count[1], 0);
    EXPECT_EQ(s.mean(1), 0.0);
}

TEST(ProgressiveFilter, Examples) {
    const GaussianCloud c = cloud_with_opacities({0.95, 0.5, 0.91});
    const auto kept = progressive_filter(c, 0.9);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept[0], c.gaussians[0].mean);
    EXPECT_EQ(kept[1], c.gaussians[2].mean);
    EXPECT_EQ(progressive_filter(c, 0.0).size(), 3u);
    expect_throws_kind([&] { progressive_filter(c, 1.0); }, ErrorKind::NoSurvivors);
}

TEST(ProgressiveFilter, MonotoneInThreshold) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> ops(30);
        for (double &o : ops) {
            o = std::clamp(u(rng), 1e-6, 1.0 - 1e-6);
        }
        const GaussianCloud c = cloud_with_opacities(ops);
        std::size_t prev = c.size();
        for (double a = 0.0; a < 1.0; a += 0.05) {
            std::size_t n = 0;
            try {
                n = progressive_filter(c, a).size();
            } catch (const Error &) {
                n = 0;
            }
            EXPECT_LE(n, prev);
            prev = n;
        }
    }
}

TEST(TrainRound, ZeroIterationsLeavesCloudUnchanged) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.iterations = 0;
    std::mt19937_64 rng(1);
    const GaussianCloud init = init_random_cloud(cfg, rng);
    const TrainResult r = train_round(init, s.data, cfg);
    EXPECT_TRUE(same_cloud(r.cloud, init));
    EXPECT_TRUE(r.log.rows.empty());
}

TEST(TrainRound, EmptyDatasetThrows) {
    TrainingDataset empty;
    TrainConfig cfg = small_scene().cfg;
    std::mt19937_64 rng(1);
    const GaussianCloud init = init_random_cloud(cfg, rng);
    expect_throws_kind([&] { train_round(init, empty, cfg); }, ErrorKind::EmptyDataset);
}

TEST(TrainRound, DeterministicAcrossRunsAndThreads) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    std::mt19937_64 rng(1);
    const GaussianCloud init = init_random_cloud(cfg, rng);
    cfg.render.threads = 1;
    const TrainResult a = train_round(init, s.data, cfg);
    const TrainResult b = train_round(init, s.data, cfg);
    cfg.render.threads = 3;
    const TrainResult c = train_round(init, s.data, cfg);
    EXPECT_TRUE(same_cloud(a.cloud, b.cloud));
    EXPECT_TRUE(same_cloud(a.cloud, c.cloud));
    EXPECT_EQ(a.gamma, c.gamma);
    ASSERT_EQ(a.log.rows.size(), 25u);
    EXPECT_EQ(a.log.to_csv(), c.log.to_csv());
    for (const Gaussian &g : a.cloud.gaussians) {
        EXPECT_TRUE(g.is_finite());
    }
}

TEST(TrainRound, GammaFrozenWhenNotLearned) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.learn_gamma = false;
    cfg.iterations = 5;
    std::mt19937_64 rng(1);
    const TrainResult r = train_round(init_random_cloud(cfg, rng), s.data, cfg);
    EXPECT_EQ(r.gamma, cfg.loss.gamma);
    for (const LogRow &row : r.log.rows) {
        EXPECT_EQ(row.gamma, cfg.loss.gamma);
    }
}

TEST(TrainProgressive, LogShowsEveryRound) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.rounds = 3;
    cfg.iterations = 8;
    cfg.alpha_pro = 1e-9;
    std::vector<int> seen;
    const TrainResult r =
        train_progressive(s.data, cfg, [&](int round, const TrainResult &) { seen.push_back(round); });
    EXPECT_EQ(seen, (std::vector<int>{1, 2, 3}));
    ASSERT_EQ(r.log.rows.size(), 24u);
    int boundaries = 0;
    for (std::size_t i = 0; i < r.log.rows.size(); ++i) {
        boundaries += r.log.rows[i].iter == 1;
        EXPECT_EQ(r.log.rows[i].round, static_cast<int>(i / 8) + 1);
    }
    EXPECT_EQ(boundaries, 3);
}

TEST(TrainProgressive, SingleRoundEqualsTrainRoundAfterInit) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.rounds = 1;
    cfg.iterations = 6;
    const TrainResult p = train_progressive(s.data, cfg);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0, 0x696e6974ULL));
    const TrainResult r = train_round(init_random_cloud(cfg, rng), s.data, cfg);
    EXPECT_TRUE(same_cloud(p.cloud, r.cloud));
}

TEST(TrainProgressive, LaterRoundsStartFromSurvivorPositions) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.rounds = 2;
    cfg.iterations = 6;
    cfg.densify_from = 100; // keep the round-2 cloud at its initial size
    cfg.alpha_pro = 0.05;
    std::size_t survivors = 0;
    train_progressive(s.data, cfg, [&](int round, const TrainResult &r) {
        if (round == 1) {
            survivors = progressive_filter(r.cloud, cfg.alpha_pro).size();
        } else {
            EXPECT_LE(r.cloud.size(), survivors);
        }
    });
    EXPECT_GT(survivors, 0u);
}

TEST(TrainProgressive, NoSurvivorsFallsBackToRandomInit) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    cfg.rounds = 2;
    cfg.iterations = 3;
    cfg.alpha_pro = 0.999999;
    std::vector<std::size_t> sizes;
    train_progressive(s.data, cfg,
                      [&](int, const TrainResult &r) { sizes.push_back(r.cloud.size()); });
    EXPECT_EQ(sizes.size(), 2u);
}

TEST(Refine, StructureIsBitIdentical) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    std::mt19937_64 rng(1);
    const GaussianCloud init = init_random_cloud(cfg, rng);
    std::vector<BlurTarget> frames;
    for (const Exposure &e : s.sim.exposures) {
        frames.push_back({e.image, make_blur_config(s.sim.track, e.start, e.end, e.n_eiw)});
    }
    TrainingLog log;
    const GaussianCloud out = refine_appearance(init, frames, cfg, &log);
    ASSERT_EQ(out.size(), init.size());
    bool appearance_changed = false;
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_EQ(out.gaussians[i].mean, init.gaussians[i].mean);
        EXPECT_EQ(out.gaussians[i].log_scale, init.gaussians[i].log_scale);
        EXPECT_TRUE(out.gaussians[i].rotation == init.gaussians[i].rotation);
        appearance_changed = appearance_changed ||
                             out.gaussians[i].opacity_logit != init.gaussians[i].opacity_logit ||
                             out.gaussians[i].sh.bands[0] != init.gaussians[i].sh.bands[0];
    }
    EXPECT_TRUE(appearance_changed);
    EXPECT_EQ(log.rows.size(), 10u);
}

TEST(Refine, ZeroIterationsAndEmptySet) {
    const SmallScene &s = small_scene();
    TrainConfig cfg = s.cfg;
    std::mt19937_64 rng(1);
    const GaussianCloud init = init_random_cloud(cfg, rng);
    expect_throws_kind([&] { refine_appearance(init, {}, cfg); }, ErrorKind::EmptyRefinementSet);
    cfg.refine_iterations = 0;
    const Exposure &e = s.sim.exposures.front();
    const GaussianCloud out = refine_appearance(
        init, {{e.image, make_blur_config(s.sim.track, e.start, e.end, 2)}}, cfg);
    EXPECT_TRUE(same_cloud(out, init));
}

TEST(Dataset, WindowPosesComeFromTheTrack) {
    const SmallScene &s = small_scene();
    ASSERT_GT(s.data.size(), 2u);
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        const EventWindow &w = s.data.windows[i];
        EXPECT_NEAR(s.data.start_views[i].time, w.start_time * 1e-6, 1e-9);
        EXPECT_NEAR(s.data.end_views[i].time, w.end_time * 1e-6, 1e-9);
    }
    EXPECT_NEAR(s.data.dssim_range,
                5.0 * 0.2 * polarity_count_quantile(s.data.windows, 0.99), 1e-12);
}

TEST(Config, ValidateRejectsBadValues) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    for (double a : {0.0, 1.0, 1.5}) {
        cfg.alpha_pro = a;
        expect_throws_kind([&] { cfg.validate(); }, ErrorKind::BadSpec);
    }
    cfg = TrainConfig{};
    cfg.rounds = 0;
    expect_throws_kind([&] { cfg.validate(); }, ErrorKind::BadSpec);
    cfg = TrainConfig{};
    cfg.lr.opacity = 0.0;
    expect_throws_kind([&] { cfg.validate(); }, ErrorKind::BadSpec);
}

} // namespace
} // namespace evsplat
