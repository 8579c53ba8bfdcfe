// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/config.hpp"
#include "evsplat/errors.hpp"
#include "evsplat/io.hpp"
#include "evsplat/metrics.hpp"
#include "support/test_scenes.hpp"

#include <Eigen/QR>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

namespace evsplat {
namespace {

namespace fs = std::filesystem;

void
expect_throws_kind(const std::function<void()> &fn, ErrorKind kind,
                   const std::string &needle = {}) {
    try {
        fn();
        FAIL() << "expected " << to_string(kind);
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
        if (!needle.empty()) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    }
}

fs::path
temp_dir(const std::string &name) {
    const fs::path p = fs::temp_directory_path() / ("evsplat_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<Image>
random_views(std::mt19937_64 &rng, int n, double lo, double hi) {
    std::vector<Image> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(test::random_image(rng, 9, 7, 3, lo, hi));
    }
    return out;
}

// ---- PLY ----

TEST(Ply, RoundTripIsBitExact) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
        GaussianCloud c = test::random_cloud(rng, 1 + trial % 7, trial % 4);
        for (Gaussian &g : c.gaussians) {
            g.opacity_logit = n(rng);
            g.rotation.w = n(rng); // unnormalized on purpose
            for (int k = 0; k < g.sh.coeff_count(); ++k) {
                g.sh.bands[k] = Vec3(n(rng), n(rng), n(rng));
            }
        }
        const std::string bytes = save_ply(c);
        const GaussianCloud back = load_ply(bytes);
        ASSERT_EQ(back.size(), c.size());
        ASSERT_EQ(back.sh_degree, c.sh_degree);
        for (std::size_t i = 0; i < c.size(); ++i) {
            const Gaussian &a = c.gaussians[i];
            const Gaussian &b = back.gaussians[i];
            ASSERT_EQ(std::memcmp(a.mean.data(), b.mean.data(), sizeof(double) * 3), 0);
            ASSERT_EQ(std::memcmp(a.log_scale.data(), b.log_scale.data(), sizeof(double) * 3), 0);
            ASSERT_TRUE(a.rotation == b.rotation);
            ASSERT_EQ(a.opacity_logit, b.opacity_logit);
            for (int k = 0; k < a.sh.coeff_count(); ++k) {
                ASSERT_EQ(a.sh.bands[k], b.sh.bands[k]);
            }
        }
        ASSERT_EQ(save_ply(back), bytes);
    }
}

TEST(Ply, EmptyCloud) {
    GaussianCloud empty;
    empty.sh_degree = 2;
    const std::string bytes = save_ply(empty);
    EXPECT_NE(bytes.find("element vertex 0"), std::string::npos);
    const GaussianCloud back = load_ply(bytes);
    EXPECT_TRUE(back.empty());
    EXPECT_EQ(back.sh_degree, 2);
}

TEST(Ply, TruncatedAndMalformed) {
    std::mt19937_64 rng(2);
    const std::string bytes = save_ply(test::random_cloud(rng, 3, 1));
    expect_throws_kind([&] { load_ply(bytes.substr(0, bytes.size() - 5)); }, ErrorKind::Format);
    expect_throws_kind([&] { load_ply(bytes + "x"); }, ErrorKind::Format);
    expect_throws_kind([&] { load_ply("not a ply"); }, ErrorKind::Format);
    std::string ascii = bytes;
    ascii.replace(ascii.find("binary_little_endian"), 20, "ascii");
    expect_throws_kind([&] { load_ply(ascii); }, ErrorKind::Format);
}

TEST(Ply, ReadsFloatProperties) {
    std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n";
    const char *names[] = {"x",     "y",     "z",     "log_scale_0",   "log_scale_1",
                           "log_scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                           "opacity_logit", "f_dc_0", "f_dc_1", "f_dc_2"};
    for (const char *n : names) {
        header += std::string("property float ") + n + "\n";
    }
    header += "end_header\n";
    for (int i = 0; i < 14; ++i) {
        const float v = 0.5f * static_cast<float>(i);
        char buf[4];
        std::memcpy(buf, &v, 4);
        header.append(buf, 4);
    }
    const GaussianCloud c = load_ply(header);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.sh_degree, 0);
    EXPECT_EQ(c.gaussians[0].mean, Vec3(0.0, 0.5, 1.0));
    EXPECT_EQ(c.gaussians[0].opacity_logit, 5.0);
    EXPECT_EQ(c.gaussians[0].sh.bands[0], Vec3(5.5, 6.0, 6.5));
}

// ---- Poses ----

const char *kTwoViews = R"({
  "intrinsics": {"fx": 50, "fy": 50, "cx": 15.5, "cy": 11.5, "width": 32, "height": 24},
  "views": [
    {"time": 0.0, "rotation": [1, 0, 0, 0], "translation": [0, 0, 2]},
    {"time": 0.5, "rotation": [0, 0, 0, 1], "translation": [0.1, 0, 2], "image": "a.png"}
  ]
})";

TEST(Poses, MinimalManifest) {
    const PoseManifest m = load_poses(kTwoViews);
    ASSERT_EQ(m.views.size(), 2u);
    EXPECT_EQ(m.intrinsics.width, 32);
    EXPECT_EQ(m.views[1].image, "a.png");
    const auto cams = m.cameras();
    EXPECT_EQ(cams[1].fx, 50.0);
    EXPECT_EQ(cams[1].time, 0.5);
    EXPECT_EQ(cams[1].rotation.z, 1.0);
    EXPECT_EQ(cams[1].translation, Vec3(0.1, 0, 2));
}

TEST(Poses, QuaternionNormTolerance) {
    std::string near = kTwoViews;
    near.replace(near.find("[1, 0, 0, 0]"), 12, "[0.995, 0, 0, 0]");
    const PoseManifest m = load_poses(near);
    EXPECT_DOUBLE_EQ(m.views[0].view.rotation.w, 1.0);
    std::string far = kTwoViews;
    far.replace(far.find("[1, 0, 0, 0]"), 12, "[0.9, 0, 0, 0]");
    expect_throws_kind([&] { load_poses(far); }, ErrorKind::Schema, "$.views[0].rotation");
}

TEST(Poses, SchemaErrorsNameThePath) {
    std::string order = kTwoViews;
    order.replace(order.find("\"time\": 0.5"), 11, "\"time\": 0.0");
    expect_throws_kind([&] { load_poses(order); }, ErrorKind::Schema, "$.views[1].time");
    std::string missing = kTwoViews;
    missing.replace(missing.find("\"fy\": 50, "), 10, "");
    expect_throws_kind([&] { load_poses(missing); }, ErrorKind::Schema, "$.intrinsics");
    expect_throws_kind([] { load_poses("{"); }, ErrorKind::Schema);
    expect_throws_kind([] { load_poses("[]"); }, ErrorKind::Schema);
}

TEST(Poses, SaveLoadRoundTrip) {
    PoseManifest m = load_poses(kTwoViews);
    m.exposures.push_back({0.1, 0.3, 4, "blur.pfm"});
    const PoseManifest back = load_poses(save_poses(m));
    ASSERT_EQ(back.views.size(), 2u);
    EXPECT_EQ(back.views[1].view.translation, m.views[1].view.translation);
    ASSERT_EQ(back.exposures.size(), 1u);
    EXPECT_EQ(back.exposures[0].n_eiw, 4);
    EXPECT_EQ(back.exposures[0].image, "blur.pfm");
    EXPECT_EQ(save_poses(back), save_poses(m));
}

// ---- Images ----

TEST(Images, PfmRoundTrip) {
    std::mt19937_64 rng(3);
    for (const int ch : {1, 3}) {
        Image img = test::random_image(rng, 7, 5, ch, -2.0, 5.0);
        for (std::size_t i = 0; i < img.size(); ++i) {
            img[i] = static_cast<float>(img[i]);
        }
        EXPECT_EQ(decode_pfm(encode_pfm(img)), img);
    }
    const std::string bytes = encode_pfm(Image(3, 2, 3, 0.5));
    expect_throws_kind([&] { decode_pfm(bytes.substr(0, bytes.size() - 1)); }, ErrorKind::Format);
    expect_throws_kind([] { decode_pfm("P6\n1 1\n255\n"); }, ErrorKind::Format);
}

TEST(Images, PngRoundTripQuantizes) {
    const fs::path dir = temp_dir("png");
    std::mt19937_64 rng(4);
    const Image img = test::random_image(rng, 6, 4, 3, -0.1, 1.1);
    write_image(dir / "a.png", img);
    const Image back = read_image(dir / "a.png");
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) {
        EXPECT_NEAR(back[i], std::clamp(img[i], 0.0, 1.0), 0.5 / 255.0 + 1e-12);
    }
    expect_throws_kind([&] { read_image(dir / "missing.png"); }, ErrorKind::Io);
    expect_throws_kind([&] { read_image(dir / "a.bmp"); }, ErrorKind::Format);
}

// ---- Metrics ----

TEST(Evaluate, IdenticalImages) {
    std::mt19937_64 rng(5);
    const auto gt = random_views(rng, 3, 0.2, 0.8);
    const EvalReport r = evaluate(gt, gt);
    ASSERT_EQ(r.fits.size(), 1u);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(r.fits[0][c].a, 1.0, 1e-12);
        EXPECT_NEAR(r.fits[0][c].b, 0.0, 1e-12);
    }
    EXPECT_TRUE(r.mean_psnr_infinite);
    for (std::size_t v = 0; v < 3; ++v) {
        EXPECT_TRUE(r.psnr_infinite[v]);
        EXPECT_NEAR(r.ssim[v], 1.0, 1e-12);
    }
}

TEST(Evaluate, ScaledRenderIsRecoveredExactly) {
    std::mt19937_64 rng(6);
    const auto gt = random_views(rng, 4, 0.1, 0.9);
    std::vector<Image> scaled = gt;
    for (Image &img : scaled) {
        for (std::size_t i = 0; i < img.size(); ++i) {
            img[i] *= 2.0;
        }
    }
    const EvalReport r = evaluate(scaled, gt);
    EXPECT_TRUE(r.mean_psnr_infinite);
    EXPECT_NEAR(r.fits[0][1].b, -std::log(2.0), 1e-12);
}

// Independent least-squares oracle: solve the 2-column system with QR.
TEST(Evaluate, OffsetMatchesClosedFormOracle) {
    std::mt19937_64 rng(7);
    const auto gt = random_views(rng, 3, 0.2, 0.8);
    std::vector<Image> off = gt;
    for (Image &img : off) {
        for (std::size_t i = 0; i < img.size(); ++i) {
            img[i] += 0.1;
        }
    }
    const EvalReport r = evaluate(off, gt);
    const std::size_t px = gt[0].pixel_count();
    std::array<Eigen::Vector2d, 3> coef;
    for (int c = 0; c < 3; ++c) {
        Eigen::MatrixXd A(3 * px, 2);
        Eigen::VectorXd y(3 * px);
        for (std::size_t v = 0; v < 3; ++v) {
            for (std::size_t p = 0; p < px; ++p) {
                A(v * px + p, 0) = std::log(off[v][p * 3 + c]);
                A(v * px + p, 1) = 1.0;
                y(v * px + p) = std::log(gt[v][p * 3 + c]);
            }
        }
        coef[c] = A.colPivHouseholderQr().solve(y);
        EXPECT_NEAR(r.fits[0][c].a, coef[c][0], 1e-9);
        EXPECT_NEAR(r.fits[0][c].b, coef[c][1], 1e-9);
    }
    for (std::size_t v = 0; v < 3; ++v) {
        double sse = 0.0;
        for (std::size_t p = 0; p < px; ++p) {
            for (int c = 0; c < 3; ++c) {
                const double pred = std::clamp(
                    std::exp(coef[c][0] * std::log(off[v][p * 3 + c]) + coef[c][1]), 0.0, 1.0);
                const double d = pred - gt[v][p * 3 + c];
                sse += d * d;
            }
        }
        const double want = 20.0 * std::log10(1.0 / std::sqrt(sse / (3.0 * px)));
        EXPECT_FALSE(r.psnr_infinite[v]);
        EXPECT_NEAR(r.psnr[v], want, 1e-8);
    }
}

TEST(Evaluate, PsnrInvariantToRenderScaling) {
    std::mt19937_64 rng(8);
    const auto gt = random_views(rng, 5, 0.05, 0.95);
    const auto render = random_views(rng, 5, 0.2, 0.9);
    const EvalReport base = evaluate(render, gt);
    ASSERT_FALSE(base.mean_psnr_infinite);
    for (const double k : {0.5, 1.0, 2.0, 10.0}) {
        std::vector<Image> scaled = render;
        for (Image &img : scaled) {
            for (std::size_t i = 0; i < img.size(); ++i) {
                img[i] *= k;
            }
        }
        const EvalReport r = evaluate(scaled, gt);
        EXPECT_NEAR(r.mean_psnr, base.mean_psnr, 1e-9) << k;
        for (std::size_t v = 0; v < 5; ++v) {
            EXPECT_NEAR(r.psnr[v], base.psnr[v], 1e-9) << k;
        }
    }
}

TEST(Evaluate, ModesAndErrors) {
    std::mt19937_64 rng(9);
    const auto gt = random_views(rng, 3, 0.2, 0.8);
    const auto render = random_views(rng, 3, 0.2, 0.8);
    EvalOptions per;
    per.align = AlignMode::PerView;
    EXPECT_EQ(evaluate(render, gt, per).fits.size(), 3u);
    EvalOptions none;
    none.align = AlignMode::None;
    const EvalReport r = evaluate(render, gt, none);
    EXPECT_TRUE(r.fits.empty());
    double sse = 0.0;
    for (std::size_t i = 0; i < gt[0].size(); ++i) {
        sse += (render[0][i] - gt[0][i]) * (render[0][i] - gt[0][i]);
    }
    EXPECT_NEAR(r.psnr[0], -10.0 * std::log10(sse / gt[0].size()), 1e-10);
    // Per-view fitting can only do better than one global fit.
    EXPECT_GE(evaluate(render, gt, per).mean_psnr + 1e-12, evaluate(render, gt).mean_psnr);

    expect_throws_kind([&] { evaluate(render, {gt[0]}); }, ErrorKind::DimensionMismatch);
    std::vector<Image> wrong = gt;
    wrong[1] = Image(4, 4, 3, 0.5);
    expect_throws_kind([&] { evaluate(render, wrong); }, ErrorKind::DimensionMismatch);
}

TEST(Evaluate, JsonReport) {
    std::mt19937_64 rng(10);
    const auto gt = random_views(rng, 2, 0.2, 0.8);
    const nlohmann::json j = nlohmann::json::parse(evaluate(gt, gt).to_json());
    EXPECT_EQ(j["mean_psnr"], "inf");
    EXPECT_EQ(j["views"].size(), 2u);
    EXPECT_TRUE(j["views"][0]["psnr_infinite"].get<bool>());
    EXPECT_EQ(j["alignment"][0].size(), 3u);
}

// ---- Config ----

TEST(Config, DumpParsesBackToTheSameValues) {
    AppConfig cfg = toy_config();
    cfg.seed = 1234567890123ULL;
    cfg.train.lr.mean_init = 1.0 / 3.0;
    cfg.sim.background = Vec3(0.1, 0.2, 0.3);
    cfg.eval.align = AlignMode::PerView;
    cfg.train.carry_params = true;
    cfg.sync();
    const std::string text = dump_config(cfg);
    const AppConfig back = parse_config(text);
    EXPECT_EQ(dump_config(back), text);
    EXPECT_EQ(back.train.lr.mean_init, 1.0 / 3.0);
    EXPECT_EQ(back.seed, 1234567890123ULL);
    EXPECT_EQ(back.train.seed, back.seed);
    EXPECT_EQ(back.train.render.background, Vec3(0.1, 0.2, 0.3));
    EXPECT_EQ(config_hash(back), config_hash(cfg));
}

TEST(Config, OverlayKeepsUnsetValues) {
    const AppConfig base = toy_config();
    const AppConfig c = parse_config("[train]\niterations = 17\n[train.lr]\nsh = 0.5\n", base);
    EXPECT_EQ(c.train.iterations, 17);
    EXPECT_EQ(c.train.lr.sh, 0.5);
    EXPECT_EQ(c.train.init_count, base.train.init_count);
    EXPECT_NE(config_hash(c), config_hash(base));
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
    expect_throws_kind([] { parse_config("[train]\niteratons = 3\n"); }, ErrorKind::Schema,
                       "train.iteratons");
    expect_throws_kind([] { parse_config("[nope]\nx = 1\n"); }, ErrorKind::Schema, "nope");
    expect_throws_kind([] { parse_config("[train]\niterations = \"many\"\n"); }, ErrorKind::Schema,
                       "train.iterations");
    expect_throws_kind([] { parse_config("[eval]\nalign = \"sideways\"\n"); }, ErrorKind::Schema);
    expect_throws_kind([] { parse_config("[train\n"); }, ErrorKind::Schema);
    expect_throws_kind([] { parse_config("[run]\nseed = -1\n"); }, ErrorKind::Schema);
}

} // namespace
} // namespace evsplat
