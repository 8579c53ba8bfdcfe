// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/events.hpp"
#include "evsplat/gaussian.hpp"
#include "evsplat/losses.hpp"
#include "evsplat/renderer.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace evsplat {

struct LearningRates {
    double mean_init = 1.6e-4;
    double mean_final = 1.6e-6;
    double sh = 2.5e-3;
    /// Multiplier on `sh` for bands above degree 0.
    double sh_rest_factor = 1.0 / 20.0;
    double opacity = 5e-2;
    double scale = 5e-3;
    double rotation = 1e-3;
    double gamma = 1e-3;
};

struct TrainConfig {
    int iterations = 30000;
    LearningRates lr;
    double densify_grad_threshold = 2e-4;
    int densify_interval = 100;
    int densify_from = 500;
    int densify_until = 15000;
    double prune_opacity = 0.005;
    int opacity_reset_interval = 3000;
    /// Splats whose largest scale is at most this fraction of the scene
    /// extent are cloned; larger ones are split.
    double percent_dense = 0.01;
    double alpha_pro = 0.9;
    int rounds = 2;
    double eta_alpha = 0.05;
    int refine_iterations = 200;
    int init_count = 100000;
    double init_cube_scale = 0.2;
    Vec3 init_center = Vec3::Zero();
    /// Shift initial points onto the positive z half-axis.
    bool forward_facing = false;
    int sh_degree = 3;
    int sh_increase_interval = 1000;
    bool learn_gamma = true;
    /// Keep every parameter of surviving splats between rounds instead of
    /// re-randomizing all but their positions.
    bool carry_params = false;
    /// Scene extent used to scale position learning rates and the
    /// clone/split boundary. <= 0 derives it from the dataset cameras.
    double scene_extent = 0.0;
    std::uint64_t seed = 0;
    LossConfig loss;
    RenderSettings render;

    void validate() const;
};

struct TrainingDataset {
    std::vector<EventWindow> windows;
    std::vector<CameraView> start_views;
    std::vector<CameraView> end_views;
    EventCameraModel model;
    BayerMask mask;
    /// Half-width of the range mapped to [0, 1] for the structural term.
    double dssim_range = 1.0;

    std::size_t size() const { return windows.size(); }
};

/// Slices the stream and looks up window endpoint poses on the pose track.
TrainingDataset make_training_dataset(const EventStream &stream,
                                      const std::vector<CameraView> &track,
                                      const EventCameraModel &model, bool color);

/// 1.1 times the largest camera distance from the mean camera center.
double camera_extent(const std::vector<CameraView> &views);

struct LogRow {
    int round = 1;
    int iter = 0;
    double loss = 0.0;
    double l1 = 0.0;
    double dssim = 0.0;
    std::size_t num_splats = 0;
    double gamma = 0.0;
};

struct TrainingLog {
    std::vector<LogRow> rows;

    /// CSV with header `iter,loss,l1,dssim,num_splats,gamma`. The iteration
    /// counter restarts at 1 for every round.
    std::string to_csv() const;
};

/// Adam moments laid out like the cloud, plus the shared gamma scalar.
struct AdamState {
    GradientBundle m;
    GradientBundle v;
    double gamma_m = 0.0;
    double gamma_v = 0.0;
    long step = 0;

    AdamState() = default;
    AdamState(std::size_t n, int sh_degree) : m(n, sh_degree), v(n, sh_degree) {}
    std::size_t size() const { return m.size(); }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-15;

/// Which parameter groups an Adam step updates.
struct ParamMask {
    bool mean = true;
    bool scale = true;
    bool rotation = true;
    bool opacity = true;
    bool sh = true;
};

struct StepRates {
    double mean = 0.0;
    double scale = 0.0;
    double rotation = 0.0;
    double opacity = 0.0;
    double sh_dc = 0.0;
    double sh_rest = 0.0;
};

/// One Adam update of every enabled group. Moments of disabled groups are
/// left untouched.
void adam_step(GaussianCloud &cloud, AdamState &state, const GradientBundle &grad,
               const StepRates &rates, const ParamMask &mask = {});

/// Uniform points in the cube of half-extent `init_cube_scale` around
/// `init_center`, scales from nearest-neighbor spacing, opacity 0.1, random
/// DC color. Throws BadSpec when init_count <= 0.
GaussianCloud init_random_cloud(const TrainConfig &cfg, std::mt19937_64 &rng);

/// Builds a cloud with the given means and freshly initialized other
/// parameters, as init_random_cloud would.
GaussianCloud init_cloud_at(const std::vector<Vec3> &means, int sh_degree, std::mt19937_64 &rng);

/// Mean distance to the three nearest neighbors for every point.
std::vector<double> nearest_neighbor_scale(const std::vector<Vec3> &points);

struct DensifyStats {
    std::vector<double> grad_norm_sum;
    std::vector<int> count;

    explicit DensifyStats(std::size_t n = 0) : grad_norm_sum(n, 0.0), count(n, 0) {}
    void reset(std::size_t n) { *this = DensifyStats(n); }
    /// Adds one render's screen-space gradients, scaled to normalized device
    /// coordinates for an image of the given size.
    void add(const GradientBundle &grad, int width, int height);
    double mean(std::size_t i) const {
        return count[i] > 0 ? grad_norm_sum[i] / count[i] : 0.0;
    }
};

/// Clones small and splits large high-gradient splats, then prunes splats
/// with opacity below cfg.prune_opacity. Adam rows follow the splats; new
/// rows start at zero. Throws EmptyCloud when nothing survives.
void densify_and_prune(GaussianCloud &cloud, const DensifyStats &stats, const TrainConfig &cfg,
                       double extent, std::mt19937_64 &rng, AdamState *adam = nullptr);

/// Means of splats with opacity above alpha_pro. Throws NoSurvivors.
std::vector<Vec3> progressive_filter(const GaussianCloud &cloud, double alpha_pro);

struct TrainResult {
    GaussianCloud cloud;
    double gamma = 2.2;
    TrainingLog log;
};

using RoundCallback = std::function<void(int round, const TrainResult &)>;

/// Runs cfg.iterations optimization steps on `cloud` against the event
/// windows. `round` tags log rows. Throws EmptyDataset.
TrainResult train_round(GaussianCloud cloud, const TrainingDataset &dataset,
                        const TrainConfig &cfg, int round = 1, double gamma = -1.0);

/// Multi-round training: random init, then restarts from the high-opacity
/// survivors of the previous round. `on_round` sees every round's result.
TrainResult train_progressive(const TrainingDataset &dataset, const TrainConfig &cfg,
                              const RoundCallback &on_round = {});

struct BlurTarget {
    Image image;
    BlurConfig config;
};

/// Fits opacity and color to blurry frames while keeping positions, scales
/// and rotations fixed. Throws EmptyRefinementSet.
GaussianCloud refine_appearance(GaussianCloud cloud, const std::vector<BlurTarget> &frames,
                                const TrainConfig &cfg, TrainingLog *log = nullptr);

} // namespace evsplat
