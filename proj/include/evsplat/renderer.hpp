// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/core_math.hpp"
#include "evsplat/gaussian.hpp"
#include "evsplat/image.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace evsplat {

struct RenderSettings {
    /// Contributions with alpha below this are skipped. 0 disables the cutoff.
    double alpha_min = 1.0 / 255.0;
    /// Blending stops once transmittance falls below this. 0 disables it.
    double transmittance_min = 1e-4;
    int tile_size = 16;
    Vec3 background = Vec3::Zero();
    /// Highest SH band used for color; -1 means the cloud's degree.
    int active_sh_degree = -1;
    /// Worker threads for tile loops; 0 uses the process default.
    int threads = 0;
};

/// Screen-space state of one splat after projection and culling.
struct ProjectedSplat {
    bool visible = false;
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Zero();
    /// Inverse 2D covariance as (xx, xy, yy).
    Vec3 conic = Vec3::Zero();
    double depth = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    Vec3 view_dir = Vec3::Zero();
    int tile_x0 = 0, tile_y0 = 0, tile_x1 = 0, tile_y1 = 0; // half-open tile rect
};

/// Per tile entry copy of the fields the pixel loops read. `power_floor`
/// sits just below log(alpha_min / opacity); lower exponents cannot pass
/// the alpha cutoff.
struct PackedEntry {
    double mx, my;
    double c0, c1, c2;
    double opacity;
    double power_floor;
};

/// Everything the backward pass needs to replay a forward pass exactly.
struct ForwardState {
    CameraView view;
    RenderSettings settings;
    std::size_t cloud_size = 0;
    std::vector<ProjectedSplat> splats;
    int tiles_x = 0;
    int tiles_y = 0;
    /// tile_offsets[t]..tile_offsets[t+1] indexes tile_entries for tile t;
    /// entries are splat ids sorted by (depth, id).
    std::vector<std::size_t> tile_offsets;
    std::vector<std::uint32_t> tile_entries;
    std::vector<PackedEntry> packed;
    /// Per pixel: number of tile entries scanned before blending stopped.
    std::vector<std::uint32_t> last_entry;
    std::vector<double> final_transmittance;
};

struct RenderedImage {
    Image rgb;   // H x W x 3, linear radiance
    Image alpha; // H x W x 1, accumulated opacity
    /// Alpha-blended expected depth; for visualization only, carries no gradient.
    Image depth;
    /// Number of splats that contributed to each pixel.
    std::vector<std::uint32_t> contributors;
    std::shared_ptr<const ForwardState> state;

    int width() const { return rgb.width(); }
    int height() const { return rgb.height(); }
};

/// Tile-based front-to-back alpha blending. Throws Error(EmptyCloud) for an
/// empty cloud.
RenderedImage render(const GaussianCloud &cloud, const CameraView &view,
                     const RenderSettings &settings = {});

/// Gradient of sum(upstream * rendered.rgb) with respect to every splat
/// parameter. `rendered` must come from render() on the same cloud and view;
/// otherwise Error(MissingForwardState) is thrown.
GradientBundle render_backward(const GaussianCloud &cloud, const RenderedImage &rendered,
                               const Image &upstream);

struct BlurConfig {
    int n_eiw = 1;
    std::vector<CameraView> sub_poses;

    void validate() const;
};

/// Sub-poses at the midpoints of `n_eiw` equal slices of [t_start, t_end],
/// looked up by timestamp in a time-ordered pose track.
BlurConfig make_blur_config(const std::vector<CameraView> &track, double t_start, double t_end,
                            int n_eiw);

/// Looks up the pose at `time` by interpolating between the bracketing
/// track entries; clamps outside the track's time span.
CameraView pose_at_time(const std::vector<CameraView> &track, double time);

struct BlurRender {
    RenderedImage image;
    std::vector<RenderedImage> sub_renders;
};

/// Average of renders over the blur sub-poses.
BlurRender render_blur(const GaussianCloud &cloud, const BlurConfig &config,
                       const RenderSettings &settings = {});

GradientBundle render_blur_backward(const GaussianCloud &cloud, const BlurRender &rendered,
                                    const Image &upstream);

/// Computes the projected state of every splat. Exposed for tests and tools.
std::vector<ProjectedSplat> project_cloud(const GaussianCloud &cloud, const CameraView &view,
                                          const RenderSettings &settings);

/// Sets the OpenMP thread count honoring the EVSPLAT_THREADS cap.
int effective_threads(int requested);

} // namespace evsplat
