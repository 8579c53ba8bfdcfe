// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/events.hpp"
#include "evsplat/gaussian.hpp"
#include "evsplat/renderer.hpp"

#include <cstdint>
#include <vector>

namespace evsplat {

struct TrajectorySpec {
    enum class Kind { Orbit, Line };

    Kind kind = Kind::Orbit;
    Vec3 center = Vec3::Zero();
    double radius = 2.0;
    /// Orbit elevation above the xy-plane, radians.
    double elevation = 0.35;
    /// Azimuth of the first orbit view, radians.
    double azimuth_offset = 0.0;
    Vec3 line_start = Vec3(0, -1, 0);
    Vec3 line_end = Vec3(0, 1, 0);
    int n_views = 200;
    double duration = 10.0; // seconds
    /// Intrinsics copied into every view.
    CameraView intrinsics;
};

/// Orbit views sit at azimuth offset + 2*pi*k/n with t = k*duration/n; line
/// views span both endpoints with t = k*duration/(n-1). All views look at
/// `center` with +z up. Throws BadSpec.
std::vector<CameraView> make_trajectory(const TrajectorySpec &spec);

/// Ideal threshold-crossing simulator over time-ordered linear radiance
/// frames (`times` in seconds). With an enabled Bayer mask each pixel sees
/// its filter channel, otherwise the channel mean. Throws TooFewFrames.
EventStream frames_to_events(const std::vector<Image> &frames, const std::vector<double> &times,
                             const EventCameraModel &model, const BayerMask &mask,
                             double log_floor = 1e-5);

/// Pixelwise mean of the frames.
Image synthesize_blur(const std::vector<Image> &frames);

/// Five splats with distinct colors around the origin.
GaussianCloud toy_ground_truth();

struct SimulationConfig {
    int width = 64;
    int height = 64;
    double focal = 64.0;
    double orbit_radius = 2.0;
    double elevation = 0.35;
    int track_views = 200;
    int sim_frames = 512;
    int heldout_views = 20;
    double duration = 10.0;
    Vec3 background = Vec3::Constant(0.2);
    bool color = true;
    EventCameraModel events;
    int blurred_frames = 10;
    /// Exposure length in track steps and render substeps per exposure.
    int exposure_steps = 4;
    int exposure_substeps = 16;
    int n_eiw = 4;
};

struct Exposure {
    double start = 0.0;
    double end = 0.0;
    Image image;
    int n_eiw = 1;
};

struct SimulatedDataset {
    EventStream events;
    /// Pose track; window endpoint poses are interpolated from it.
    std::vector<CameraView> track;
    std::vector<CameraView> heldout_views;
    std::vector<Image> heldout_images;
    std::vector<Exposure> exposures;
    Vec3 background = Vec3::Zero();
    bool color = true;
};

/// Renders `truth` along an orbit, converts the frames to events and
/// produces held-out views and blurred exposures.
SimulatedDataset simulate_dataset(const GaussianCloud &truth, const SimulationConfig &cfg);

} // namespace evsplat
