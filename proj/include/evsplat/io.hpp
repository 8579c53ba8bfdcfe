// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/core_math.hpp"
#include "evsplat/gaussian.hpp"
#include "evsplat/image.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace evsplat {

struct PoseEntry {
    CameraView view;
    /// Optional image path, relative to the manifest's directory.
    std::string image;
};

struct ExposureEntry {
    double start = 0.0;
    double end = 0.0;
    int n_eiw = 1;
    std::string image;
};

/// Camera intrinsics plus a time-ordered list of poses.
///
/// JSON layout:
///   {"intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
///    "views": [{"time", "rotation": [w, x, y, z], "translation": [x, y, z],
///               "image"?}],
///    "exposures"?: [{"start", "end", "n_eiw"?, "image"?}]}
struct PoseManifest {
    CameraView intrinsics;
    std::vector<PoseEntry> views;
    std::vector<ExposureEntry> exposures;

    /// Views with intrinsics applied.
    std::vector<CameraView> cameras() const;
};

/// Parses and validates a manifest. Quaternions within 1e-2 of unit norm
/// are normalized with a warning. Throws Schema with a JSON path.
PoseManifest load_poses(const std::string &json_text);
PoseManifest load_poses_file(const std::filesystem::path &path);
std::string save_poses(const PoseManifest &manifest);

/// Binary little-endian PLY with double properties x, y, z,
/// log_scale_0..2, rot_0..3, opacity_logit, f_dc_0..2, f_rest_*.
std::string save_ply(const GaussianCloud &cloud);
/// Throws Format on malformed or truncated input.
GaussianCloud load_ply(const std::string &bytes);

/// 8-bit RGB or gray PNG; values are clamped to [0, 1].
void write_png(const std::filesystem::path &path, const Image &image);
/// Returns an RGB image in [0, 1]. Gray and alpha inputs are expanded or dropped.
Image read_png(const std::filesystem::path &path);

/// 32-bit float PFM, RGB ("PF") or gray ("Pf").
std::string encode_pfm(const Image &image);
Image decode_pfm(const std::string &bytes);

/// Dispatches on the extension: .png or .pfm.
Image read_image(const std::filesystem::path &path);
void write_image(const std::filesystem::path &path, const Image &image);

/// Whole-file helpers. Throw Io naming the path.
std::string read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, const std::string &bytes);

} // namespace evsplat
