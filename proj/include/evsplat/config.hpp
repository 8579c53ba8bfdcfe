// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/metrics.hpp"
#include "evsplat/optimizer.hpp"
#include "evsplat/simulator.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace evsplat {

/// Every tunable of the command line tool. Sections map to TOML tables:
/// [simulate], [events], [train], [train.lr], [loss], [render], [refine],
/// [eval] and [run].
struct AppConfig {
    SimulationConfig sim;
    EventCameraModel events;
    TrainConfig train;
    EvalOptions eval;
    std::uint64_t seed = 0;
    int threads = 0;

    /// Copies shared settings (seed, threads, event model, background) into
    /// the per-stage structs.
    void sync();
};

/// Applies the TOML document on top of `base`. Unknown keys and wrong types
/// throw Schema naming the key.
AppConfig parse_config(const std::string &toml_text, AppConfig base = {});
AppConfig load_config(const std::filesystem::path &path, AppConfig base = {});

/// TOML text that parse_config maps back to the same values.
std::string dump_config(const AppConfig &cfg);

/// Short stable hash of the dumped configuration, for labelling results.
std::string config_hash(const AppConfig &cfg);

/// Settings used by the bundled toy scene.
AppConfig toy_config();

} // namespace evsplat
