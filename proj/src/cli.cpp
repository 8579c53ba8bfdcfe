// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/cli.hpp"

#include "evsplat/config.hpp"
#include "evsplat/events.hpp"
#include "evsplat/io.hpp"
#include "evsplat/metrics.hpp"
#include "evsplat/optimizer.hpp"
#include "evsplat/simulator.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace evsplat {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool toy = false;
    bool dump = false;
    bool carry_params = false;
};

void
add_common(CLI::App *cmd, CommonOptions &o, bool needs_out) {
    cmd->add_option("-c,--config", o.config_path, "TOML configuration file");
    auto *out = cmd->add_option("-o,--out", o.out_dir, "output directory");
    if (!needs_out) {
        out->description("output directory (optional)");
    }
    cmd->add_option("--set", o.overrides, "override a setting, e.g. --set train.iterations=500");
    cmd->add_option("--seed", o.seed, "random seed");
    cmd->add_option("--threads", o.threads, "worker threads (0 = default)");
    cmd->add_flag("--toy", o.toy, "start from the toy scene defaults");
    cmd->add_flag("--dump-config", o.dump, "print the effective configuration and exit");
}

AppConfig
resolve_config(const CommonOptions &o) {
    AppConfig cfg = o.toy ? toy_config() : AppConfig{};
    if (!o.config_path.empty()) {
        cfg = load_config(o.config_path, cfg);
    }
    for (const std::string &kv : o.overrides) {
        const std::size_t eq = kv.find('=');
        const std::size_t dot = kv.rfind('.', eq);
        if (eq == std::string::npos || dot == std::string::npos || dot == 0) {
            throw Error(ErrorKind::Usage, "--set expects table.key=value, got '" + kv + "'");
        }
        const std::string snippet =
            "[" + kv.substr(0, dot) + "]\n" + kv.substr(dot + 1, eq - dot - 1) + " = " +
            kv.substr(eq + 1) + "\n";
        cfg = parse_config(snippet, cfg);
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.threads) {
        cfg.threads = *o.threads;
    }
    if (o.carry_params) {
        cfg.train.carry_params = true;
    }
    cfg.sync();
    return cfg;
}

fs::path
prepare_out(const CommonOptions &o) {
    if (o.out_dir.empty()) {
        throw Error(ErrorKind::Usage, "--out is required");
    }
    std::error_code ec;
    fs::create_directories(o.out_dir, ec);
    if (ec) {
        throw Error(ErrorKind::Io, "cannot create " + o.out_dir + ": " + ec.message());
    }
    return o.out_dir;
}

void
require_file(const std::string &path, const char *what) {
    if (path.empty()) {
        throw Error(ErrorKind::Usage, std::string("missing ") + what);
    }
    if (!fs::is_regular_file(path)) {
        throw Error(ErrorKind::Io, std::string(what) + " not found: " + path);
    }
}

std::string
numbered(const char *stem, std::size_t i, const char *ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03zu%s", stem, i, ext);
    return buf;
}

PoseManifest
manifest_from(const std::vector<CameraView> &views) {
    PoseManifest m;
    m.intrinsics = views.front();
    for (const CameraView &v : views) {
        m.views.push_back({v, {}});
    }
    return m;
}

fs::path
resolve_relative(const std::string &manifest, const std::string &entry) {
    const fs::path p(entry);
    return p.is_absolute() ? p : fs::path(manifest).parent_path() / p;
}

void
write_both(const fs::path &dir, const std::string &stem, const Image &img) {
    write_image(dir / (stem + ".pfm"), img);
    write_image(dir / (stem + ".png"), img);
}

int
run_simulate(const CommonOptions &o, const std::string &truth_path, bool csv) {
    AppConfig cfg = resolve_config(o);
    const fs::path out = prepare_out(o);
    GaussianCloud truth = toy_ground_truth();
    if (!truth_path.empty()) {
        require_file(truth_path, "ground-truth cloud");
        truth = load_ply(read_file(truth_path));
    }
    SimulationConfig sc = cfg.sim;
    const SimulatedDataset ds = simulate_dataset(truth, sc);
    spdlog::info("simulated {} events from {} frames", ds.events.events.size(), sc.sim_frames);

    save_events((out / (csv ? "events.csv" : "events.evt1")).string(), ds.events);
    write_file(out / "truth.ply", save_ply(truth));

    PoseManifest track = manifest_from(ds.track);
    fs::create_directories(out / "blurred");
    for (std::size_t i = 0; i < ds.exposures.size(); ++i) {
        const Exposure &e = ds.exposures[i];
        const std::string stem = numbered("blur", i, "");
        write_both(out / "blurred", stem, e.image);
        track.exposures.push_back({e.start, e.end, e.n_eiw, "blurred/" + stem + ".pfm"});
    }
    write_file(out / "track.json", save_poses(track));

    if (!ds.heldout_views.empty()) {
        fs::create_directories(out / "heldout");
        PoseManifest held = manifest_from(ds.heldout_views);
        for (std::size_t i = 0; i < ds.heldout_views.size(); ++i) {
            const std::string stem = numbered("view", i, "");
            write_both(out / "heldout", stem, ds.heldout_images[i]);
            held.views[i].image = "heldout/" + stem + ".pfm";
        }
        write_file(out / "heldout.json", save_poses(held));
    }
    write_file(out / "config.toml", dump_config(cfg));
    return kExitOk;
}

int
run_slice(const CommonOptions &o, const std::string &events_path) {
    AppConfig cfg = resolve_config(o);
    require_file(events_path, "events file");
    const EventStream stream = load_events(events_path, cfg.sim.width, cfg.sim.height);
    const std::vector<EventWindow> windows = slice_stream(stream, cfg.events);
    std::ostringstream os;
    os << "index,start_us,end_us,events\n";
    for (std::size_t i = 0; i < windows.size(); ++i) {
        os << i << ',' << windows[i].start_time << ',' << windows[i].end_time << ','
           << windows[i].events.size() << '\n';
    }
    if (o.out_dir.empty()) {
        std::cout << os.str();
    } else {
        write_file(prepare_out(o) / "windows.csv", os.str());
    }
    spdlog::info("{} events in {} windows", stream.events.size(), windows.size());
    return kExitOk;
}

int
run_train(const CommonOptions &o, const std::string &events_path, const std::string &poses_path) {
    AppConfig cfg = resolve_config(o);
    require_file(events_path, "events file");
    require_file(poses_path, "pose manifest");
    const fs::path out = prepare_out(o);
    const PoseManifest poses = load_poses_file(poses_path);
    const EventStream stream =
        load_events(events_path, poses.intrinsics.width, poses.intrinsics.height);
    const TrainingDataset ds = make_training_dataset(stream, poses.cameras(), cfg.events, cfg.sim.color);
    spdlog::info("{} windows, DSSIM range {:.4g}", ds.size(), ds.dssim_range);
    const TrainResult result = train_progressive(ds, cfg.train, [&](int round, const TrainResult &r) {
        write_file(out / ("cloud_round" + std::to_string(round) + ".ply"), save_ply(r.cloud));
        spdlog::info("round {} done: {} splats, gamma {:.4f}", round, r.cloud.size(), r.gamma);
    });
    write_file(out / "cloud.ply", save_ply(result.cloud));
    write_file(out / "train_log.csv", result.log.to_csv());
    nlohmann::json summary = {{"splats", result.cloud.size()},
                              {"gamma", result.gamma},
                              {"windows", ds.size()},
                              {"config_hash", config_hash(cfg)}};
    write_file(out / "summary.json", summary.dump(2) + "\n");
    write_file(out / "config.toml", dump_config(cfg));
    return kExitOk;
}

int
run_refine(const CommonOptions &o, const std::string &cloud_path, const std::string &poses_path) {
    AppConfig cfg = resolve_config(o);
    require_file(cloud_path, "cloud");
    require_file(poses_path, "pose manifest");
    const fs::path out = prepare_out(o);
    const GaussianCloud cloud = load_ply(read_file(cloud_path));
    const PoseManifest poses = load_poses_file(poses_path);
    const std::vector<CameraView> track = poses.cameras();
    std::vector<BlurTarget> frames;
    for (const ExposureEntry &e : poses.exposures) {
        if (e.image.empty()) {
            continue;
        }
        BlurTarget t;
        t.image = read_image(resolve_relative(poses_path, e.image));
        t.config = make_blur_config(track, e.start, e.end, e.n_eiw);
        frames.push_back(std::move(t));
    }
    TrainingLog log;
    const GaussianCloud refined = refine_appearance(cloud, frames, cfg.train, &log);
    write_file(out / "refined.ply", save_ply(refined));
    write_file(out / "refine_log.csv", log.to_csv());
    spdlog::info("refined against {} blurred frames", frames.size());
    return kExitOk;
}

int
run_render(const CommonOptions &o, const std::string &cloud_path, const std::string &poses_path) {
    AppConfig cfg = resolve_config(o);
    require_file(cloud_path, "cloud");
    require_file(poses_path, "pose manifest");
    const fs::path out = prepare_out(o);
    const GaussianCloud cloud = load_ply(read_file(cloud_path));
    const std::vector<CameraView> views = load_poses_file(poses_path).cameras();
    for (std::size_t i = 0; i < views.size(); ++i) {
        write_both(out, numbered("render", i, ""), render(cloud, views[i], cfg.train.render).rgb);
    }
    return kExitOk;
}

int
run_eval(const CommonOptions &o, const std::string &cloud_path, const std::string &poses_path) {
    AppConfig cfg = resolve_config(o);
    require_file(cloud_path, "cloud");
    require_file(poses_path, "pose manifest");
    const GaussianCloud cloud = load_ply(read_file(cloud_path));
    const PoseManifest poses = load_poses_file(poses_path);
    const std::vector<CameraView> views = poses.cameras();
    std::vector<Image> renders, truth;
    for (std::size_t i = 0; i < views.size(); ++i) {
        if (poses.views[i].image.empty()) {
            throw Error(ErrorKind::Schema,
                        "$.views[" + std::to_string(i) + "]: evaluation needs an image");
        }
        truth.push_back(read_image(resolve_relative(poses_path, poses.views[i].image)));
        renders.push_back(render(cloud, views[i], cfg.train.render).rgb);
    }
    const EvalReport report = evaluate(renders, truth, cfg.eval);
    if (o.out_dir.empty()) {
        std::cout << report.to_json() << '\n';
    } else {
        write_file(prepare_out(o) / "report.json", report.to_json() + "\n");
    }
    if (report.mean_psnr_infinite) {
        spdlog::info("mean PSNR inf, mean SSIM {:.4f}", report.mean_ssim);
    } else {
        spdlog::info("mean PSNR {:.3f} dB, mean SSIM {:.4f}", report.mean_psnr, report.mean_ssim);
    }
    return kExitOk;
}

int
run_export_frames(const CommonOptions &o, const std::string &events_path) {
    AppConfig cfg = resolve_config(o);
    require_file(events_path, "events file");
    const fs::path out = prepare_out(o);
    const EventStream stream = load_events(events_path, cfg.sim.width, cfg.sim.height);
    const std::vector<EventWindow> windows = slice_stream(stream, cfg.events);
    const double range =
        5.0 * cfg.events.threshold * polarity_count_quantile(windows, 0.99);
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const EventFrame f = accumulate(windows[i], cfg.events, mix_seed(cfg.seed, 0, i));
        Image vis = f.accumulated;
        for (std::size_t k = 0; k < vis.size(); ++k) {
            vis[k] = (vis[k] + range) / (2.0 * range);
        }
        write_image(out / numbered("frame", i, ".pfm"), f.accumulated);
        write_image(out / numbered("frame", i, ".png"), vis);
    }
    spdlog::info("wrote {} frames", windows.size());
    return kExitOk;
}

void
setup_logging() {
    if (!spdlog::get("evsplat")) {
        auto logger = spdlog::stderr_logger_mt("evsplat");
        spdlog::set_default_logger(logger);
    }
}

} // namespace

int
exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Usage:
        return kExitUsage;
    case ErrorKind::Format:
    case ErrorKind::OutOfBounds:
    case ErrorKind::EmptyStream:
    case ErrorKind::Schema:
    case ErrorKind::Io:
        return kExitInput;
    default:
        return kExitRuntime;
    }
}

int
cli_main(int argc, char **argv) {
    setup_logging();
    CLI::App app{"Gaussian splat reconstruction from event streams"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "evsplat 0.1.0");

    CommonOptions common;
    std::string events_path, poses_path, cloud_path, truth_path;
    bool csv = false;

    auto *sim = app.add_subcommand("simulate", "render a scene along an orbit and emit events");
    add_common(sim, common, true);
    sim->add_option("--truth", truth_path, "ground-truth cloud (default: toy scene)");
    sim->add_flag("--csv", csv, "write events as CSV instead of EVT1");

    auto *slice = app.add_subcommand("slice", "split an event stream into windows");
    add_common(slice, common, false);
    slice->add_option("-e,--events", events_path, "events file (.csv or .evt1); CSV sensor size comes from [simulate]");

    auto *train = app.add_subcommand("train", "fit a splat cloud to events");
    add_common(train, common, true);
    train->add_option("-e,--events", events_path, "events file");
    train->add_option("-p,--poses", poses_path, "pose manifest of the event camera");
    train->add_flag("--carry-params", common.carry_params,
                    "keep all parameters of surviving splats between rounds");

    auto *refine = app.add_subcommand("refine", "fit appearance to blurred frames");
    add_common(refine, common, true);
    refine->add_option("--cloud", cloud_path, "input cloud");
    refine->add_option("-p,--poses", poses_path, "manifest with exposures");

    auto *rend = app.add_subcommand("render", "render a cloud at manifest poses");
    add_common(rend, common, true);
    rend->add_option("--cloud", cloud_path, "input cloud");
    rend->add_option("-p,--poses", poses_path, "pose manifest");

    auto *eval = app.add_subcommand("eval", "score renders against manifest images");
    add_common(eval, common, false);
    eval->add_option("--cloud", cloud_path, "input cloud");
    eval->add_option("-p,--poses", poses_path, "manifest with an image per view");

    auto *frames = app.add_subcommand("export-frames", "write accumulated event frames");
    add_common(frames, common, true);
    frames->add_option("-e,--events", events_path, "events file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::CallForAllHelp &e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::CallForVersion &e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (common.dump) {
            std::cout << dump_config(resolve_config(common));
            return kExitOk;
        }
        if (sim->parsed()) {
            return run_simulate(common, truth_path, csv);
        }
        if (slice->parsed()) {
            return run_slice(common, events_path);
        }
        if (train->parsed()) {
            return run_train(common, events_path, poses_path);
        }
        if (refine->parsed()) {
            return run_refine(common, cloud_path, poses_path);
        }
        if (rend->parsed()) {
            return run_render(common, cloud_path, poses_path);
        }
        if (eval->parsed()) {
            return run_eval(common, cloud_path, poses_path);
        }
        if (frames->parsed()) {
            return run_export_frames(common, events_path);
        }
    } catch (const Error &e) {
        spdlog::error("{}", e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace evsplat
