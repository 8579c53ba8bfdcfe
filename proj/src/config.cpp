// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/config.hpp"

#include "evsplat/errors.hpp"
#include "evsplat/io.hpp"

#include <toml.hpp>

#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

namespace evsplat {

namespace {

using Target = std::variant<double *, int *, long *, bool *, std::uint64_t *, Vec3 *, AlignMode *>;

struct Binding {
    std::string table; // dotted table path, empty for the root
    std::string key;
    Target target;
};

std::vector<Binding>
bindings(AppConfig &c) {
    SimulationConfig &s = c.sim;
    TrainConfig &t = c.train;
    return {
        {"run", "seed", &c.seed},
        {"run", "threads", &c.threads},

        {"simulate", "width", &s.width},
        {"simulate", "height", &s.height},
        {"simulate", "focal", &s.focal},
        {"simulate", "orbit_radius", &s.orbit_radius},
        {"simulate", "elevation", &s.elevation},
        {"simulate", "track_views", &s.track_views},
        {"simulate", "sim_frames", &s.sim_frames},
        {"simulate", "heldout_views", &s.heldout_views},
        {"simulate", "duration", &s.duration},
        {"simulate", "background", &s.background},
        {"simulate", "color", &s.color},
        {"simulate", "blurred_frames", &s.blurred_frames},
        {"simulate", "exposure_steps", &s.exposure_steps},
        {"simulate", "exposure_substeps", &s.exposure_substeps},
        {"simulate", "n_eiw", &s.n_eiw},

        {"events", "threshold", &c.events.threshold},
        {"events", "noise_sigma", &c.events.noise_sigma},
        {"events", "neutralization_pixel_threshold", &c.events.neutralization_pixel_threshold},
        {"events", "window_event_count", &c.events.window_event_count},

        {"train", "iterations", &t.iterations},
        {"train", "densify_grad_threshold", &t.densify_grad_threshold},
        {"train", "densify_interval", &t.densify_interval},
        {"train", "densify_from", &t.densify_from},
        {"train", "densify_until", &t.densify_until},
        {"train", "prune_opacity", &t.prune_opacity},
        {"train", "opacity_reset_interval", &t.opacity_reset_interval},
        {"train", "percent_dense", &t.percent_dense},
        {"train", "alpha_pro", &t.alpha_pro},
        {"train", "rounds", &t.rounds},
        {"train", "init_count", &t.init_count},
        {"train", "init_cube_scale", &t.init_cube_scale},
        {"train", "init_center", &t.init_center},
        {"train", "forward_facing", &t.forward_facing},
        {"train", "sh_degree", &t.sh_degree},
        {"train", "sh_increase_interval", &t.sh_increase_interval},
        {"train", "learn_gamma", &t.learn_gamma},
        {"train", "carry_params", &t.carry_params},
        {"train", "scene_extent", &t.scene_extent},

        {"train.lr", "mean_init", &t.lr.mean_init},
        {"train.lr", "mean_final", &t.lr.mean_final},
        {"train.lr", "sh", &t.lr.sh},
        {"train.lr", "sh_rest_factor", &t.lr.sh_rest_factor},
        {"train.lr", "opacity", &t.lr.opacity},
        {"train.lr", "scale", &t.lr.scale},
        {"train.lr", "rotation", &t.lr.rotation},
        {"train.lr", "gamma", &t.lr.gamma},

        {"loss", "lambda_dssim", &t.loss.lambda_dssim},
        {"loss", "gamma", &t.loss.gamma},
        {"loss", "log_floor", &t.loss.log_floor},
        {"loss", "ssim_window", &t.loss.ssim_window},
        {"loss", "ssim_sigma", &t.loss.ssim_sigma},
        {"loss", "ssim_c1", &t.loss.ssim_c1},
        {"loss", "ssim_c2", &t.loss.ssim_c2},

        {"render", "alpha_min", &t.render.alpha_min},
        {"render", "transmittance_min", &t.render.transmittance_min},
        {"render", "tile_size", &t.render.tile_size},

        {"refine", "iterations", &t.refine_iterations},
        {"refine", "eta_alpha", &t.eta_alpha},

        {"eval", "align", &c.eval.align},
        {"eval", "log_floor", &c.eval.log_floor},
    };
}

const char *
align_name(AlignMode m) {
    switch (m) {
    case AlignMode::Global:
        return "global";
    case AlignMode::PerView:
        return "per_view";
    case AlignMode::None:
        return "none";
    }
    return "global";
}

[[noreturn]] void
type_error(const std::string &path, const char *want) {
    throw Error(ErrorKind::Schema, path + ": expected " + want);
}

void
assign(const toml::node &node, Target target, const std::string &path) {
    std::visit(
        [&](auto *ptr) {
            using T = std::remove_pointer_t<decltype(ptr)>;
            if constexpr (std::is_same_v<T, double>) {
                if (auto v = node.value<double>()) {
                    *ptr = *v;
                } else {
                    type_error(path, "a number");
                }
            } else if constexpr (std::is_same_v<T, bool>) {
                if (auto v = node.value_exact<bool>()) {
                    *ptr = *v;
                } else {
                    type_error(path, "a boolean");
                }
            } else if constexpr (std::is_same_v<T, Vec3>) {
                const toml::array *arr = node.as_array();
                if (!arr || arr->size() != 3) {
                    type_error(path, "an array of 3 numbers");
                }
                for (int i = 0; i < 3; ++i) {
                    auto v = (*arr)[static_cast<std::size_t>(i)].value<double>();
                    if (!v) {
                        type_error(path, "an array of 3 numbers");
                    }
                    (*ptr)[i] = *v;
                }
            } else if constexpr (std::is_same_v<T, AlignMode>) {
                const auto v = node.value_exact<std::string>();
                if (v == "global") {
                    *ptr = AlignMode::Global;
                } else if (v == "per_view") {
                    *ptr = AlignMode::PerView;
                } else if (v == "none") {
                    *ptr = AlignMode::None;
                } else {
                    type_error(path, "one of \"global\", \"per_view\", \"none\"");
                }
            } else {
                const auto v = node.value_exact<std::int64_t>();
                if (!v || (std::is_unsigned_v<T> && *v < 0)) {
                    type_error(path, "an integer");
                }
                *ptr = static_cast<T>(*v);
            }
        },
        target);
}

std::string
format_value(Target target) {
    std::ostringstream os;
    os.precision(17);
    std::visit(
        [&](auto *ptr) {
            using T = std::remove_pointer_t<decltype(ptr)>;
            if constexpr (std::is_same_v<T, double>) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.17g", *ptr);
                std::string s = buf;
                if (s.find_first_of(".eEn") == std::string::npos) {
                    s += ".0";
                }
                os << s;
            } else if constexpr (std::is_same_v<T, bool>) {
                os << (*ptr ? "true" : "false");
            } else if constexpr (std::is_same_v<T, Vec3>) {
                char buf[128];
                std::snprintf(buf, sizeof(buf), "[%.17g, %.17g, %.17g]", (*ptr)[0], (*ptr)[1],
                              (*ptr)[2]);
                os << buf;
            } else if constexpr (std::is_same_v<T, AlignMode>) {
                os << '"' << align_name(*ptr) << '"';
            } else {
                os << *ptr;
            }
        },
        target);
    return os.str();
}

void
check_unknown(const toml::table &table, const std::string &prefix,
              const std::set<std::string> &known_keys, const std::set<std::string> &known_tables) {
    for (const auto &[k, node] : table) {
        const std::string path = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
        if (const toml::table *sub = node.as_table()) {
            if (!known_tables.count(path)) {
                throw Error(ErrorKind::Schema, path + ": unknown table");
            }
            check_unknown(*sub, path, known_keys, known_tables);
        } else if (!known_keys.count(path)) {
            throw Error(ErrorKind::Schema, path + ": unknown key");
        }
    }
}

} // namespace

void
AppConfig::sync() {
    sim.events = events;
    train.seed = seed;
    train.render.threads = threads;
    train.render.background = sim.background;
}

AppConfig
parse_config(const std::string &toml_text, AppConfig base) {
    toml::table doc;
    try {
        doc = toml::parse(toml_text);
    } catch (const toml::parse_error &e) {
        std::ostringstream os;
        os << "line " << e.source().begin.line << ": " << e.description();
        throw Error(ErrorKind::Schema, os.str());
    }
    std::vector<Binding> bs = bindings(base);
    std::set<std::string> keys, tables;
    for (const Binding &b : bs) {
        keys.insert(b.table + "." + b.key);
        std::string t = b.table;
        while (!t.empty()) {
            tables.insert(t);
            const std::size_t dot = t.rfind('.');
            t = dot == std::string::npos ? "" : t.substr(0, dot);
        }
    }
    check_unknown(doc, "", keys, tables);
    for (const Binding &b : bs) {
        const std::string path = b.table + "." + b.key;
        if (const toml::node *n = doc.at_path(path).node()) {
            assign(*n, b.target, path);
        }
    }
    base.sync();
    return base;
}

AppConfig
load_config(const std::filesystem::path &path, AppConfig base) {
    return parse_config(read_file(path), std::move(base));
}

std::string
dump_config(const AppConfig &cfg) {
    AppConfig copy = cfg;
    std::ostringstream os;
    std::string current;
    bool first = true;
    for (const Binding &b : bindings(copy)) {
        if (first || b.table != current) {
            os << (first ? "" : "\n") << '[' << b.table << "]\n";
            current = b.table;
            first = false;
        }
        os << b.key << " = " << format_value(b.target) << '\n';
    }
    return os.str();
}

std::string
config_hash(const AppConfig &cfg) {
    // FNV-1a, 64 bit.
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : dump_config(cfg)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

AppConfig
toy_config() {
    AppConfig c;
    c.events.window_event_count = 1000;
    c.train.iterations = 3000;
    c.train.rounds = 2;
    c.train.init_count = 1000;
    c.train.init_cube_scale = 0.6;
    c.train.sh_degree = 1;
    c.train.densify_grad_threshold = 1e-3;
    c.train.densify_from = 200;
    c.train.densify_until = 1500;
    c.train.alpha_pro = 0.5;
    c.sync();
    return c;
}

} // namespace evsplat
