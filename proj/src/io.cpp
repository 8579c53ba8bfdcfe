// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/io.hpp"

#include "evsplat/errors.hpp"

#include <nlohmann/json.hpp>
#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace evsplat {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume little endian");

[[noreturn]] void
schema_error(const std::string &path, const std::string &what) {
    throw Error(ErrorKind::Schema, path + ": " + what);
}

const json &
require(const json &obj, const char *key, const std::string &path) {
    if (!obj.is_object() || !obj.contains(key)) {
        schema_error(path, std::string("missing key '") + key + "'");
    }
    return obj.at(key);
}

double
number_at(const json &obj, const char *key, const std::string &path) {
    const json &v = require(obj, key, path);
    if (!v.is_number()) {
        schema_error(path + "." + key, "expected a number");
    }
    return v.get<double>();
}

int
positive_int_at(const json &obj, const char *key, const std::string &path) {
    const json &v = require(obj, key, path);
    if (!v.is_number_integer() || v.get<long long>() <= 0) {
        schema_error(path + "." + key, "expected a positive integer");
    }
    return static_cast<int>(v.get<long long>());
}

template <int N>
Eigen::Matrix<double, N, 1>
vector_at(const json &obj, const char *key, const std::string &path) {
    const json &v = require(obj, key, path);
    if (!v.is_array() || v.size() != N) {
        schema_error(path + "." + key, "expected an array of " + std::to_string(N) + " numbers");
    }
    Eigen::Matrix<double, N, 1> out;
    for (int i = 0; i < N; ++i) {
        if (!v[i].is_number()) {
            schema_error(path + "." + key + "[" + std::to_string(i) + "]", "expected a number");
        }
        out[i] = v[i].get<double>();
    }
    return out;
}

std::string
optional_string(const json &obj, const char *key, const std::string &path) {
    if (!obj.contains(key)) {
        return {};
    }
    if (!obj.at(key).is_string()) {
        schema_error(path + "." + key, "expected a string");
    }
    return obj.at(key).get<std::string>();
}

struct PlyField {
    std::string name;
    bool is_float = false; // otherwise double
};

template <typename T>
void
append_raw(std::string &out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

} // namespace

std::vector<CameraView>
PoseManifest::cameras() const {
    std::vector<CameraView> out;
    out.reserve(views.size());
    for (const PoseEntry &p : views) {
        CameraView v = p.view;
        v.fx = intrinsics.fx;
        v.fy = intrinsics.fy;
        v.cx = intrinsics.cx;
        v.cy = intrinsics.cy;
        v.width = intrinsics.width;
        v.height = intrinsics.height;
        out.push_back(v);
    }
    return out;
}

PoseManifest
load_poses(const std::string &json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error &e) {
        throw Error(ErrorKind::Schema, std::string("$: invalid JSON: ") + e.what());
    }
    if (!root.is_object()) {
        schema_error("$", "expected an object");
    }
    PoseManifest m;
    const json &intr = require(root, "intrinsics", "$");
    const std::string ip = "$.intrinsics";
    m.intrinsics.fx = number_at(intr, "fx", ip);
    m.intrinsics.fy = number_at(intr, "fy", ip);
    m.intrinsics.cx = number_at(intr, "cx", ip);
    m.intrinsics.cy = number_at(intr, "cy", ip);
    m.intrinsics.width = positive_int_at(intr, "width", ip);
    m.intrinsics.height = positive_int_at(intr, "height", ip);
    try {
        m.intrinsics.validate();
    } catch (const Error &e) {
        schema_error(ip, e.what());
    }

    const json &views = require(root, "views", "$");
    if (!views.is_array()) {
        schema_error("$.views", "expected an array");
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
        const std::string vp = "$.views[" + std::to_string(i) + "]";
        const json &v = views[i];
        if (!v.is_object()) {
            schema_error(vp, "expected an object");
        }
        PoseEntry e;
        e.view = m.intrinsics;
        e.view.time = number_at(v, "time", vp);
        const Vec4 q = vector_at<4>(v, "rotation", vp);
        const double norm = q.norm();
        if (!(std::abs(norm - 1.0) <= 1e-2)) {
            schema_error(vp + ".rotation", "quaternion norm " + std::to_string(norm) +
                                               " is not within 1e-2 of 1");
        }
        if (norm != 1.0) {
            if (std::abs(norm - 1.0) > 1e-12) {
                spdlog::warn("{}.rotation: normalizing quaternion of norm {}", vp, norm);
            }
        }
        e.view.rotation = Quaternion{q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm};
        e.view.translation = vector_at<3>(v, "translation", vp);
        e.image = optional_string(v, "image", vp);
        if (!m.views.empty() && !(e.view.time > m.views.back().view.time)) {
            schema_error(vp + ".time", "times must increase strictly");
        }
        m.views.push_back(std::move(e));
    }

    if (root.contains("exposures")) {
        const json &ex = root.at("exposures");
        if (!ex.is_array()) {
            schema_error("$.exposures", "expected an array");
        }
        for (std::size_t i = 0; i < ex.size(); ++i) {
            const std::string ep = "$.exposures[" + std::to_string(i) + "]";
            ExposureEntry e;
            e.start = number_at(ex[i], "start", ep);
            e.end = number_at(ex[i], "end", ep);
            if (!(e.end > e.start)) {
                schema_error(ep, "end must exceed start");
            }
            if (ex[i].contains("n_eiw")) {
                e.n_eiw = positive_int_at(ex[i], "n_eiw", ep);
            }
            e.image = optional_string(ex[i], "image", ep);
            m.exposures.push_back(std::move(e));
        }
    }
    return m;
}

PoseManifest
load_poses_file(const std::filesystem::path &path) {
    return load_poses(read_file(path));
}

std::string
save_poses(const PoseManifest &m) {
    json root;
    root["intrinsics"] = {{"fx", m.intrinsics.fx},       {"fy", m.intrinsics.fy},
                          {"cx", m.intrinsics.cx},       {"cy", m.intrinsics.cy},
                          {"width", m.intrinsics.width}, {"height", m.intrinsics.height}};
    json views = json::array();
    for (const PoseEntry &p : m.views) {
        const Quaternion &q = p.view.rotation;
        json v = {{"time", p.view.time},
                  {"rotation", {q.w, q.x, q.y, q.z}},
                  {"translation",
                   {p.view.translation.x(), p.view.translation.y(), p.view.translation.z()}}};
        if (!p.image.empty()) {
            v["image"] = p.image;
        }
        views.push_back(std::move(v));
    }
    root["views"] = std::move(views);
    if (!m.exposures.empty()) {
        json ex = json::array();
        for (const ExposureEntry &e : m.exposures) {
            json j = {{"start", e.start}, {"end", e.end}, {"n_eiw", e.n_eiw}};
            if (!e.image.empty()) {
                j["image"] = e.image;
            }
            ex.push_back(std::move(j));
        }
        root["exposures"] = std::move(ex);
    }
    return root.dump(2) + "\n";
}

std::string
save_ply(const GaussianCloud &cloud) {
    const int coeffs = SHCoefficients::coeff_count(cloud.sh_degree);
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\n";
    header << "element vertex " << cloud.size() << "\n";
    std::vector<std::string> names = {"x",           "y",           "z",           "log_scale_0",
                                      "log_scale_1", "log_scale_2", "rot_0",       "rot_1",
                                      "rot_2",       "rot_3",       "opacity_logit", "f_dc_0",
                                      "f_dc_1",      "f_dc_2"};
    for (int k = 0; k < 3 * (coeffs - 1); ++k) {
        names.push_back("f_rest_" + std::to_string(k));
    }
    for (const std::string &n : names) {
        header << "property double " << n << "\n";
    }
    header << "end_header\n";
    std::string out = header.str();
    out.reserve(out.size() + cloud.size() * names.size() * sizeof(double));
    for (const Gaussian &g : cloud.gaussians) {
        for (int k = 0; k < 3; ++k) {
            append_raw(out, g.mean[k]);
        }
        for (int k = 0; k < 3; ++k) {
            append_raw(out, g.log_scale[k]);
        }
        append_raw(out, g.rotation.w);
        append_raw(out, g.rotation.x);
        append_raw(out, g.rotation.y);
        append_raw(out, g.rotation.z);
        append_raw(out, g.opacity_logit);
        for (int c = 0; c < 3; ++c) {
            append_raw(out, g.sh.bands[0][c]);
        }
        // Rest coefficients are stored channel-major.
        for (int c = 0; c < 3; ++c) {
            for (int k = 1; k < coeffs; ++k) {
                append_raw(out, g.sh.bands[k][c]);
            }
        }
    }
    return out;
}

GaussianCloud
load_ply(const std::string &bytes) {
    const std::string end_marker = "end_header\n";
    const std::size_t header_end = bytes.find(end_marker);
    if (bytes.rfind("ply\n", 0) != 0 || header_end == std::string::npos) {
        throw Error(ErrorKind::Format, "not a PLY file");
    }
    std::istringstream header(bytes.substr(0, header_end));
    std::string line;
    std::size_t count = 0;
    bool have_vertex = false;
    bool in_vertex = false;
    std::vector<PlyField> fields;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "binary_little_endian") {
                throw Error(ErrorKind::Format, "unsupported PLY format " + fmt);
            }
        } else if (word == "element") {
            std::string name;
            ls >> name >> count;
            if (!ls || name != "vertex" || have_vertex) {
                throw Error(ErrorKind::Format, "expected a single vertex element");
            }
            have_vertex = in_vertex = true;
        } else if (word == "property") {
            std::string type, name;
            ls >> type >> name;
            if (!in_vertex || !ls) {
                throw Error(ErrorKind::Format, "malformed property line: " + line);
            }
            if (type == "double" || type == "float64") {
                fields.push_back({name, false});
            } else if (type == "float" || type == "float32") {
                fields.push_back({name, true});
            } else {
                throw Error(ErrorKind::Format, "unsupported property type " + type);
            }
        }
    }
    if (!have_vertex) {
        throw Error(ErrorKind::Format, "missing vertex element");
    }
    std::map<std::string, std::size_t> index;
    std::vector<std::size_t> offset(fields.size());
    std::size_t stride = 0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        index[fields[i].name] = i;
        offset[i] = stride;
        stride += fields[i].is_float ? 4 : 8;
    }
    const auto field = [&](const std::string &name) {
        const auto it = index.find(name);
        if (it == index.end()) {
            throw Error(ErrorKind::Format, "missing property " + name);
        }
        return it->second;
    };
    int rest = 0;
    while (index.count("f_rest_" + std::to_string(rest))) {
        ++rest;
    }
    int degree = -1;
    for (int d = 0; d <= kMaxShDegree; ++d) {
        if (3 * (SHCoefficients::coeff_count(d) - 1) == rest) {
            degree = d;
        }
    }
    if (degree < 0) {
        throw Error(ErrorKind::Format, "unsupported number of f_rest properties: " +
                                           std::to_string(rest));
    }
    const std::size_t body = header_end + end_marker.size();
    if (stride == 0 || (bytes.size() - body) / stride < count ||
        bytes.size() - body != count * stride) {
        throw Error(ErrorKind::Format, "PLY body is truncated or has trailing bytes");
    }

    const char *base = bytes.data() + body;
    const auto get = [&](std::size_t row, std::size_t f) {
        const char *p = base + row * stride + offset[f];
        if (fields[f].is_float) {
            float v;
            std::memcpy(&v, p, 4);
            return static_cast<double>(v);
        }
        double v;
        std::memcpy(&v, p, 8);
        return v;
    };
    const std::size_t fx = field("x"), fy = field("y"), fz = field("z");
    const std::size_t fs[3] = {field("log_scale_0"), field("log_scale_1"), field("log_scale_2")};
    const std::size_t fr[4] = {field("rot_0"), field("rot_1"), field("rot_2"), field("rot_3")};
    const std::size_t fo = field("opacity_logit");
    const std::size_t fdc[3] = {field("f_dc_0"), field("f_dc_1"), field("f_dc_2")};
    const int coeffs = SHCoefficients::coeff_count(degree);
    std::vector<std::size_t> frest(static_cast<std::size_t>(rest));
    for (int k = 0; k < rest; ++k) {
        frest[k] = field("f_rest_" + std::to_string(k));
    }

    GaussianCloud cloud;
    cloud.sh_degree = degree;
    cloud.gaussians.reserve(count);
    for (std::size_t row = 0; row < count; ++row) {
        Gaussian g;
        g.mean = Vec3(get(row, fx), get(row, fy), get(row, fz));
        for (int k = 0; k < 3; ++k) {
            g.log_scale[k] = get(row, fs[k]);
        }
        g.rotation = {get(row, fr[0]), get(row, fr[1]), get(row, fr[2]), get(row, fr[3])};
        g.opacity_logit = get(row, fo);
        g.sh = SHCoefficients(degree);
        for (int c = 0; c < 3; ++c) {
            g.sh.bands[0][c] = get(row, fdc[c]);
            for (int k = 1; k < coeffs; ++k) {
                g.sh.bands[k][c] = get(row, frest[c * (coeffs - 1) + k - 1]);
            }
        }
        cloud.gaussians.push_back(std::move(g));
    }
    return cloud;
}

void
write_png(const std::filesystem::path &path, const Image &image) {
    if (image.channels() != 1 && image.channels() != 3) {
        throw Error(ErrorKind::DimensionMismatch, "PNG output needs 1 or 3 channels");
    }
    std::unique_ptr<FILE, int (*)(FILE *)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) {
        throw Error(ErrorKind::Io, "cannot write " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error(ErrorKind::Io, "libpng initialization failed");
    }
    const int w = image.width(), h = image.height(), ch = image.channels();
    std::vector<png_byte> row(static_cast<std::size_t>(w) * ch);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::Io, "libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8, ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                const double v = std::clamp(image.at(x, y, c), 0.0, 1.0);
                row[static_cast<std::size_t>(x) * ch + c] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image
read_png(const std::filesystem::path &path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw Error(ErrorKind::Io, "cannot read PNG " + path.string() + ": " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw Error(ErrorKind::Format, "cannot decode PNG " + path.string() + ": " + img.message);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), 3);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = buf[i] / 255.0;
    }
    return out;
}

std::string
encode_pfm(const Image &image) {
    if (image.channels() != 1 && image.channels() != 3) {
        throw Error(ErrorKind::DimensionMismatch, "PFM output needs 1 or 3 channels");
    }
    std::string out = image.channels() == 3 ? "PF\n" : "Pf\n";
    out += std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n-1.0\n";
    // Rows are stored bottom to top.
    for (int y = image.height() - 1; y >= 0; --y) {
        for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < image.channels(); ++c) {
                append_raw(out, static_cast<float>(image.at(x, y, c)));
            }
        }
    }
    return out;
}

Image
decode_pfm(const std::string &bytes) {
    std::istringstream in(bytes);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (!in || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) {
        throw Error(ErrorKind::Format, "malformed PFM header");
    }
    if (scale >= 0.0) {
        throw Error(ErrorKind::Format, "big-endian PFM is not supported");
    }
    in.get(); // single whitespace before the raster
    const int ch = magic == "PF" ? 3 : 1;
    const std::size_t start = static_cast<std::size_t>(in.tellg());
    const std::size_t need = static_cast<std::size_t>(w) * h * ch * sizeof(float);
    if (bytes.size() < start || bytes.size() - start != need) {
        throw Error(ErrorKind::Format, "PFM raster is truncated or has trailing bytes");
    }
    Image out(w, h, ch);
    const char *p = bytes.data() + start;
    for (int y = h - 1; y >= 0; --y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                float v;
                std::memcpy(&v, p, sizeof(float));
                p += sizeof(float);
                out.at(x, y, c) = v;
            }
        }
    }
    return out;
}

Image
read_image(const std::filesystem::path &path) {
    const std::string ext = path.extension().string();
    if (ext == ".png") {
        return read_png(path);
    }
    if (ext == ".pfm") {
        return decode_pfm(read_file(path));
    }
    throw Error(ErrorKind::Format, "unsupported image extension: " + path.string());
}

void
write_image(const std::filesystem::path &path, const Image &image) {
    const std::string ext = path.extension().string();
    if (ext == ".png") {
        write_png(path, image);
    } else if (ext == ".pfm") {
        write_file(path, encode_pfm(image));
    } else {
        throw Error(ErrorKind::Format, "unsupported image extension: " + path.string());
    }
}

std::string
read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::Io, "cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void
write_file(const std::filesystem::path &path, const std::string &bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(ErrorKind::Io, "cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorKind::Io, "failed writing " + path.string());
    }
}

} // namespace evsplat
