// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/events.hpp"

#include "evsplat/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace evsplat {

namespace {

constexpr char kEvtMagic[4] = {'E', 'V', 'T', '1'};
constexpr std::size_t kEvtHeaderSize = 4 + 4 + 4 + 8;
constexpr std::size_t kEvtRecordSize = 8 + 2 + 2 + 1 + 3;

template <typename T>
T
read_le(const unsigned char *p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<T>(static_cast<std::uint64_t>(p[i]) << (8 * i));
    }
    return v;
}

template <typename T>
void
write_le(std::string &out, T v) {
    const auto u = static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
}

void
check_event(const Event &e, int width, int height, std::size_t index) {
    if (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height) {
        throw Error(ErrorKind::OutOfBounds, "event " + std::to_string(index) + " at (" +
                                                std::to_string(e.x) + "," + std::to_string(e.y) +
                                                ") outside " + std::to_string(width) + "x" +
                                                std::to_string(height));
    }
    if (e.polarity != 1 && e.polarity != -1) {
        throw Error(ErrorKind::Format, "event " + std::to_string(index) + " has polarity " +
                                           std::to_string(e.polarity));
    }
    if (e.t_us < 0) {
        throw Error(ErrorKind::Format, "event " + std::to_string(index) + " has negative time");
    }
}

void
sort_by_time(std::vector<Event> &events) {
    if (!std::is_sorted(events.begin(), events.end(),
                        [](const Event &a, const Event &b) { return a.t_us < b.t_us; })) {
        std::stable_sort(events.begin(), events.end(),
                         [](const Event &a, const Event &b) { return a.t_us < b.t_us; });
    }
}

EventStream
parse_evt1(std::string_view bytes) {
    if (bytes.size() < kEvtHeaderSize) {
        throw Error(ErrorKind::Format, "EVT1 header truncated");
    }
    const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
    EventStream s;
    s.width = static_cast<int>(read_le<std::uint32_t>(p + 4));
    s.height = static_cast<int>(read_le<std::uint32_t>(p + 8));
    const std::uint64_t count = read_le<std::uint64_t>(p + 12);
    if (s.width <= 0 || s.height <= 0) {
        throw Error(ErrorKind::Format, "EVT1 header has non-positive dimensions");
    }
    if ((bytes.size() - kEvtHeaderSize) / kEvtRecordSize < count) {
        throw Error(ErrorKind::Format, "EVT1 payload truncated: expected " +
                                           std::to_string(count) + " records");
    }
    s.events.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const unsigned char *r = p + kEvtHeaderSize + i * kEvtRecordSize;
        Event e;
        const std::uint64_t t = read_le<std::uint64_t>(r);
        if (t > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
            throw Error(ErrorKind::Format, "record " + std::to_string(i) + " time overflows");
        }
        e.t_us = static_cast<std::int64_t>(t);
        e.x = read_le<std::uint16_t>(r + 8);
        e.y = read_le<std::uint16_t>(r + 10);
        e.polarity = static_cast<std::int8_t>(r[12]);
        check_event(e, s.width, s.height, i);
        s.events[i] = e;
    }
    return s;
}

template <typename T>
bool
parse_field(std::string_view field, T &out) {
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) {
        field.remove_prefix(1);
    }
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) {
        field.remove_suffix(1);
    }
    if (!field.empty() && field.front() == '+') {
        field.remove_prefix(1);
    }
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
    return ec == std::errc() && ptr == field.data() + field.size();
}

EventStream
parse_csv(std::string_view bytes, int width, int height) {
    EventStream s;
    s.width = width;
    s.height = height;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    bool first_content = true;
    while (pos < bytes.size()) {
        std::size_t eol = bytes.find('\n', pos);
        if (eol == std::string_view::npos) {
            eol = bytes.size();
        }
        std::string_view line = bytes.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (line.find_first_not_of(" \t") == std::string_view::npos) {
            continue;
        }
        if (first_content) {
            first_content = false;
            if (line.find("t_us") != std::string_view::npos) {
                continue;
            }
        }
        if (width <= 0 || height <= 0) {
            throw Error(ErrorKind::Format, "CSV events need sensor width and height");
        }
        std::string_view fields[4];
        std::size_t start = 0;
        int n = 0;
        for (; n < 4; ++n) {
            const std::size_t comma = line.find(',', start);
            if (n < 3 && comma == std::string_view::npos) {
                break;
            }
            fields[n] = line.substr(start, n < 3 ? comma - start : std::string_view::npos);
            start = comma + 1;
        }
        Event e;
        if (n != 4 || !parse_field(fields[0], e.t_us) || !parse_field(fields[1], e.x) ||
            !parse_field(fields[2], e.y) || !parse_field(fields[3], e.polarity)) {
            throw Error(ErrorKind::Format, "malformed event record on line " +
                                               std::to_string(line_no));
        }
        try {
            check_event(e, width, height, s.events.size());
        } catch (const Error &err) {
            throw Error(err.kind(), std::string(err.what()) + " (line " +
                                        std::to_string(line_no) + ")");
        }
        s.events.push_back(e);
    }
    return s;
}

std::string
read_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::Io, "cannot open " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

void
EventStream::validate() const {
    for (std::size_t i = 0; i < events.size(); ++i) {
        check_event(events[i], width, height, i);
        if (i > 0 && events[i].t_us < events[i - 1].t_us) {
            throw Error(ErrorKind::Format, "events out of time order at " + std::to_string(i));
        }
    }
}

long
EventCameraModel::resolved_neutralization_threshold(int width, int height) const {
    if (neutralization_pixel_threshold > 0) {
        return neutralization_pixel_threshold;
    }
    const long pixels = static_cast<long>(width) * height;
    return std::max(1L, static_cast<long>(std::ceil(0.02 * static_cast<double>(pixels))));
}

void
EventCameraModel::validate() const {
    if (!(threshold > 0.0)) {
        throw Error(ErrorKind::BadSpec, "event threshold must be positive");
    }
    if (!(noise_sigma >= 0.0)) {
        throw Error(ErrorKind::BadSpec, "noise sigma must be non-negative");
    }
    if (window_event_count <= 0) {
        throw Error(ErrorKind::BadSpec, "window event count must be positive");
    }
}

EventStream
parse_stream(std::string_view bytes, int width, int height) {
    EventStream s;
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kEvtMagic, 4) == 0) {
        s = parse_evt1(bytes);
    } else {
        s = parse_csv(bytes, width, height);
    }
    sort_by_time(s.events);
    return s;
}

std::string
write_csv(const EventStream &stream) {
    std::string out = "t_us,x,y,p\n";
    out.reserve(out.size() + stream.size() * 20);
    char buf[96];
    for (const Event &e : stream.events) {
        const int n = std::snprintf(buf, sizeof(buf), "%lld,%d,%d,%d\n",
                                    static_cast<long long>(e.t_us), e.x, e.y, e.polarity);
        out.append(buf, static_cast<std::size_t>(n));
    }
    return out;
}

std::string
write_evt1(const EventStream &stream) {
    std::string out(kEvtMagic, 4);
    out.reserve(kEvtHeaderSize + stream.size() * kEvtRecordSize);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(stream.width));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(stream.height));
    write_le<std::uint64_t>(out, stream.size());
    for (const Event &e : stream.events) {
        write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e.t_us));
        write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.x));
        write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.y));
        out.push_back(static_cast<char>(static_cast<std::int8_t>(e.polarity)));
        out.append(3, '\0');
    }
    return out;
}

EventStream
load_events(const std::string &path, int width, int height) {
    return parse_stream(read_file(path), width, height);
}

void
save_events(const std::string &path, const EventStream &stream) {
    const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
    const std::string bytes = csv ? write_csv(stream) : write_evt1(stream);
    std::ofstream out(path, std::ios::binary);
    if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
        throw Error(ErrorKind::Io, "cannot write " + path);
    }
}

std::vector<EventWindow>
slice_stream(const EventStream &stream, const EventCameraModel &model) {
    if (stream.empty()) {
        throw Error(ErrorKind::EmptyStream, "cannot slice an empty event stream");
    }
    model.validate();
    const long neutral_limit = model.resolved_neutralization_threshold(stream.width, stream.height);
    const std::size_t pixels = static_cast<std::size_t>(stream.width) * stream.height;

    // Bit 1: saw a positive event, bit 2: saw a negative one.
    std::vector<std::uint8_t> seen(pixels, 0);
    std::vector<std::size_t> touched;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;

    std::size_t begin = 0;
    long count = 0;
    long neutralized = 0;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const Event &e = stream.events[i];
        const std::size_t px = static_cast<std::size_t>(e.y) * stream.width + e.x;
        const std::uint8_t before = seen[px];
        const std::uint8_t after = before | (e.polarity > 0 ? 1 : 2);
        if (before == 0) {
            touched.push_back(px);
        }
        if (after == 3 && before != 3) {
            ++neutralized;
        }
        seen[px] = after;
        ++count;
        if (count >= model.window_event_count || neutralized >= neutral_limit) {
            ranges.emplace_back(begin, i + 1);
            begin = i + 1;
            count = 0;
            neutralized = 0;
            for (std::size_t t : touched) {
                seen[t] = 0;
            }
            touched.clear();
        }
    }
    if (begin < stream.size()) {
        const double tail = static_cast<double>(stream.size() - begin);
        if (ranges.empty() || tail >= 0.1 * static_cast<double>(model.window_event_count)) {
            ranges.emplace_back(begin, stream.size());
        } else {
            ranges.back().second = stream.size();
        }
    }

    std::vector<EventWindow> windows;
    windows.reserve(ranges.size());
    for (const auto &[b, e] : ranges) {
        EventWindow w;
        w.width = stream.width;
        w.height = stream.height;
        w.events.assign(stream.events.begin() + static_cast<std::ptrdiff_t>(b),
                        stream.events.begin() + static_cast<std::ptrdiff_t>(e));
        w.start_time = w.events.front().t_us;
        if (!windows.empty()) {
            w.start_time = std::min(w.start_time, windows.back().end_time);
        }
        w.end_time = w.events.back().t_us + 1;
        windows.push_back(std::move(w));
    }
    return windows;
}

EventFrame
accumulate(const EventWindow &window, const EventCameraModel &model, std::uint64_t seed) {
    EventFrame f;
    f.width = window.width;
    f.height = window.height;
    f.start_time = window.start_time;
    f.end_time = window.end_time;
    const std::size_t pixels = static_cast<std::size_t>(f.width) * f.height;
    std::vector<long> sums(pixels, 0);
    f.no_event_mask.assign(pixels, 1);
    for (const Event &e : window.events) {
        if (e.x < 0 || e.x >= f.width || e.y < 0 || e.y >= f.height) {
            throw Error(ErrorKind::OutOfBounds, "window event outside sensor");
        }
        const std::size_t px = static_cast<std::size_t>(e.y) * f.width + e.x;
        sums[px] += e.polarity;
        f.no_event_mask[px] = 0;
    }
    f.accumulated = Image(f.width, f.height, 1, 0.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const bool noisy = model.noise_sigma > 0.0;
    for (std::size_t px = 0; px < pixels; ++px) {
        if (!f.no_event_mask[px]) {
            f.accumulated[px] = model.threshold * static_cast<double>(sums[px]);
        } else if (noisy) {
            f.accumulated[px] = model.threshold * model.noise_sigma * normal(rng);
        }
    }
    return f;
}

Image
apply_bayer(const Image &rgb, const BayerMask &mask) {
    if (rgb.channels() != 3 || rgb.width() != mask.width || rgb.height() != mask.height) {
        throw Error(ErrorKind::DimensionMismatch, "Bayer mask does not match image shape");
    }
    Image out(rgb.width(), rgb.height(), 1);
    for (int y = 0; y < rgb.height(); ++y) {
        for (int x = 0; x < rgb.width(); ++x) {
            if (mask.enabled) {
                out.at(x, y) = rgb.at(x, y, static_cast<int>(BayerMask::channel_at(x, y)));
            } else {
                out.at(x, y) = (rgb.at(x, y, 0) + rgb.at(x, y, 1) + rgb.at(x, y, 2)) / 3.0;
            }
        }
    }
    return out;
}

double
polarity_count_quantile(const std::vector<EventWindow> &windows, double q) {
    std::vector<long> counts;
    for (const EventWindow &w : windows) {
        std::vector<long> sums(static_cast<std::size_t>(w.width) * w.height, 0);
        std::vector<std::uint8_t> hit(sums.size(), 0);
        for (const Event &e : w.events) {
            const std::size_t px = static_cast<std::size_t>(e.y) * w.width + e.x;
            sums[px] += e.polarity;
            hit[px] = 1;
        }
        for (std::size_t px = 0; px < sums.size(); ++px) {
            if (hit[px]) {
                counts.push_back(std::abs(sums[px]));
            }
        }
    }
    if (counts.empty()) {
        return 1.0;
    }
    const std::size_t k = std::min(counts.size() - 1,
                                   static_cast<std::size_t>(q * static_cast<double>(counts.size())));
    std::nth_element(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(k), counts.end());
    return std::max(1.0, static_cast<double>(counts[k]));
}

std::uint64_t
mix_seed(std::uint64_t global_seed, std::uint64_t iteration, std::uint64_t window_index) {
    const auto splitmix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    std::uint64_t h = splitmix(global_seed);
    h = splitmix(h ^ iteration);
    return splitmix(h ^ (window_index * 0x632be59bd9b4e019ULL));
}

} // namespace evsplat
