// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/image.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

namespace evsplat {

struct Event {
    std::int64_t t_us = 0;
    int x = 0;
    int y = 0;
    int polarity = 1; // +1 or -1

    bool operator==(const Event &) const = default;
};

struct EventStream {
    int width = 0;
    int height = 0;
    std::vector<Event> events;

    std::size_t size() const { return events.size(); }
    bool empty() const { return events.empty(); }
    /// Checks bounds, polarity and time order. Throws OutOfBounds / Format.
    void validate() const;
};

struct EventWindow {
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    int width = 0;
    int height = 0;
    std::vector<Event> events;
};

struct EventCameraModel {
    double threshold = 0.2;
    double noise_sigma = 0.2;
    /// Cut once this many distinct pixels saw both polarities. <= 0 selects
    /// 2% of the pixel count.
    long neutralization_pixel_threshold = 0;
    long window_event_count = 50000;

    long resolved_neutralization_threshold(int width, int height) const;
    void validate() const;
};

inline constexpr long kNoNeutralizationCut = std::numeric_limits<long>::max();

struct EventFrame {
    int width = 0;
    int height = 0;
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    Image accumulated; // W x H x 1, log-intensity units
    std::vector<std::uint8_t> no_event_mask;

    bool no_event(int x, int y) const {
        return no_event_mask[static_cast<std::size_t>(y) * width + x] != 0;
    }
};

enum class BayerChannel : std::uint8_t { R = 0, G = 1, B = 2 };

/// RGGB color filter layout. When disabled, consumers use the channel mean.
struct BayerMask {
    int width = 0;
    int height = 0;
    bool enabled = true;

    static BayerChannel channel_at(int x, int y) {
        const bool odd_row = (y & 1) != 0;
        const bool odd_col = (x & 1) != 0;
        if (!odd_row && !odd_col) {
            return BayerChannel::R;
        }
        if (odd_row && odd_col) {
            return BayerChannel::B;
        }
        return BayerChannel::G;
    }
};

/// Parses CSV (`t_us,x,y,p`) or packed EVT1 bytes. CSV carries no
/// dimensions, so `width`/`height` must be given for it; EVT1 uses its own
/// header. Events are stably sorted by time.
EventStream parse_stream(std::string_view bytes, int width = 0, int height = 0);

std::string write_csv(const EventStream &stream);
std::string write_evt1(const EventStream &stream);

/// File helpers. Saving picks CSV for a `.csv` extension and EVT1 otherwise.
EventStream load_events(const std::string &path, int width = 0, int height = 0);
void save_events(const std::string &path, const EventStream &stream);

/// Splits the stream into windows by event count or neutralized-pixel count,
/// whichever triggers first. Throws EmptyStream.
std::vector<EventWindow> slice_stream(const EventStream &stream, const EventCameraModel &model);

/// Per-pixel polarity sums scaled by the threshold; no-event pixels get
/// scaled Gaussian noise drawn from a generator seeded with `seed`.
EventFrame accumulate(const EventWindow &window, const EventCameraModel &model,
                      std::uint64_t seed);

/// Selects one channel per pixel following `mask`, or averages channels when
/// the mask is disabled. Returns a single-channel image.
Image apply_bayer(const Image &rgb, const BayerMask &mask);

/// Quantile `q` of |sum of polarities| over all pixels that saw events,
/// across every window. Returns 1 when no events exist.
double polarity_count_quantile(const std::vector<EventWindow> &windows, double q = 0.99);

/// Deterministic seed for noise sampling of one window at one iteration.
std::uint64_t mix_seed(std::uint64_t global_seed, std::uint64_t iteration,
                       std::uint64_t window_index);

} // namespace evsplat
