// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace evsplat {

/// Dense row-major H x W x C grid of doubles. Channel is the fastest axis.
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, double fill = 0.0)
        : mWidth(width), mHeight(height), mChannels(channels),
          mData(static_cast<std::size_t>(width) * height * channels, fill) {}

    int width() const { return mWidth; }
    int height() const { return mHeight; }
    int channels() const { return mChannels; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(mWidth) * mHeight; }
    std::size_t size() const { return mData.size(); }
    bool empty() const { return mData.empty(); }

    bool same_shape(const Image &other) const {
        return mWidth == other.mWidth && mHeight == other.mHeight && mChannels == other.mChannels;
    }

    double &at(int x, int y, int c = 0) {
        return mData[(static_cast<std::size_t>(y) * mWidth + x) * mChannels + c];
    }
    double at(int x, int y, int c = 0) const {
        return mData[(static_cast<std::size_t>(y) * mWidth + x) * mChannels + c];
    }

    double &operator[](std::size_t i) { return mData[i]; }
    double operator[](std::size_t i) const { return mData[i]; }

    std::span<double> data() { return mData; }
    std::span<const double> data() const { return mData; }

    bool operator==(const Image &) const = default;

private:
    int mWidth = 0;
    int mHeight = 0;
    int mChannels = 0;
    std::vector<double> mData;
};

} // namespace evsplat
