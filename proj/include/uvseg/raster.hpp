#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace uvs {

/// Interleaved 8-bit RGB raster, row-major (y, x, channel).
struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w * 3, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
    bool empty() const noexcept { return pixels.empty(); }
    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Binary raster with values in {0, 1}.
struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
    std::size_t count() const noexcept
    {
        std::size_t n = 0;
        for (auto v : data) n += v;
        return n;
    }
    bool same_dims(const BinaryMask& o) const noexcept { return height == o.height && width == o.width; }
    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

} // namespace uvs
