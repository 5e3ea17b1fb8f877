#pragma once

#include "uvseg/raster.hpp"

#include <filesystem>

namespace uvs::io {

RgbImage read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const RgbImage& image);

/// Masks are stored single-channel with 0 = background and 255 = foreground;
/// on read any value >= 128 counts as foreground.
BinaryMask read_png_mask(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const BinaryMask& mask);

} // namespace uvs::io
