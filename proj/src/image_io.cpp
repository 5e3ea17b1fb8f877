#include "uvseg/image_io.hpp"

#include "uvseg/error.hpp"

#include <png.h>

#include <cstring>

namespace uvs::io {

namespace {

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, std::size_t& height,
                                   std::size_t& width)
{
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw InvalidInput("cannot read PNG " + path.string() + ": " + image.message);
    image.format = format;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw InvalidInput("cannot decode PNG " + path.string() + ": " + image.message);
    }
    height = image.height;
    width = image.width;
    return buffer;
}

void write_png(const std::filesystem::path& path, png_uint_32 format, std::size_t height, std::size_t width,
               const std::uint8_t* data)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr))
        throw InvalidInput("cannot write PNG " + path.string() + ": " + image.message);
}

} // namespace

RgbImage read_png_rgb(const std::filesystem::path& path)
{
    RgbImage out;
    out.pixels = read_png(path, PNG_FORMAT_RGB, out.height, out.width);
    return out;
}

void write_png_rgb(const std::filesystem::path& path, const RgbImage& image)
{
    if (image.empty()) throw InvalidInput("refusing to write an empty image to " + path.string());
    write_png(path, PNG_FORMAT_RGB, image.height, image.width, image.pixels.data());
}

BinaryMask read_png_mask(const std::filesystem::path& path)
{
    BinaryMask out;
    out.data = read_png(path, PNG_FORMAT_GRAY, out.height, out.width);
    for (auto& v : out.data) v = v >= 128 ? 1 : 0;
    return out;
}

void write_png_mask(const std::filesystem::path& path, const BinaryMask& mask)
{
    if (mask.data.empty()) throw InvalidInput("refusing to write an empty mask to " + path.string());
    std::vector<std::uint8_t> gray(mask.data.size());
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.data[i] ? 255 : 0;
    write_png(path, PNG_FORMAT_GRAY, mask.height, mask.width, gray.data());
}

} // namespace uvs::io
