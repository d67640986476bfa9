#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "container.hpp"
#include "errors.hpp"
#include "image.hpp"

namespace bsentinel {

namespace detail {

inline ImageTensor from_interleaved_rgb(const std::vector<std::uint8_t>& rgb, std::size_t h, std::size_t w) {
    ImageTensor img(ImageShape{3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rgb[(y * w + x) * 3 + c]) / 255.0f;
    return img;
}

inline ImageTensor decode_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw DataError("cannot decode PNG '" + path.string() + "': " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw DataError("cannot decode PNG '" + path.string() + "': " + image.message);
    }
    return from_interleaved_rgb(buffer, image.height, image.width);
}

/// Binary PPM (P6) with maxval up to 255.
inline ImageTensor decode_ppm(const std::filesystem::path& path) {
    const auto bytes = container::read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        std::string t;
        while (pos < bytes.size()) {
            const char ch = static_cast<char>(bytes[pos]);
            if (ch == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!t.empty()) break;
                ++pos;
            } else {
                t.push_back(ch);
                ++pos;
            }
        }
        return t;
    };
    const std::string fail = "cannot decode PPM '" + path.string() + "'";
    if (token() != "P6") throw DataError(fail + ": not a binary P6 file");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(token());
        h = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw DataError(fail + ": bad header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DataError(fail + ": unsupported header values");
    ++pos;  // single whitespace byte before the raster
    if (bytes.size() < pos + w * h * 3) throw DataError(fail + ": truncated raster");
    std::vector<std::uint8_t> rgb(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + w * h * 3));
    if (maxval != 255) {
        for (auto& v : rgb) v = static_cast<std::uint8_t>(std::lround(255.0 * v / static_cast<double>(maxval)));
    }
    return from_interleaved_rgb(rgb, h, w);
}

}  // namespace detail

/// Decodes a PNG or binary PPM file into a 3-channel image.
inline ImageTensor read_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing image file '" + path.string() + "'");
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png") return detail::decode_png(path);
    if (ext == ".ppm") return detail::decode_ppm(path);
    throw DataError("unsupported image format '" + ext + "' for '" + path.string() + "'");
}

inline void write_png(const ImageTensor& img, const std::filesystem::path& path) {
    if (img.shape().channels != 3) throw ShapeError("write_png expects a 3-channel image");
    const std::size_t h = img.shape().height, w = img.shape().width;
    std::vector<std::uint8_t> rgb(h * w * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr)) {
        throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
    }
}

/// Bilinear resampling with half-pixel centers.
inline ImageTensor resize_bilinear(const ImageTensor& src, std::size_t out_h, std::size_t out_w) {
    const auto& s = src.shape();
    if (s.height == out_h && s.width == out_w) return src;
    ImageTensor out(ImageShape{s.channels, out_h, out_w});
    const double sy = static_cast<double>(s.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(s.width) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, s.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, s.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < s.channels; ++c) {
                const double top = (1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1);
                const double bot = (1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

}  // namespace bsentinel
