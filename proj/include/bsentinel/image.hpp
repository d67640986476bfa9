#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"

namespace bsentinel {

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    std::size_t size() const noexcept { return channels * height * width; }
    std::string str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
    }
    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Planar (channel-major, then row-major) image with values in [0, 1].
class ImageTensor {
public:
    ImageTensor() = default;

    explicit ImageTensor(ImageShape shape, float fill = 0.0f) : shape_(shape), pixels_(shape.size(), fill) {
        if (shape.channels == 0 || shape.height == 0 || shape.width == 0) {
            throw ShapeError("image dimensions must be positive, got " + shape.str());
        }
    }

    ImageTensor(ImageShape shape, std::vector<float> pixels) : shape_(shape), pixels_(std::move(pixels)) {
        if (pixels_.size() != shape_.size()) {
            throw ShapeError("image " + shape_.str() + " needs " + std::to_string(shape_.size()) + " values, got " +
                             std::to_string(pixels_.size()));
        }
    }

    const ImageShape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return pixels_.size(); }

    std::size_t index(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return (c * shape_.height + y) * shape_.width + x;
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels_[index(c, y, x)]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels_[index(c, y, x)]; }

    float& operator[](std::size_t i) { return pixels_[i]; }
    float operator[](std::size_t i) const { return pixels_[i]; }

    const std::vector<float>& pixels() const noexcept { return pixels_; }
    std::vector<float>& pixels() noexcept { return pixels_; }

    void clamp() {
        for (auto& p : pixels_) p = std::clamp(p, 0.0f, 1.0f);
    }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

private:
    ImageShape shape_{};
    std::vector<float> pixels_;
};

}  // namespace bsentinel
