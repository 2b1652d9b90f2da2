#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cov3d {

/// Error raised by every module. The message is prefixed with the stage that
/// produced it, e.g. "[load_manifest] row 3: unknown split token 'dev'".
class Error : public std::runtime_error {
public:
    Error(std::string_view stage, std::string_view message)
        : std::runtime_error("[" + std::string(stage) + "] " + std::string(message)),
          stage_(stage) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Single-channel image with float pixels, row-major.
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::int64_t h, std::int64_t w, float value = 0.0f)
        : height(h), width(w), pixels(static_cast<std::size_t>(h * w), value) {}

    float& at(std::int64_t r, std::int64_t c) { return pixels[static_cast<std::size_t>(r * width + c)]; }
    float at(std::int64_t r, std::int64_t c) const { return pixels[static_cast<std::size_t>(r * width + c)]; }

    std::size_t size() const noexcept { return pixels.size(); }
    bool same_shape(const Image& other) const noexcept {
        return height == other.height && width == other.width;
    }
    double mean() const;

    bool operator==(const Image&) const = default;
};

/// H x W grid of {0,1}.
struct BinaryMask {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::int64_t h, std::int64_t w, std::uint8_t value = 0)
        : height(h), width(w), bits(static_cast<std::size_t>(h * w), value) {}

    std::uint8_t& at(std::int64_t r, std::int64_t c) { return bits[static_cast<std::size_t>(r * width + c)]; }
    std::uint8_t at(std::int64_t r, std::int64_t c) const { return bits[static_cast<std::size_t>(r * width + c)]; }

    std::size_t count() const noexcept;
    bool same_shape(const Image& img) const noexcept {
        return height == img.height && width == img.width;
    }
    bool same_shape(const BinaryMask& other) const noexcept {
        return height == other.height && width == other.width;
    }

    bool operator==(const BinaryMask&) const = default;
};

}  // namespace cov3d
