#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cov3d/common.hpp"

namespace cov3d {

struct VolumeShape {
    std::int64_t depth = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    bool operator==(const VolumeShape&) const = default;
};

struct VolumeProvenance {
    std::string scan_id;
    std::int64_t n_source_slices = 0;
    std::string interpolation_id;
    bool operator==(const VolumeProvenance&) const = default;
};

/// Dense D x H x W float volume, depth-major. Depth doubles as the channel
/// axis once the volume is fed to a network.
struct VolumeTensor {
    VolumeShape shape;
    std::vector<float> data;
    VolumeProvenance provenance;

    VolumeTensor() = default;
    explicit VolumeTensor(VolumeShape s, float value = 0.0f)
        : shape(s), data(static_cast<std::size_t>(s.depth * s.height * s.width), value) {}

    std::int64_t plane_size() const noexcept { return shape.height * shape.width; }
    float& at(std::int64_t d, std::int64_t r, std::int64_t c) {
        return data[static_cast<std::size_t>((d * shape.height + r) * shape.width + c)];
    }
    float at(std::int64_t d, std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>((d * shape.height + r) * shape.width + c)];
    }
    std::span<const float> plane(std::int64_t d) const {
        return {data.data() + d * plane_size(), static_cast<std::size_t>(plane_size())};
    }

    /// Checks the element count against the shape and that every value is finite.
    void validate() const;
};

struct DualVolume {
    VolumeTensor coarse;      // D = 32
    VolumeTensor fine_depth;  // D = 16
};

inline constexpr std::int64_t kDetectionDepth = 64;
inline constexpr std::int64_t kSeverityCoarseDepth = 32;
inline constexpr std::int64_t kSeverityFineDepth = 16;

enum class DepthMode {
    Linear,     // endpoint-aligned linear interpolation along the slice axis
    Subsample,  // nearest slice at the same endpoint-aligned positions
};

std::string interpolation_id(DepthMode mode);
DepthMode parse_depth_mode(std::string_view token);

/// Bilinear resize with half-pixel centres and edge clamping; the identity when
/// the size is unchanged.
Image resize_bilinear(const Image& src, std::int64_t height, std::int64_t width);

/// Source position of output slice j when resampling n slices to d.
double depth_position(std::int64_t j, std::int64_t n, std::int64_t d);

VolumeTensor assemble_volume(std::span<const Image> slices, VolumeShape target, DepthMode mode = DepthMode::Linear);

DualVolume assemble_dual(std::span<const Image> slices, std::int64_t spatial, DepthMode mode = DepthMode::Linear);

struct ChannelStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};

    static ChannelStats identity() { return {}; }
    static ChannelStats imagenet() { return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}}; }
    bool is_uniform() const noexcept;
    bool is_identity() const noexcept;
    void validate() const;
    bool operator==(const ChannelStats&) const = default;
};

/// (v - mean) / std per channel. A 3-deep volume uses one triple entry per
/// slice; other depths require uniform stats.
VolumeTensor normalize_volume(const VolumeTensor& v, const ChannelStats& stats);

/// Volume cache format: `<stem>.f32` holds little-endian float32 data and
/// `<stem>.json` the shape, provenance and interpolation id.
void write_volume_cache(const std::filesystem::path& stem, const VolumeTensor& v);
VolumeTensor read_volume_cache(const std::filesystem::path& stem);

}  // namespace cov3d
