#include "cov3d/volume_assembly.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cov3d/io.hpp"

namespace cov3d {

void VolumeTensor::validate() const {
    const auto expected = static_cast<std::size_t>(shape.depth * shape.height * shape.width);
    if (shape.depth < 1 || shape.height < 1 || shape.width < 1)
        throw Error("volume", "non-positive shape");
    if (data.size() != expected)
        throw Error("volume", "data size " + std::to_string(data.size()) + " does not match shape");
    for (float v : data)
        if (!std::isfinite(v)) throw Error("volume", "non-finite value in volume '" + provenance.scan_id + "'");
}

std::string interpolation_id(DepthMode mode) {
    return mode == DepthMode::Linear ? "bilinear-hw/linear-endpoint-d" : "bilinear-hw/nearest-endpoint-d";
}

DepthMode parse_depth_mode(std::string_view token) {
    if (token == "linear") return DepthMode::Linear;
    if (token == "subsample") return DepthMode::Subsample;
    throw Error("volume_assembly", "unknown depth mode '" + std::string(token) + "'");
}

Image resize_bilinear(const Image& src, std::int64_t height, std::int64_t width) {
    if (src.height < 1 || src.width < 1) throw Error("resize", "empty image");
    if (height < 1 || width < 1) throw Error("resize", "non-positive target size");
    if (src.height == height && src.width == width) return src;

    struct Tap {
        std::int64_t i0, i1;
        double t;
    };
    auto taps = [](std::int64_t in, std::int64_t out) {
        std::vector<Tap> result(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t o = 0; o < out; ++o) {
            double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in - 1));
            const auto i0 = static_cast<std::int64_t>(std::floor(s));
            const auto i1 = std::min(i0 + 1, in - 1);
            result[static_cast<std::size_t>(o)] = {i0, i1, s - static_cast<double>(i0)};
        }
        return result;
    };
    const auto ty = taps(src.height, height);
    const auto tx = taps(src.width, width);

    Image out(height, width);
    for (std::int64_t y = 0; y < height; ++y) {
        const auto& a = ty[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < width; ++x) {
            const auto& b = tx[static_cast<std::size_t>(x)];
            const double top = (1.0 - b.t) * src.at(a.i0, b.i0) + b.t * src.at(a.i0, b.i1);
            const double bottom = (1.0 - b.t) * src.at(a.i1, b.i0) + b.t * src.at(a.i1, b.i1);
            out.at(y, x) = static_cast<float>((1.0 - a.t) * top + a.t * bottom);
        }
    }
    return out;
}

double depth_position(std::int64_t j, std::int64_t n, std::int64_t d) {
    if (d == 1) return static_cast<double>(n - 1) / 2.0;
    return static_cast<double>(j * (n - 1)) / static_cast<double>(d - 1);
}

VolumeTensor assemble_volume(std::span<const Image> slices, VolumeShape target, DepthMode mode) {
    if (slices.empty()) throw Error("assemble_volume", "empty slice list");
    if (target.depth < 1 || target.height < 1 || target.width < 1)
        throw Error("assemble_volume", "target dimensions must be >= 1");
    for (std::size_t i = 1; i < slices.size(); ++i)
        if (!slices[i].same_shape(slices[0]))
            throw Error("assemble_volume", "non-uniform slice shapes at position " + std::to_string(i));

    std::vector<Image> resized;
    resized.reserve(slices.size());
    for (const auto& s : slices) resized.push_back(resize_bilinear(s, target.height, target.width));

    const auto n = static_cast<std::int64_t>(resized.size());
    const std::int64_t d = target.depth;
    VolumeTensor v(target);
    v.provenance.n_source_slices = n;
    v.provenance.interpolation_id = interpolation_id(mode);
    const auto plane = static_cast<std::size_t>(v.plane_size());

    for (std::int64_t j = 0; j < d; ++j) {
        // Exact integer split of j*(n-1)/(d-1) so that n == d is the identity.
        std::int64_t i0;
        double t;
        if (d == 1) {
            i0 = (n - 1) / 2;
            t = (n - 1) % 2 ? 0.5 : 0.0;
        } else {
            const std::int64_t num = j * (n - 1);
            i0 = num / (d - 1);
            t = static_cast<double>(num % (d - 1)) / static_cast<double>(d - 1);
        }
        float* dst = v.data.data() + static_cast<std::size_t>(j) * plane;
        if (mode == DepthMode::Subsample) {
            const std::int64_t pick = t >= 0.5 ? std::min(i0 + 1, n - 1) : i0;
            std::copy(resized[static_cast<std::size_t>(pick)].pixels.begin(),
                      resized[static_cast<std::size_t>(pick)].pixels.end(), dst);
            continue;
        }
        const auto& a = resized[static_cast<std::size_t>(i0)].pixels;
        if (t == 0.0) {
            std::copy(a.begin(), a.end(), dst);
            continue;
        }
        const auto& b = resized[static_cast<std::size_t>(std::min(i0 + 1, n - 1))].pixels;
        for (std::size_t p = 0; p < plane; ++p)
            dst[p] = static_cast<float>((1.0 - t) * static_cast<double>(a[p]) + t * static_cast<double>(b[p]));
    }
    return v;
}

DualVolume assemble_dual(std::span<const Image> slices, std::int64_t spatial, DepthMode mode) {
    return {assemble_volume(slices, {kSeverityCoarseDepth, spatial, spatial}, mode),
            assemble_volume(slices, {kSeverityFineDepth, spatial, spatial}, mode)};
}

bool ChannelStats::is_uniform() const noexcept {
    return mean[0] == mean[1] && mean[1] == mean[2] && std[0] == std[1] && std[1] == std[2];
}

bool ChannelStats::is_identity() const noexcept { return *this == ChannelStats::identity(); }

void ChannelStats::validate() const {
    for (double s : std)
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("normalize_volume", "std components must be > 0");
    for (double m : mean)
        if (!std::isfinite(m)) throw Error("normalize_volume", "mean components must be finite");
}

VolumeTensor normalize_volume(const VolumeTensor& v, const ChannelStats& stats) {
    stats.validate();
    if (v.shape.depth != 3 && !stats.is_uniform())
        throw Error("normalize_volume", "per-channel stats need a 3-channel volume, got depth " +
                                            std::to_string(v.shape.depth));
    VolumeTensor out = v;
    const auto plane = static_cast<std::size_t>(v.plane_size());
    for (std::int64_t d = 0; d < v.shape.depth; ++d) {
        const auto c = static_cast<std::size_t>(v.shape.depth == 3 ? d : 0);
        const double m = stats.mean[c], s = stats.std[c];
        float* p = out.data.data() + static_cast<std::size_t>(d) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>((static_cast<double>(p[i]) - m) / s);
    }
    return out;
}

void write_volume_cache(const std::filesystem::path& stem, const VolumeTensor& v) {
    static_assert(std::endian::native == std::endian::little, "volume cache assumes a little-endian host");
    v.validate();
    const std::filesystem::path raw = stem.string() + ".f32";
    const std::filesystem::path tmp = raw.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(float)));
        if (!out) throw Error("volume_cache", "cannot write '" + raw.string() + "'");
    }
    std::filesystem::rename(tmp, raw);
    const nlohmann::json meta{{"shape", {v.shape.depth, v.shape.height, v.shape.width}},
                              {"dtype", "float32-le"},
                              {"scan_id", v.provenance.scan_id},
                              {"n_source_slices", v.provenance.n_source_slices},
                              {"interpolation_id", v.provenance.interpolation_id}};
    io::write_text_atomic(stem.string() + ".json", meta.dump(2) + "\n");
}

VolumeTensor read_volume_cache(const std::filesystem::path& stem) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(io::read_text(stem.string() + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw Error("volume_cache", e.what());
    }
    VolumeTensor v({meta.at("shape").at(0).get<std::int64_t>(), meta.at("shape").at(1).get<std::int64_t>(),
                    meta.at("shape").at(2).get<std::int64_t>()});
    v.provenance = {meta.at("scan_id").get<std::string>(), meta.at("n_source_slices").get<std::int64_t>(),
                    meta.at("interpolation_id").get<std::string>()};
    const std::string bytes = io::read_text(stem.string() + ".f32");
    if (bytes.size() != v.data.size() * sizeof(float)) throw Error("volume_cache", "size mismatch for '" + stem.string() + "'");
    std::memcpy(v.data.data(), bytes.data(), bytes.size());
    v.validate();
    return v;
}

}  // namespace cov3d
