#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "cov3d/data_model.hpp"
#include "cov3d/io.hpp"
#include "cov3d/rng.hpp"

namespace cov3d {

std::string to_string(ScanClass c) {
    switch (c) {
        case ScanClass::NonCovid: return "non-covid";
        case ScanClass::Covid: return "covid";
        case ScanClass::Severity1: return "severity-1";
        case ScanClass::Severity2: return "severity-2";
        case ScanClass::Severity3: return "severity-3";
        case ScanClass::Severity4: return "severity-4";
    }
    return "?";
}

std::optional<ScanClass> parse_scan_class(std::string_view token) {
    for (auto c : {ScanClass::NonCovid, ScanClass::Covid, ScanClass::Severity1, ScanClass::Severity2,
                   ScanClass::Severity3, ScanClass::Severity4})
        if (token == to_string(c)) return c;
    return std::nullopt;
}

namespace {

std::optional<int> severity_grade(ScanClass c) {
    switch (c) {
        case ScanClass::Severity1: return 1;
        case ScanClass::Severity2: return 2;
        case ScanClass::Severity3: return 3;
        case ScanClass::Severity4: return 4;
        default: return std::nullopt;
    }
}

constexpr float kBody = 0.55f;
constexpr float kLung = 0.12f;
constexpr float kLesion = 0.62f;

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

/// Smooth random field from bilinear interpolation of a coarse lattice.
std::vector<double> value_noise(std::int64_t h, std::int64_t w, std::int64_t cell, Rng& rng) {
    const std::int64_t gh = h / cell + 2, gw = w / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gh * gw));
    for (auto& v : lattice) v = rng.uniform();
    std::vector<double> out(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y) / static_cast<double>(cell);
        const auto y0 = static_cast<std::int64_t>(fy);
        const double ty = fy - static_cast<double>(y0);
        for (std::int64_t x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / static_cast<double>(cell);
            const auto x0 = static_cast<std::int64_t>(fx);
            const double tx = fx - static_cast<double>(x0);
            auto g = [&](std::int64_t yy, std::int64_t xx) { return lattice[static_cast<std::size_t>(yy * gw + xx)]; };
            out[static_cast<std::size_t>(y * w + x)] =
                (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                ty * ((1 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
        }
    }
    return out;
}

}  // namespace

void SyntheticSpec::validate() const {
    auto fail = [](const std::string& msg) { throw Error("synthetic_spec", msg); };
    int total = 0;
    for (const auto& [cls, n] : n_scans_per_class) {
        if (n < 0) fail("negative scan count for " + to_string(cls));
        total += n;
    }
    if (total == 0) fail("no scans requested");
    if (slice_count_range.second < 1) fail("max slice count < 1");
    if (slice_count_range.first < 1 || slice_count_range.first > slice_count_range.second)
        fail("slice_count_range must satisfy 1 <= min <= max");
    if (image_size.first < 8 || image_size.second < 8) fail("image_size must be at least 8x8");
    for (std::size_t k = 0; k < lesion_fraction_by_severity.size(); ++k) {
        const auto& r = lesion_fraction_by_severity[k];
        if (!(r.min >= 0.0 && r.max <= 1.0 && r.min <= r.max))
            fail("lesion fraction range for severity " + std::to_string(k + 1) + " must lie in [0,1] with min<=max");
        if (k > 0) {
            const auto& prev = lesion_fraction_by_severity[k - 1];
            if (!(prev.min < r.min && prev.max < r.max))
                fail("lesion fraction ranges must strictly increase with severity");
        }
    }
    if (!(blank_slice_fraction >= 0.0 && blank_slice_fraction <= 1.0)) fail("blank_slice_fraction outside [0,1]");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction outside [0,1)");
}

nlohmann::json SyntheticSpec::to_json() const {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [cls, n] : n_scans_per_class) counts[to_string(cls)] = n;
    nlohmann::json lesions = nlohmann::json::object();
    for (std::size_t k = 0; k < 4; ++k)
        lesions[std::to_string(k + 1)] = {lesion_fraction_by_severity[k].min, lesion_fraction_by_severity[k].max};
    return {{"n_scans_per_class", counts},
            {"slice_count_range", {slice_count_range.first, slice_count_range.second}},
            {"image_size", {image_size.first, image_size.second}},
            {"lesion_fraction_by_severity", lesions},
            {"blank_slice_fraction", blank_slice_fraction},
            {"val_fraction", val_fraction},
            {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "n_scans_per_class") {
                s.n_scans_per_class.clear();
                for (const auto& [cls, n] : value.items()) {
                    const auto c = parse_scan_class(cls);
                    if (!c) throw Error("synthetic_spec", "unknown scan class '" + cls + "'");
                    s.n_scans_per_class[*c] = n.get<int>();
                }
            } else if (key == "slice_count_range") {
                s.slice_count_range = {value.at(0).get<int>(), value.at(1).get<int>()};
            } else if (key == "image_size") {
                s.image_size = {value.at(0).get<int>(), value.at(1).get<int>()};
            } else if (key == "lesion_fraction_by_severity") {
                for (const auto& [grade, range] : value.items()) {
                    const int g = std::stoi(grade);
                    if (g < 1 || g > 4) throw Error("synthetic_spec", "severity key '" + grade + "' outside 1..4");
                    s.lesion_fraction_by_severity[static_cast<std::size_t>(g - 1)] = {range.at(0).get<double>(),
                                                                                     range.at(1).get<double>()};
                }
            } else if (key == "blank_slice_fraction") {
                s.blank_slice_fraction = value.get<double>();
            } else if (key == "val_fraction") {
                s.val_fraction = value.get<double>();
            } else if (key == "seed") {
                s.seed = value.get<std::uint64_t>();
            } else {
                throw Error("synthetic_spec", "unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("synthetic_spec", e.what());
    }
    s.validate();
    return s;
}

SyntheticScan synthesize_scan(const SyntheticSpec& spec, ScanClass scan_class, std::size_t scan_number) {
    Rng rng = Rng::substream(spec.seed, scan_number);
    const auto h = static_cast<std::int64_t>(spec.image_size.first);
    const auto w = static_cast<std::int64_t>(spec.image_size.second);
    const auto hd = static_cast<double>(h), wd = static_cast<double>(w);

    SyntheticScan scan;
    char id[32];
    std::snprintf(id, sizeof id, "scan_%04zu", scan_number);
    scan.scan_id = id;
    scan.scan_class = scan_class;

    const auto n = rng.integer(spec.slice_count_range.first, spec.slice_count_range.second);
    const auto n_blank = std::min<std::int64_t>(std::llround(spec.blank_slice_fraction * static_cast<double>(n)), n - 1);
    const std::int64_t n_top = n_blank / 2;
    const std::int64_t n_lung = n - n_blank;

    std::optional<int> grade = severity_grade(scan_class);
    if (scan_class == ScanClass::Covid) grade = static_cast<int>(rng.integer(1, 4));
    FractionRange range{0.0, 0.0};
    if (scan_class != ScanClass::NonCovid) range = spec.lesion_fraction_by_severity[static_cast<std::size_t>(*grade - 1)];
    scan.lesion_fraction = rng.uniform(range.min, range.max);

    const Ellipse body{hd * rng.uniform(0.48, 0.52), wd * rng.uniform(0.48, 0.52), hd * rng.uniform(0.32, 0.36),
                       wd * rng.uniform(0.40, 0.44)};
    const double lung_ry = hd * rng.uniform(0.20, 0.24), lung_rx = wd * rng.uniform(0.12, 0.14);
    const double lung_dx = wd * rng.uniform(0.17, 0.19);
    const std::int64_t cell = std::max<std::int64_t>(2, w / 24);

    for (std::int64_t z = 0; z < n; ++z) {
        Image img(h, w);
        BinaryMask lung(h, w), lesion(h, w);
        const bool is_lung = z >= n_top && z < n_top + n_lung;
        if (!is_lung) {
            for (auto& p : img.pixels)
                if (rng.uniform() < 0.05) p = 1.0f / 255.0f;
        } else {
            const double t = (static_cast<double>(z - n_top) + 0.5) / static_cast<double>(n_lung);
            const double scale = 0.55 + 0.45 * std::sin(std::numbers::pi * t);
            const Ellipse left{body.cy, body.cx - lung_dx, lung_ry * scale, lung_rx * scale};
            const Ellipse right{body.cy, body.cx + lung_dx, lung_ry * scale, lung_rx * scale};
            std::vector<std::size_t> lung_pixels;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t x = 0; x < w; ++x) {
                    const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
                    float v = 0.0f;
                    if (body.contains(py, px)) v = clamp01(kBody + rng.uniform(-0.03, 0.03));
                    if (left.contains(py, px) || right.contains(py, px)) {
                        v = clamp01(kLung + rng.uniform(-0.03, 0.03));
                        lung.at(y, x) = 1;
                        lung_pixels.push_back(static_cast<std::size_t>(y * w + x));
                    }
                    img.at(y, x) = v;
                }
            }
            const auto k = static_cast<std::size_t>(std::llround(scan.lesion_fraction * static_cast<double>(lung_pixels.size())));
            if (k > 0) {
                const auto field = value_noise(h, w, cell, rng);
                auto by_noise = [&](std::size_t a, std::size_t b) {
                    return field[a] != field[b] ? field[a] > field[b] : a < b;
                };
                std::nth_element(lung_pixels.begin(), lung_pixels.begin() + static_cast<std::ptrdiff_t>(k - 1),
                                 lung_pixels.end(), by_noise);
                for (std::size_t i = 0; i < k; ++i) {
                    const std::size_t p = lung_pixels[i];
                    lesion.bits[p] = 1;
                    img.pixels[p] = clamp01(kLesion + rng.uniform(-0.05, 0.05));
                }
            }
        }
        scan.slices.push_back(std::move(img));
        scan.lung_masks.push_back(std::move(lung));
        scan.lesion_masks.push_back(std::move(lesion));
        scan.is_lung.push_back(is_lung);
    }
    return scan;
}

Manifest generate_synthetic_dataset(const SyntheticSpec& spec, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw Error("generate_synthetic_dataset", "cannot create '" + out_dir.string() + "': " + ec.message());

    Manifest manifest;
    std::size_t scan_number = 0;
    for (const auto& [cls, count] : spec.n_scans_per_class) {
        const auto n_val = static_cast<int>(std::llround(spec.val_fraction * count));
        for (int i = 0; i < count; ++i, ++scan_number) {
            const SyntheticScan scan = synthesize_scan(spec, cls, scan_number);
            const fs::path scan_dir = out_dir / scan.scan_id;
            const fs::path mask_dir = masks_dir_for(scan_dir);
            try {
                fs::create_directories(scan_dir);
                fs::create_directories(mask_dir);
                std::string labels = "index,is_lung\n";
                for (std::size_t z = 0; z < scan.slices.size(); ++z) {
                    const std::string name = std::to_string(z) + ".png";
                    io::write_png_gray(scan_dir / name, scan.slices[z]);
                    io::write_png_mask(mask_dir / name, scan.lung_masks[z]);
                    labels += std::to_string(z) + (scan.is_lung[z] ? ",1\n" : ",0\n");
                }
                io::write_text_atomic(slice_labels_for(scan_dir), labels);
            } catch (const std::exception& e) {
                throw Error("generate_synthetic_dataset", e.what());
            }

            ManifestEntry entry;
            entry.scan_path = scan.scan_id;
            entry.split = i >= count - n_val ? Split::Val : Split::Train;
            entry.detection_label = cls == ScanClass::NonCovid ? DetectionLabel::NonCovid : DetectionLabel::Covid;
            if (const auto g = severity_grade(cls)) entry.severity_label = Severity{*g};
            manifest.add(std::move(entry));
        }
    }
    try {
        write_manifest(manifest, out_dir / "manifest.csv");
    } catch (const std::exception& e) {
        throw Error("generate_synthetic_dataset", e.what());
    }
    manifest.set_root(out_dir);
    return manifest;
}

}  // namespace cov3d
