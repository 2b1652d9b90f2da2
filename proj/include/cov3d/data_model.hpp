#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cov3d/common.hpp"

namespace cov3d {

namespace fs = std::filesystem;

enum class DetectionLabel : int { NonCovid = 0, Covid = 1 };

enum class Split { Train, Val, Test };

std::string to_string(Split split);
std::optional<Split> parse_split(std::string_view token);

/// Severity grade, 1 (mild) to 4 (critical).
struct Severity {
    int grade = 1;
    static Severity from_grade(int grade);
    /// Zero-based class index used by the 4-way classifier.
    int class_index() const noexcept { return grade - 1; }
    bool operator==(const Severity&) const = default;
};

struct CTScan {
    std::string scan_id;
    std::vector<fs::path> slice_paths;  // ordered by numeric file index
    std::vector<std::int64_t> slice_indices;
    std::optional<DetectionLabel> detection_label;
    std::optional<Severity> severity_label;
    /// Populated when loaded eagerly.
    std::vector<Image> slices;

    std::size_t n_slices() const noexcept { return slice_paths.size(); }
    void validate() const;
};

struct LoadScanOptions {
    bool eager = true;
};

/// Reads `<scan_dir>/<index>.png` files, sorted by numeric index. Rejects an
/// empty directory, non-integer stems and mixed slice dimensions.
CTScan load_scan(const fs::path& scan_dir, const LoadScanOptions& options = {});

/// Decodes the slices of a lazily loaded scan (returns the cached ones for an
/// eager scan). Decode failures name the slice index.
std::vector<Image> read_slices(const CTScan& scan);

struct ManifestEntry {
    std::string scan_path;
    Split split = Split::Train;
    std::optional<DetectionLabel> detection_label;
    std::optional<Severity> severity_label;

    bool operator==(const ManifestEntry&) const = default;
};

/// Label key -> count. Keys: "non-covid", "covid", "severity-1" .. "severity-4".
using ClassCounts = std::map<Split, std::map<std::string, std::size_t>>;

class Manifest {
public:
    Manifest() = default;
    explicit Manifest(std::vector<ManifestEntry> entries);

    const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }
    const ClassCounts& class_counts() const noexcept { return counts_; }
    std::size_t count(Split split, const std::string& key) const;

    void add(ManifestEntry entry);
    std::vector<ManifestEntry> entries_in(Split split) const;

    /// Directory the relative scan paths are resolved against.
    const fs::path& root() const noexcept { return root_; }
    void set_root(fs::path root) { root_ = std::move(root); }
    fs::path resolve(const ManifestEntry& entry) const;

    static ClassCounts compute_counts(const std::vector<ManifestEntry>& entries);

    bool operator==(const Manifest& other) const { return entries_ == other.entries_; }

private:
    std::vector<ManifestEntry> entries_;
    ClassCounts counts_;
    fs::path root_;
};

inline constexpr std::string_view kManifestHeader = "scan_path,split,covid_label,severity";

Manifest load_manifest(const fs::path& path);
Manifest parse_manifest(const std::string& text);
std::string format_manifest(const Manifest& manifest);
void write_manifest(const Manifest& manifest, const fs::path& path);

/// Ground-truth slice labels written next to synthetic scans.
struct SliceLabel {
    std::int64_t index = 0;
    bool is_lung = false;
};
std::vector<SliceLabel> load_slice_labels(const fs::path& csv_path);

/// Sibling paths of the synthetic ground truth for a scan directory.
fs::path masks_dir_for(const fs::path& scan_dir);
fs::path slice_labels_for(const fs::path& scan_dir);

// ---------------------------------------------------------------------------
// Synthetic data

enum class ScanClass { NonCovid, Covid, Severity1, Severity2, Severity3, Severity4 };

std::string to_string(ScanClass c);
std::optional<ScanClass> parse_scan_class(std::string_view token);

struct FractionRange {
    double min = 0.0;
    double max = 0.0;
    bool operator==(const FractionRange&) const = default;
};

struct SyntheticSpec {
    std::map<ScanClass, int> n_scans_per_class{{ScanClass::NonCovid, 4}, {ScanClass::Covid, 4}};
    std::pair<int, int> slice_count_range{50, 80};
    std::pair<int, int> image_size{128, 128};  // (H, W)
    std::array<FractionRange, 4> lesion_fraction_by_severity{
        FractionRange{0.04, 0.10}, FractionRange{0.16, 0.24}, FractionRange{0.30, 0.40}, FractionRange{0.48, 0.60}};
    double blank_slice_fraction = 0.2;
    double val_fraction = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SyntheticSpec from_json(const nlohmann::json& j);
};

/// One generated scan held in memory, with its ground truth.
struct SyntheticScan {
    std::string scan_id;
    ScanClass scan_class = ScanClass::NonCovid;
    std::vector<Image> slices;
    std::vector<BinaryMask> lung_masks;
    std::vector<BinaryMask> lesion_masks;
    std::vector<bool> is_lung;
    double lesion_fraction = 0.0;
};

/// Deterministic in (spec.seed, scan_number).
SyntheticScan synthesize_scan(const SyntheticSpec& spec, ScanClass scan_class, std::size_t scan_number);

/// Writes scan directories, masks, slice labels and `manifest.csv` into
/// `out_dir`; returns the manifest (root set to `out_dir`).
Manifest generate_synthetic_dataset(const SyntheticSpec& spec, const fs::path& out_dir);

}  // namespace cov3d
