#include "cov3d/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include "cov3d/io.hpp"

namespace cov3d {

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::optional<Split> parse_split(std::string_view token) {
    if (token == "train") return Split::Train;
    if (token == "val") return Split::Val;
    if (token == "test") return Split::Test;
    return std::nullopt;
}

Severity Severity::from_grade(int grade) {
    if (grade < 1 || grade > 4) throw Error("severity", "grade " + std::to_string(grade) + " outside {1,2,3,4}");
    return Severity{grade};
}

namespace {

std::optional<std::int64_t> parse_int(std::string_view s) {
    std::int64_t value = 0;
    if (s.empty()) return std::nullopt;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end) return std::nullopt;
    return value;
}

void check_label_consistency(const std::optional<DetectionLabel>& det, const std::optional<Severity>& sev,
                             std::string_view stage, const std::string& where) {
    if (sev && det != DetectionLabel::Covid)
        throw Error(stage, where + ": severity label requires covid_label=1");
}

}  // namespace

void CTScan::validate() const {
    if (slice_paths.empty()) throw Error("ct_scan", "'" + scan_id + "' has no slices");
    if (slice_indices.size() != slice_paths.size())
        throw Error("ct_scan", "'" + scan_id + "' index/path count mismatch");
    for (std::size_t i = 1; i < slice_indices.size(); ++i)
        if (slice_indices[i] <= slice_indices[i - 1])
            throw Error("ct_scan", "'" + scan_id + "' slice indices not strictly increasing");
    check_label_consistency(detection_label, severity_label, "ct_scan", "'" + scan_id + "'");
}

CTScan load_scan(const fs::path& scan_dir, const LoadScanOptions& options) {
    if (!fs::is_directory(scan_dir)) throw Error("load_scan", "not a directory: '" + scan_dir.string() + "'");
    std::vector<std::pair<std::int64_t, fs::path>> files;
    for (const auto& e : fs::directory_iterator(scan_dir)) {
        if (!e.is_regular_file()) continue;
        const auto stem = e.path().stem().string();
        const auto index = parse_int(stem);
        if (!index) throw Error("load_scan", "unparsable slice filename '" + e.path().filename().string() + "'");
        files.emplace_back(*index, e.path());
    }
    if (files.empty()) throw Error("load_scan", "empty scan directory '" + scan_dir.string() + "'");
    std::sort(files.begin(), files.end());
    for (std::size_t i = 1; i < files.size(); ++i)
        if (files[i].first == files[i - 1].first)
            throw Error("load_scan", "duplicate slice index " + std::to_string(files[i].first));

    CTScan scan;
    scan.scan_id = scan_dir.filename().string();
    if (scan.scan_id.empty()) scan.scan_id = scan_dir.parent_path().filename().string();
    for (auto& [index, path] : files) {
        scan.slice_indices.push_back(index);
        scan.slice_paths.push_back(std::move(path));
    }

    if (options.eager) {
        scan.slices = read_slices(scan);
    } else {
        const auto first = io::read_png_size(scan.slice_paths.front());
        for (std::size_t i = 1; i < scan.slice_paths.size(); ++i)
            if (!(io::read_png_size(scan.slice_paths[i]) == first))
                throw Error("load_scan", "mixed image dimensions at slice " + std::to_string(scan.slice_indices[i]));
    }
    return scan;
}

std::vector<Image> read_slices(const CTScan& scan) {
    if (!scan.slices.empty()) return scan.slices;
    std::vector<Image> out;
    out.reserve(scan.n_slices());
    for (std::size_t i = 0; i < scan.n_slices(); ++i) {
        try {
            out.push_back(io::read_png_gray(scan.slice_paths[i]));
        } catch (const Error& e) {
            throw Error("read_slices", "slice " + std::to_string(scan.slice_indices[i]) + ": " + e.what());
        }
        if (!out.back().same_shape(out.front()))
            throw Error("load_scan", "mixed image dimensions at slice " + std::to_string(scan.slice_indices[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void add_counts(ClassCounts& counts, const ManifestEntry& e) {
    auto& per_split = counts[e.split];
    if (e.detection_label) ++per_split[*e.detection_label == DetectionLabel::Covid ? "covid" : "non-covid"];
    if (e.severity_label) ++per_split["severity-" + std::to_string(e.severity_label->grade)];
}

}  // namespace

Manifest::Manifest(std::vector<ManifestEntry> entries) {
    for (auto& e : entries) add(std::move(e));
}

void Manifest::add(ManifestEntry entry) {
    check_label_consistency(entry.detection_label, entry.severity_label, "manifest", "'" + entry.scan_path + "'");
    if (std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.scan_path == entry.scan_path; }))
        throw Error("manifest", "duplicate scan_path '" + entry.scan_path + "'");
    add_counts(counts_, entry);
    entries_.push_back(std::move(entry));
}

ClassCounts Manifest::compute_counts(const std::vector<ManifestEntry>& entries) {
    ClassCounts counts;
    for (const auto& e : entries) add_counts(counts, e);
    return counts;
}

std::size_t Manifest::count(Split split, const std::string& key) const {
    const auto s = counts_.find(split);
    if (s == counts_.end()) return 0;
    const auto k = s->second.find(key);
    return k == s->second.end() ? 0 : k->second;
}

std::vector<ManifestEntry> Manifest::entries_in(Split split) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
                 [&](const auto& e) { return e.split == split; });
    return out;
}

fs::path Manifest::resolve(const ManifestEntry& entry) const {
    const fs::path p(entry.scan_path);
    return p.is_absolute() ? p : root_ / p;
}

Manifest parse_manifest(const std::string& text) {
    std::vector<std::string> lines;
    {
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            lines.push_back(std::move(line));
        }
    }
    if (lines.empty() || lines.front() != kManifestHeader)
        throw Error("load_manifest", "row 1: header must be '" + std::string(kManifestHeader) + "'");

    Manifest manifest;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::string row = "row " + std::to_string(i + 1);
        if (lines[i].empty()) continue;
        const auto fields = io::split_csv_line(lines[i]);
        if (fields.size() != 4)
            throw Error("load_manifest", row + ": expected 4 fields, got " + std::to_string(fields.size()));
        ManifestEntry entry;
        entry.scan_path = fields[0];
        if (entry.scan_path.empty()) throw Error("load_manifest", row + ": empty scan_path");
        const auto split = parse_split(fields[1]);
        if (!split) throw Error("load_manifest", row + ": unknown split token '" + fields[1] + "'");
        entry.split = *split;
        if (fields[2] == "0") entry.detection_label = DetectionLabel::NonCovid;
        else if (fields[2] == "1") entry.detection_label = DetectionLabel::Covid;
        else if (!fields[2].empty()) throw Error("load_manifest", row + ": covid_label must be 0, 1 or empty");
        if (!fields[3].empty()) {
            const auto grade = parse_int(fields[3]);
            if (!grade || *grade < 1 || *grade > 4)
                throw Error("load_manifest", row + ": severity '" + fields[3] + "' outside {1,2,3,4}");
            entry.severity_label = Severity{static_cast<int>(*grade)};
        }
        try {
            manifest.add(std::move(entry));
        } catch (const Error& e) {
            throw Error("load_manifest", row + ": " + e.what());
        }
    }
    return manifest;
}

Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw Error("load_manifest", "missing file '" + path.string() + "'");
    Manifest m = parse_manifest(io::read_text(path));
    m.set_root(path.parent_path());
    return m;
}

std::string format_manifest(const Manifest& manifest) {
    std::string out(kManifestHeader);
    out += '\n';
    for (const auto& e : manifest.entries()) {
        out += e.scan_path;
        out += ',';
        out += to_string(e.split);
        out += ',';
        if (e.detection_label) out += std::to_string(static_cast<int>(*e.detection_label));
        out += ',';
        if (e.severity_label) out += std::to_string(e.severity_label->grade);
        out += '\n';
    }
    return out;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
    for (const auto& e : manifest.entries())
        if (e.scan_path.find_first_of(",\n") != std::string::npos)
            throw Error("write_manifest", "scan_path may not contain ',' or newline: '" + e.scan_path + "'");
    io::write_text_atomic(path, format_manifest(manifest));
}

std::vector<SliceLabel> load_slice_labels(const fs::path& csv_path) {
    const auto lines = io::read_lines(csv_path);
    if (lines.empty() || lines.front() != "index,is_lung")
        throw Error("slice_labels", "'" + csv_path.string() + "' row 1: header must be 'index,is_lung'");
    std::vector<SliceLabel> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = io::split_csv_line(lines[i]);
        const auto index = f.size() == 2 ? parse_int(f[0]) : std::nullopt;
        if (!index || (f[1] != "0" && f[1] != "1"))
            throw Error("slice_labels", "'" + csv_path.string() + "' row " + std::to_string(i + 1) + ": malformed");
        out.push_back({*index, f[1] == "1"});
    }
    return out;
}

fs::path masks_dir_for(const fs::path& scan_dir) {
    const fs::path clean = scan_dir.filename().empty() ? scan_dir.parent_path() : scan_dir;
    return clean.parent_path() / (clean.filename().string() + "_masks");
}

fs::path slice_labels_for(const fs::path& scan_dir) {
    const fs::path clean = scan_dir.filename().empty() ? scan_dir.parent_path() : scan_dir;
    return clean.parent_path() / (clean.filename().string() + "_slices.csv");
}

}  // namespace cov3d
