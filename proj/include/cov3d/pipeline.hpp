#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cov3d/data_model.hpp"
#include "cov3d/lung_segmentation.hpp"
#include "cov3d/slice_filter.hpp"
#include "cov3d/training.hpp"
#include "cov3d/volume_assembly.hpp"

namespace cov3d::pipeline {

enum class Task { Filter, Seg, Detect, Severity };

std::string to_string(Task task);
Task parse_task(std::string_view token);

/// Pipeline knobs that sit next to the TrainConfig keys in a run config file.
struct Settings {
    std::string backbone_tier = "toy";  // toy | full
    std::optional<std::string> detect_backbone;
    std::int64_t spatial_size = 224;           // detection H = W
    std::int64_t severity_spatial_size = 299;  // severity S
    DepthMode depth_mode = DepthMode::Linear;
    std::string normalization = "identity";  // identity | imagenet
    bool relu_after_block3 = false;

    SliceFilterConfig filter;
    int filter_max_scans = 20;

    SegmentationConfig seg;
    int seg_slices_per_scan = 8;
    int seg_max_scans = 20;

    int bootstrap_resamples = 1000;
    std::uint64_t bootstrap_seed = 0;
    bool exclude_absent_classes = false;

    ChannelStats channel_stats() const;
    nlohmann::json to_json() const;
};

struct RunConfig {
    TrainConfig train;
    Settings settings;

    nlohmann::json to_json() const;
};

/// Splits a flat JSON object into pipeline settings and TrainConfig fields.
RunConfig parse_run_config(const nlohmann::json& flat);
RunConfig load_run_config(const std::optional<std::filesystem::path>& path);

// ---------------------------------------------------------------------------
// Preprocessing

/// What turns a scan directory into model inputs. The JSON form is stored in
/// checkpoints so prediction repeats training-time preprocessing exactly.
struct Preprocess {
    Task task = Task::Detect;
    std::int64_t spatial = 224;
    DepthMode depth_mode = DepthMode::Linear;

    nlohmann::json to_json() const;
    static Preprocess from_json(const nlohmann::json& j);
    bool operator==(const Preprocess&) const = default;
};

struct ScanInputs {
    std::string scan_id;
    std::vector<torch::Tensor> inputs;
    std::size_t n_slices = 0;
    std::size_t n_kept = 0;
    bool filter_fallback = false;
};

struct Preprocessor {
    Preprocess preprocess;
    std::shared_ptr<SliceFilterModel> filter;  // optional
    std::shared_ptr<SegmentationModel> seg;    // required for severity
    /// Extra cache-key material (checkpoint digests).
    std::string cache_salt;
    std::optional<std::filesystem::path> cache_dir;

    ScanInputs run(const std::filesystem::path& scan_dir) const;
};

/// Runs the preprocessor over many scans with up to `workers` threads; the
/// output order follows `scan_dirs`.
std::vector<ScanInputs> run_all(const Preprocessor& pre, const std::vector<std::filesystem::path>& scan_dirs, int workers);

/// Cache directory from COV3D_CACHE_DIR, if set and non-empty.
std::optional<std::filesystem::path> cache_dir_from_env();

/// Scan id of a manifest entry (last path component).
std::string scan_id_of(const ManifestEntry& entry);

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code (0 ok, 1 runtime failure);
// usage errors are the CLI layer's job.

struct CommonArgs {
    std::string command_line;
    bool overwrite = false;
    int workers = 1;
};

struct GenArgs {
    CommonArgs common;
    std::filesystem::path out;
    std::optional<std::filesystem::path> config;
    std::optional<std::uint64_t> seed;
};

struct TrainArgs {
    CommonArgs common;
    Task task = Task::Detect;
    std::optional<std::filesystem::path> config;
    std::filesystem::path data;
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;
    std::string variant = "v3";
    int run_index = 0;
    std::optional<std::filesystem::path> filter_checkpoint;
    std::optional<std::filesystem::path> seg_checkpoint;
    std::optional<std::string> backbone;
};

struct PredictArgs {
    CommonArgs common;
    Task task = Task::Detect;
    std::vector<std::filesystem::path> checkpoints;
    std::filesystem::path data;
    std::filesystem::path out;
    std::optional<std::filesystem::path> filter_checkpoint;
    std::optional<std::filesystem::path> seg_checkpoint;
    std::optional<Split> split;
};

struct EvaluateArgs {
    CommonArgs common;
    std::filesystem::path predictions;
    std::filesystem::path data;
    std::optional<std::filesystem::path> out;
    std::optional<std::filesystem::path> config;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_synthetic(const GenArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_predict(const PredictArgs& args, std::ostream& out, std::ostream& err);
int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err);

/// Checkpoint stem naming used by cmd_train.
std::string checkpoint_name(Task task, std::uint64_t seed, const std::string& backbone_or_variant = "", int run_index = 0);
/// Seed of severity grid cell (variant, run_index).
std::uint64_t severity_seed(std::uint64_t seed, int run_index);

// ---------------------------------------------------------------------------

/// Provenance written atomically at the end of each command.
struct RunRecord {
    std::string command;
    nlohmann::json config;
    std::map<std::string, std::string> input_digests;
    std::vector<std::string> outputs;
    std::string started;
    std::string finished;

    nlohmann::json to_json() const;
    void write(const std::filesystem::path& path) const;
};

std::string utc_timestamp();

}  // namespace cov3d::pipeline
