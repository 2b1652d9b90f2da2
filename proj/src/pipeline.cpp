#include "cov3d/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <iostream>
#include <mutex>
#include <thread>

#include "cov3d/ensemble_eval.hpp"
#include "cov3d/io.hpp"

namespace cov3d::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Task task) {
    switch (task) {
        case Task::Filter: return "filter";
        case Task::Seg: return "seg";
        case Task::Detect: return "detect";
        case Task::Severity: return "severity";
    }
    return "?";
}

Task parse_task(std::string_view token) {
    if (token == "filter") return Task::Filter;
    if (token == "seg") return Task::Seg;
    if (token == "detect") return Task::Detect;
    if (token == "severity") return Task::Severity;
    throw Error("cli", "unknown task '" + std::string(token) + "' (expected filter, seg, detect or severity)");
}

ChannelStats Settings::channel_stats() const {
    if (normalization == "identity") return ChannelStats::identity();
    if (normalization == "imagenet") return ChannelStats::imagenet();
    throw Error("config", "unknown normalization '" + normalization + "'");
}

json Settings::to_json() const {
    json j{{"backbone_tier", backbone_tier},
           {"spatial_size", spatial_size},
           {"severity_spatial_size", severity_spatial_size},
           {"depth_mode", depth_mode == DepthMode::Linear ? "linear" : "subsample"},
           {"normalization", normalization},
           {"relu_after_block3", relu_after_block3},
           {"filter_backbone", nn::to_string(filter.backbone)},
           {"filter_input_size", filter.input_size},
           {"filter_threshold", filter.threshold},
           {"filter_max_scans", filter_max_scans},
           {"seg_depth", seg.depth},
           {"seg_base_channels", seg.base_channels},
           {"seg_threshold", seg.threshold},
           {"seg_auto_pad", seg.auto_pad},
           {"seg_holdout_fraction", seg.holdout_fraction},
           {"seg_slices_per_scan", seg_slices_per_scan},
           {"seg_max_scans", seg_max_scans},
           {"bootstrap_resamples", bootstrap_resamples},
           {"bootstrap_seed", bootstrap_seed},
           {"exclude_absent_classes", exclude_absent_classes}};
    j["detect_backbone"] = detect_backbone ? json(*detect_backbone) : json();
    return j;
}

json RunConfig::to_json() const {
    json j = train.to_json();
    const json s = settings.to_json();
    for (const auto& [k, v] : s.items()) j[k] = v;
    return j;
}

RunConfig parse_run_config(const json& flat) {
    if (!flat.is_object()) throw Error("config", "run config must be a JSON object");
    RunConfig rc;
    json train = json::object();
    Settings& s = rc.settings;
    try {
        for (const auto& [key, v] : flat.items()) {
            if (key == "backbone_tier") s.backbone_tier = v.get<std::string>();
            else if (key == "detect_backbone") {
                if (v.is_null()) s.detect_backbone.reset();
                else s.detect_backbone = v.get<std::string>();
            } else if (key == "spatial_size") s.spatial_size = v.get<std::int64_t>();
            else if (key == "severity_spatial_size") s.severity_spatial_size = v.get<std::int64_t>();
            else if (key == "depth_mode") s.depth_mode = parse_depth_mode(v.get<std::string>());
            else if (key == "normalization") s.normalization = v.get<std::string>();
            else if (key == "relu_after_block3") s.relu_after_block3 = v.get<bool>();
            else if (key == "filter_backbone") s.filter.backbone = nn::parse_backbone(v.get<std::string>());
            else if (key == "filter_input_size") s.filter.input_size = v.get<std::int64_t>();
            else if (key == "filter_threshold") s.filter.threshold = v.get<double>();
            else if (key == "filter_max_scans") s.filter_max_scans = v.get<int>();
            else if (key == "seg_depth") s.seg.depth = v.get<int>();
            else if (key == "seg_base_channels") s.seg.base_channels = v.get<int>();
            else if (key == "seg_threshold") s.seg.threshold = v.get<double>();
            else if (key == "seg_auto_pad") s.seg.auto_pad = v.get<bool>();
            else if (key == "seg_holdout_fraction") s.seg.holdout_fraction = v.get<double>();
            else if (key == "seg_slices_per_scan") s.seg_slices_per_scan = v.get<int>();
            else if (key == "seg_max_scans") s.seg_max_scans = v.get<int>();
            else if (key == "bootstrap_resamples") s.bootstrap_resamples = v.get<int>();
            else if (key == "bootstrap_seed") s.bootstrap_seed = v.get<std::uint64_t>();
            else if (key == "exclude_absent_classes") s.exclude_absent_classes = v.get<bool>();
            else train[key] = v;
        }
    } catch (const json::exception& e) {
        throw Error("config", e.what());
    }
    if (s.backbone_tier != "toy" && s.backbone_tier != "full")
        throw Error("config", "backbone_tier must be 'toy' or 'full'");
    if (s.spatial_size < 1 || s.severity_spatial_size < 1) throw Error("config", "spatial sizes must be >= 1");
    if (s.filter_max_scans < 1 || s.seg_max_scans < 1 || s.seg_slices_per_scan < 1)
        throw Error("config", "scan and slice limits must be >= 1");
    if (s.bootstrap_resamples < 2) throw Error("config", "bootstrap_resamples must be >= 2");
    s.channel_stats();
    s.filter.validate();
    s.seg.validate();
    rc.train = TrainConfig::from_json(train);
    return rc;
}

RunConfig load_run_config(const std::optional<fs::path>& path) {
    if (!path) return parse_run_config(json::object());
    json j;
    try {
        j = json::parse(io::read_text(*path));
    } catch (const json::parse_error& e) {
        throw Error("config", "'" + path->string() + "': " + e.what());
    }
    return parse_run_config(j);
}

// ---------------------------------------------------------------------------

json Preprocess::to_json() const {
    return {{"task", pipeline::to_string(task)},
            {"spatial", spatial},
            {"depth_mode", depth_mode == DepthMode::Linear ? "linear" : "subsample"},
            {"depths", task == Task::Severity ? json{kSeverityCoarseDepth, kSeverityFineDepth} : json{kDetectionDepth}}};
}

Preprocess Preprocess::from_json(const json& j) {
    try {
        Preprocess p;
        p.task = parse_task(j.at("task").get<std::string>());
        p.spatial = j.at("spatial").get<std::int64_t>();
        p.depth_mode = parse_depth_mode(j.at("depth_mode").get<std::string>());
        return p;
    } catch (const json::exception& e) {
        throw Error("checkpoint", std::string("malformed preprocess block: ") + e.what());
    }
}

std::optional<fs::path> cache_dir_from_env() {
    const char* v = std::getenv("COV3D_CACHE_DIR");
    if (!v || !*v) return std::nullopt;
    return fs::path(v);
}

std::string scan_id_of(const ManifestEntry& entry) {
    fs::path p(entry.scan_path);
    if (p.filename().empty()) p = p.parent_path();
    return p.filename().string();
}

namespace {

std::vector<Image> kept_images(const std::vector<Image>& slices, const FilterResult& r) {
    std::vector<Image> out;
    out.reserve(r.kept.size());
    for (auto i : r.kept) out.push_back(slices[i]);
    return out;
}

}  // namespace

ScanInputs Preprocessor::run(const fs::path& scan_dir) const {
    if (preprocess.task == Task::Severity && !seg) throw Error("preprocess", "segmentation model required");
    CTScan scan = load_scan(scan_dir, LoadScanOptions{false});
    ScanInputs out;
    out.scan_id = scan.scan_id;
    out.n_slices = scan.n_slices();

    std::optional<fs::path> stem;
    if (cache_dir) {
        std::string key = preprocess.to_json().dump() + "|" + cache_salt;
        for (const auto& p : scan.slice_paths) key += "|" + p.filename().string() + ":" + digest::sha256_file(p);
        stem = *cache_dir / (scan.scan_id + "-" + digest::sha256_hex(key).substr(0, 24));
        const fs::path info = stem->string() + ".info.json";
        if (fs::exists(info)) {
            const json j = json::parse(io::read_text(info));
            out.n_kept = j.at("n_kept").get<std::size_t>();
            out.filter_fallback = j.at("fallback").get<bool>();
            if (preprocess.task == Task::Severity) {
                out.inputs.push_back(nn::to_tensor(read_volume_cache(stem->string() + ".coarse")));
                out.inputs.push_back(nn::to_tensor(read_volume_cache(stem->string() + ".fine")));
            } else {
                out.inputs.push_back(nn::to_tensor(read_volume_cache(*stem)));
            }
            return out;
        }
    }

    const std::vector<Image> slices = read_slices(scan);
    FilterResult kept;
    if (filter) {
        kept = filter_slices(slices, *filter, filter->config().threshold);
    } else {
        for (std::size_t i = 0; i < slices.size(); ++i) kept.kept.push_back(i);
    }
    out.n_kept = kept.kept.size();
    out.filter_fallback = kept.fallback;
    std::vector<Image> images = kept_images(slices, kept);

    if (preprocess.task == Task::Severity) {
        // Mask at native resolution, then resize.
        const auto masks = segment_lungs(images, *seg);
        for (std::size_t i = 0; i < images.size(); ++i) images[i] = apply_mask(images[i], masks[i]);
        DualVolume dual = assemble_dual(images, preprocess.spatial, preprocess.depth_mode);
        dual.coarse.provenance.scan_id = dual.fine_depth.provenance.scan_id = scan.scan_id;
        if (stem) {
            fs::create_directories(*cache_dir);
            write_volume_cache(stem->string() + ".coarse", dual.coarse);
            write_volume_cache(stem->string() + ".fine", dual.fine_depth);
        }
        out.inputs.push_back(nn::to_tensor(dual.coarse));
        out.inputs.push_back(nn::to_tensor(dual.fine_depth));
    } else {
        VolumeTensor v = assemble_volume(images, {kDetectionDepth, preprocess.spatial, preprocess.spatial}, preprocess.depth_mode);
        v.provenance.scan_id = scan.scan_id;
        if (stem) {
            fs::create_directories(*cache_dir);
            write_volume_cache(*stem, v);
        }
        out.inputs.push_back(nn::to_tensor(v));
    }
    if (stem)
        io::write_text_atomic(stem->string() + ".info.json",
                              json{{"n_kept", out.n_kept}, {"fallback", out.filter_fallback}}.dump() + "\n");
    return out;
}

std::vector<ScanInputs> run_all(const Preprocessor& pre, const std::vector<fs::path>& scan_dirs, int workers) {
    std::vector<ScanInputs> out(scan_dirs.size());
    std::vector<std::exception_ptr> errors(scan_dirs.size());
    const auto n_threads = static_cast<std::size_t>(std::max(1, workers));
    if (n_threads == 1) {
        for (std::size_t i = 0; i < scan_dirs.size(); ++i) out[i] = pre.run(scan_dirs[i]);
        return out;
    }
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < scan_dirs.size(); i = next++) {
            try {
                out[i] = pre.run(scan_dirs[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < std::min(n_threads, scan_dirs.size()); ++t) threads.emplace_back(work);
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---------------------------------------------------------------------------

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json RunRecord::to_json() const {
    return {{"command", command}, {"config", config},     {"input_digests", input_digests},
            {"outputs", outputs}, {"started", started}, {"finished", finished}};
}

void RunRecord::write(const fs::path& path) const { io::write_text_atomic(path, to_json().dump(2) + "\n"); }

std::string checkpoint_name(Task task, std::uint64_t seed, const std::string& tag, int run_index) {
    switch (task) {
        case Task::Filter: return "filter_seed" + std::to_string(seed);
        case Task::Seg: return "seg_seed" + std::to_string(seed);
        case Task::Detect: return "detect_" + tag + "_seed" + std::to_string(seed);
        case Task::Severity: return "severity_" + tag + "_run" + std::to_string(run_index);
    }
    return "checkpoint";
}

std::uint64_t severity_seed(std::uint64_t seed, int run_index) {
    return seed + 1000u * static_cast<std::uint64_t>(run_index);
}

namespace {

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::string file_digest_or_empty(const fs::path& p) { return fs::exists(p) ? digest::sha256_file(p) : std::string(); }

std::vector<fs::path> scan_dirs_of(const Manifest& m, const std::vector<ManifestEntry>& entries) {
    std::vector<fs::path> out;
    for (const auto& e : entries) out.push_back(m.resolve(e));
    return out;
}

std::shared_ptr<SegmentationModel> load_seg_ptr(const fs::path& path) {
    return std::make_shared<SegmentationModel>(load_segmenter(checkpoint_stem(path)));
}

/// Runs `body`, mapping exceptions to exit code 1 with the message on `err`.
template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
    } catch (const c10::Error& e) {
        err << "error: [torch] " << e.what_without_backtrace() << "\n";
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
    }
    return 1;
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_gen_synthetic(const GenArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const std::string started = utc_timestamp();
        SyntheticSpec spec;
        if (args.config) {
            try {
                spec = SyntheticSpec::from_json(json::parse(io::read_text(*args.config)));
            } catch (const json::exception& e) {
                throw Error("gen_synthetic", "'" + args.config->string() + "': " + e.what());
            }
        }
        if (args.seed) spec.seed = *args.seed;
        spec.validate();

        const fs::path manifest_path = args.out / "manifest.csv";
        if (fs::exists(manifest_path) && !args.common.overwrite) {
            out << "skipped: " << manifest_path.string() << " exists\n";
            return 0;
        }
        if (args.common.overwrite && fs::exists(args.out)) {
            // Only clear what an earlier run could have written.
            for (const auto& e : fs::directory_iterator(args.out)) {
                const auto name = e.path().filename().string();
                if (name.rfind("scan_", 0) == 0 || name == "manifest.csv") fs::remove_all(e.path());
            }
        }
        generate_synthetic_dataset(spec, args.out);

        RunRecord rec;
        rec.command = args.common.command_line;
        rec.config = spec.to_json();
        if (args.config) rec.input_digests["config"] = digest::sha256_file(*args.config);
        rec.outputs = {manifest_path.string()};
        rec.input_digests["dataset"] = digest::sha256_tree(args.out);
        rec.started = started;
        rec.finished = utc_timestamp();
        fs::path dir = fs::absolute(args.out).lexically_normal();
        if (dir.filename().empty()) dir = dir.parent_path();
        rec.write(dir.parent_path() / (dir.filename().string() + ".run.json"));

        out << manifest_path.string() << "\n";
        return 0;
    });
}

namespace {

void log_epoch(std::ostream& err, int total, const HistoryRow& r) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %d/%d loss %.6f lr %.3g train %.2f", r.epoch + 1, total, r.loss, r.lr,
                  r.train_metric);
    err << buf;
    if (r.val_metric) {
        std::snprintf(buf, sizeof buf, " val %.2f", *r.val_metric);
        err << buf;
    }
    err << "\n";
}

int label_for(Task task, const ManifestEntry& e) {
    if (task == Task::Severity) {
        if (!e.severity_label) throw Error("train", "scan '" + e.scan_path + "' has no severity label");
        return e.severity_label->class_index();
    }
    if (!e.detection_label) throw Error("train", "scan '" + e.scan_path + "' has no covid label");
    return static_cast<int>(*e.detection_label);
}

std::vector<ManifestEntry> labeled_entries(Task task, const Manifest& m, Split split) {
    std::vector<ManifestEntry> out;
    for (const auto& e : m.entries_in(split)) {
        if (task == Task::Severity ? e.severity_label.has_value() : e.detection_label.has_value()) out.push_back(e);
    }
    return out;
}

std::vector<Sample> to_samples(const std::vector<ScanInputs>& inputs, const std::vector<ManifestEntry>& entries, Task task) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back({inputs[i].inputs, label_for(task, entries[i])});
    return out;
}

int train_filter(const TrainArgs& args, const RunConfig& rc, const Manifest& manifest, RunRecord& rec, std::ostream& out,
                 std::ostream& err) {
    const fs::path stem = args.out / checkpoint_name(Task::Filter, rc.train.seed);
    if (checkpoint_exists(stem) && !args.common.overwrite) {
        out << "skipped: " << stem.string() << ".pt exists\n";
        return 0;
    }
    const auto entries = manifest.entries_in(Split::Train);
    std::vector<LabeledSlice> slices;
    std::size_t used = 0;
    for (const auto& e : entries) {
        if (used == static_cast<std::size_t>(rc.settings.filter_max_scans)) break;
        auto part = labeled_slices_for(manifest.resolve(e));
        slices.insert(slices.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        ++used;
    }
    auto trained = train_slice_filter(slices, rc.train, rc.settings.filter);

    // Recall of lung slices on the training scans, for the record.
    std::vector<Image> images;
    for (const auto& s : slices) images.push_back(s.image);
    const auto probs = trained.model->lung_probabilities(images);
    std::size_t tp = 0, pos = 0, correct = 0;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const bool kept = probs[i] >= rc.settings.filter.threshold;
        pos += slices[i].is_lung;
        tp += slices[i].is_lung && kept;
        correct += kept == slices[i].is_lung;
    }
    trained.meta.extras["train_accuracy"] = static_cast<double>(correct) / static_cast<double>(slices.size());
    trained.meta.extras["train_recall"] = pos ? static_cast<double>(tp) / static_cast<double>(pos) : 1.0;
    trained.meta.extras["n_scans"] = used;
    trained.meta.extras["n_slices"] = slices.size();
    trained.meta.set_config(rc.to_json());
    save_slice_filter(trained, stem);
    io::write_text_atomic(sibling(stem, ".history.csv"), trained.history.to_csv());
    rec.outputs = {stem.string() + ".pt", stem.string() + ".json", stem.string() + ".history.csv"};
    rec.started = rec.started.empty() ? utc_timestamp() : rec.started;
    rec.finished = utc_timestamp();
    rec.write(sibling(stem, ".run.json"));
    (void)err;
    out << stem.string() << ".pt\n";
    return 0;
}

int train_seg(const TrainArgs& args, const RunConfig& rc, const Manifest& manifest, RunRecord& rec, std::ostream& out,
              std::ostream& err) {
    const fs::path stem = args.out / checkpoint_name(Task::Seg, rc.train.seed);
    if (checkpoint_exists(stem) && !args.common.overwrite) {
        out << "skipped: " << stem.string() << ".pt exists\n";
        return 0;
    }
    std::vector<MaskPair> pairs;
    std::size_t used = 0;
    for (const auto& e : manifest.entries_in(Split::Train)) {
        if (used == static_cast<std::size_t>(rc.settings.seg_max_scans)) break;
        const fs::path dir = manifest.resolve(e);
        const CTScan scan = load_scan(dir);
        const auto n = scan.n_slices();
        const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(rc.settings.seg_slices_per_scan));
        for (std::size_t j = 0; j < k; ++j) {
            // Evenly spaced, endpoint-free picks.
            const std::size_t pos = (2 * j + 1) * n / (2 * k);
            const fs::path mask_path = masks_dir_for(dir) / (std::to_string(scan.slice_indices[pos]) + ".png");
            if (!fs::exists(mask_path))
                throw Error("train_seg", "missing ground-truth mask '" + mask_path.string() + "'");
            pairs.push_back({scan.slices[pos], io::read_png_mask(mask_path)});
        }
        ++used;
    }
    auto trained = train_segmenter(pairs, rc.train, rc.settings.seg);
    trained.meta.set_config(rc.to_json());
    trained.meta.extras["n_scans"] = used;
    trained.meta.extras["n_pairs"] = pairs.size();
    save_segmenter(trained, stem);
    io::write_text_atomic(sibling(stem, ".history.csv"), trained.history.to_csv());
    rec.outputs = {stem.string() + ".pt", stem.string() + ".json", stem.string() + ".history.csv"};
    rec.finished = utc_timestamp();
    rec.write(sibling(stem, ".run.json"));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", trained.heldout_dice);
    err << "dice " << buf << " over " << trained.meta.extras["n_dice_pairs"].get<std::size_t>() << " "
        << trained.meta.extras["dice_split"].get<std::string>() << " pairs\n";
    out << stem.string() << ".pt\n";
    return 0;
}

int train_classifier(const TrainArgs& args, RunConfig rc, const Manifest& manifest, RunRecord& rec, std::ostream& out,
                     std::ostream& err) {
    const Task task = args.task;
    const bool toy = rc.settings.backbone_tier == "toy";
    std::string tag;
    nn::BackboneKind backbone;
    if (task == Task::Detect) {
        const std::string name = args.backbone.value_or(
            rc.settings.detect_backbone.value_or(toy ? nn::to_string(nn::BackboneKind::ToyDense)
                                                     : nn::to_string(nn::BackboneKind::DenseNet161)));
        backbone = nn::parse_backbone(name);
        tag = nn::to_string(backbone);
    } else {
        const auto variant = nn::parse_inception_variant(args.variant);
        backbone = args.backbone ? nn::parse_backbone(*args.backbone) : nn::backbone_for(variant, toy);
        tag = nn::to_string(variant);
        if (args.run_index < 0) throw Error("train", "run index must be >= 0");
        rc.train.seed = severity_seed(rc.train.seed, args.run_index);
    }
    const fs::path stem = args.out / checkpoint_name(task, rc.train.seed, tag, args.run_index);
    if (checkpoint_exists(stem) && !args.common.overwrite) {
        out << "skipped: " << stem.string() << ".pt exists\n";
        return 0;
    }

    Preprocessor pre;
    pre.preprocess.task = task;
    pre.preprocess.spatial = task == Task::Detect ? rc.settings.spatial_size : rc.settings.severity_spatial_size;
    pre.preprocess.depth_mode = rc.settings.depth_mode;
    pre.cache_dir = cache_dir_from_env();
    if (args.filter_checkpoint) {
        pre.filter = load_slice_filter(checkpoint_stem(*args.filter_checkpoint));
        pre.cache_salt += "filter:" + digest::sha256_file(sibling(checkpoint_stem(*args.filter_checkpoint), ".pt"));
        rec.input_digests["filter_checkpoint"] = digest::sha256_file(sibling(checkpoint_stem(*args.filter_checkpoint), ".pt"));
    } else {
        err << "warning: no --filter-checkpoint given; every slice is kept\n";
    }
    if (task == Task::Severity) {
        if (!args.seg_checkpoint) throw Error("train", "segmentation model required (--seg-checkpoint)");
        pre.seg = load_seg_ptr(*args.seg_checkpoint);
        pre.cache_salt += "seg:" + digest::sha256_file(sibling(checkpoint_stem(*args.seg_checkpoint), ".pt"));
        rec.input_digests["seg_checkpoint"] = digest::sha256_file(sibling(checkpoint_stem(*args.seg_checkpoint), ".pt"));
    }

    const auto train_entries = labeled_entries(task, manifest, Split::Train);
    const auto val_entries = labeled_entries(task, manifest, Split::Val);
    if (train_entries.empty()) throw Error("train", "no labeled training scans in the manifest");
    Dataset data;
    data.train = to_samples(run_all(pre, scan_dirs_of(manifest, train_entries), args.common.workers), train_entries, task);
    data.val = to_samples(run_all(pre, scan_dirs_of(manifest, val_entries), args.common.workers), val_entries, task);

    json arch;
    const auto stats = rc.settings.channel_stats();
    const json norm{{"mean", stats.mean}, {"std", stats.std}};
    if (task == Task::Detect)
        arch = {{"kind", "detection"}, {"backbone", nn::to_string(backbone)}, {"blocks", {{kDetectionDepth, 3}}},
                {"num_classes", 2}, {"normalization", norm}};
    else
        arch = {{"kind", "severity"}, {"backbone", nn::to_string(backbone)},
                {"blocks", {{kSeverityCoarseDepth, 3}, {kSeverityFineDepth, 3}, {6, 3}}},
                {"relu_after_block3", rc.settings.relu_after_block3}, {"num_classes", 4}, {"normalization", norm}};
    auto model = nn::make_classifier(arch, rc.train.seed);
    const TrainOutcome outcome =
        train_model(*model, data, rc.train, [&](const HistoryRow& r) { log_epoch(err, rc.train.epochs, r); });

    CheckpointMeta meta;
    meta.architecture = model->architecture();
    meta.task = to_string(task);
    meta.seed = rc.train.seed;
    meta.epoch = outcome.selected_epoch;
    meta.set_config(rc.to_json());
    meta.final_loss = outcome.final_loss;
    meta.extras["preprocess"] = pre.preprocess.to_json();
    meta.extras["n_train"] = data.train.size();
    meta.extras["n_val"] = data.val.size();
    if (!outcome.history.rows.empty()) meta.extras["train_macro_f1"] = outcome.history.rows.back().train_metric;
    if (task == Task::Severity) {
        meta.extras["variant"] = args.variant;
        meta.extras["run_index"] = args.run_index;
    }
    save_checkpoint(*model, meta, stem);
    io::write_text_atomic(sibling(stem, ".history.csv"), outcome.history.to_csv());
    rec.config = rc.to_json();
    rec.outputs = {stem.string() + ".pt", stem.string() + ".json", stem.string() + ".history.csv"};
    rec.finished = utc_timestamp();
    rec.write(sibling(stem, ".run.json"));
    out << stem.string() << ".pt\n";
    return 0;
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunRecord rec;
        rec.started = utc_timestamp();
        rec.command = args.common.command_line;
        RunConfig rc = load_run_config(args.config);
        if (args.seed) rc.train.seed = *args.seed;
        rec.config = rc.to_json();
        if (args.config) rec.input_digests["config"] = digest::sha256_file(*args.config);
        rec.input_digests["manifest"] = file_digest_or_empty(args.data);
        const Manifest manifest = load_manifest(args.data);
        fs::create_directories(args.out);
        switch (args.task) {
            case Task::Filter: return train_filter(args, rc, manifest, rec, out, err);
            case Task::Seg: return train_seg(args, rc, manifest, rec, out, err);
            default: return train_classifier(args, rc, manifest, rec, out, err);
        }
    });
}

int cmd_predict(const PredictArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunRecord rec;
        rec.started = utc_timestamp();
        rec.command = args.common.command_line;
        if (args.task != Task::Detect && args.task != Task::Severity)
            throw Error("predict", "predict supports the detect and severity tasks");
        if (args.checkpoints.empty()) throw Error("predict", "at least one --checkpoint is required");
        if (fs::exists(args.out) && !args.common.overwrite) {
            out << "skipped: " << args.out.string() << " exists\n";
            return 0;
        }
        const std::int64_t k = args.task == Task::Detect ? 2 : 4;

        std::vector<LoadedClassifier> models;
        std::vector<std::string> names;
        std::optional<Preprocess> pp;
        for (const auto& c : args.checkpoints) {
            const fs::path stem = checkpoint_stem(c);
            const CheckpointMeta meta = read_checkpoint_meta(stem);
            if (meta.task != to_string(args.task))
                throw Error("predict", "checkpoint/task mismatch: '" + stem.string() + "' is a " + meta.task +
                                           " checkpoint, not " + to_string(args.task));
            LoadedClassifier lc = load_classifier(stem);
            if (lc.model->num_classes() != k)
                throw Error("predict", "checkpoint/task mismatch: '" + stem.string() + "' has " +
                                           std::to_string(lc.model->num_classes()) + " classes, expected " +
                                           std::to_string(k));
            const Preprocess p = Preprocess::from_json(meta.extras.at("preprocess"));
            if (pp && !(*pp == p))
                throw Error("predict", "checkpoint '" + stem.string() + "' was trained with different preprocessing");
            pp = p;
            rec.input_digests["checkpoint:" + stem.filename().string()] = digest::sha256_file(sibling(stem, ".pt"));
            names.push_back(stem.filename().string());
            models.push_back(std::move(lc));
        }

        Preprocessor pre;
        pre.preprocess = *pp;
        pre.cache_dir = cache_dir_from_env();
        if (args.task == Task::Severity) {
            if (!args.seg_checkpoint) throw Error("predict", "segmentation model required");
            pre.seg = load_seg_ptr(*args.seg_checkpoint);
            const auto d = digest::sha256_file(sibling(checkpoint_stem(*args.seg_checkpoint), ".pt"));
            pre.cache_salt += "seg:" + d;
            rec.input_digests["seg_checkpoint"] = d;
        }
        if (args.filter_checkpoint) {
            pre.filter = load_slice_filter(checkpoint_stem(*args.filter_checkpoint));
            const auto d = digest::sha256_file(sibling(checkpoint_stem(*args.filter_checkpoint), ".pt"));
            pre.cache_salt += "filter:" + d;
            rec.input_digests["filter_checkpoint"] = d;
        } else {
            err << "warning: no --filter-checkpoint given; every slice is kept\n";
        }

        rec.input_digests["manifest"] = file_digest_or_empty(args.data);
        const Manifest manifest = load_manifest(args.data);
        std::vector<ManifestEntry> entries;
        for (const auto& e : manifest.entries())
            if (!args.split || e.split == *args.split) entries.push_back(e);
        if (entries.empty()) throw Error("predict", "no scans selected from the manifest");

        const auto inputs = run_all(pre, scan_dirs_of(manifest, entries), args.common.workers);
        std::vector<Sample> samples;
        for (const auto& in : inputs) samples.push_back({in.inputs, 0});
        std::size_t fallbacks = 0;
        for (const auto& in : inputs) fallbacks += in.filter_fallback;
        if (fallbacks) err << "warning: filter kept no slices for " << fallbacks << " scan(s); all slices used\n";

        std::vector<std::vector<std::vector<double>>> member_probs;
        for (auto& m : models) member_probs.push_back(predict_probabilities(*m.model, samples));

        PredictionTable table;
        table.num_classes = static_cast<int>(k);
        table.num_members = models.size();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            PredictionRow row;
            row.scan_id = inputs[i].scan_id;
            for (std::size_t m = 0; m < models.size(); ++m) row.members.emplace_back(member_probs[m][i]);
            row.ensemble = ensemble_average(row.members);
            row.pred = predict_label(row.ensemble);
            const auto& e = entries[i];
            if (args.task == Task::Detect && e.detection_label) row.label = static_cast<int>(*e.detection_label);
            if (args.task == Task::Severity && e.severity_label) row.label = e.severity_label->class_index();
            table.rows.push_back(std::move(row));
        }
        if (args.out.has_parent_path()) fs::create_directories(args.out.parent_path());
        write_predictions_csv(table, args.out);
        io::write_text_atomic(sibling(args.out, ".members.json"), json{{"members", names}}.dump(2) + "\n");
        rec.outputs = {args.out.string(), args.out.string() + ".members.json"};
        rec.config = {{"task", to_string(args.task)}, {"preprocess", pp->to_json()}, {"workers", args.common.workers}};
        rec.finished = utc_timestamp();
        rec.write(sibling(args.out, ".run.json"));
        out << args.out.string() << "\n";
        return 0;
    });
}

int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunRecord rec;
        rec.started = utc_timestamp();
        rec.command = args.common.command_line;
        const RunConfig rc = load_run_config(args.config);
        const fs::path report_path = args.out.value_or(args.predictions.parent_path() / "report.json");
        if (fs::exists(report_path) && !args.common.overwrite) {
            out << "skipped: " << report_path.string() << " exists\n";
            return 0;
        }
        const PredictionTable table = read_predictions_csv(args.predictions);
        const Manifest manifest = load_manifest(args.data);
        rec.input_digests["predictions"] = digest::sha256_file(args.predictions);
        rec.input_digests["manifest"] = digest::sha256_file(args.data);

        std::map<std::string, const ManifestEntry*> by_id;
        for (const auto& e : manifest.entries()) by_id[scan_id_of(e)] = &e;
        std::vector<int> truth, ens;
        std::vector<std::vector<int>> member_preds(table.num_members);
        for (const auto& row : table.rows) {
            const auto it = by_id.find(row.scan_id);
            if (it == by_id.end()) throw Error("evaluate", "scan '" + row.scan_id + "' is not in the manifest");
            const ManifestEntry& e = *it->second;
            int label;
            if (table.num_classes == 4) {
                if (!e.severity_label) throw Error("evaluate", "scan '" + row.scan_id + "' has no severity label");
                label = e.severity_label->class_index();
            } else {
                if (!e.detection_label) throw Error("evaluate", "scan '" + row.scan_id + "' has no covid label");
                label = static_cast<int>(*e.detection_label);
            }
            truth.push_back(label);
            ens.push_back(row.pred);
            for (std::size_t m = 0; m < table.num_members; ++m) member_preds[m].push_back(predict_label(row.members[m]));
        }

        const std::uint64_t seed = args.seed.value_or(rc.settings.bootstrap_seed);
        F1Options opts;
        opts.exclude_absent_classes = rc.settings.exclude_absent_classes;
        EvalReport report = evaluate(ens, truth, table.num_classes, rc.settings.bootstrap_resamples, seed, opts);

        std::vector<std::string> names;
        const fs::path members_file = sibling(args.predictions, ".members.json");
        if (fs::exists(members_file)) names = json::parse(io::read_text(members_file)).at("members").get<std::vector<std::string>>();
        if (names.size() != table.num_members) {
            names.clear();
            for (std::size_t m = 0; m < table.num_members; ++m) names.push_back("m" + std::to_string(m));
        }
        std::vector<double> scores;
        for (std::size_t m = 0; m < table.num_members; ++m) {
            const EvalReport r = evaluate(member_preds[m], truth, table.num_classes, rc.settings.bootstrap_resamples, seed, opts);
            report.members.push_back({names[m], r.macro_f1, r.per_class_f1, r.ci_halfwidth});
            scores.push_back(r.macro_f1);
        }
        if (scores.size() >= 2) {
            double mean = 0.0;
            for (double s : scores) mean += s;
            mean /= static_cast<double>(scores.size());
            double ss = 0.0;
            for (double s : scores) ss += (s - mean) * (s - mean);
            report.member_spread = std::sqrt(ss / static_cast<double>(scores.size() - 1));
        }

        if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
        io::write_text_atomic(report_path, report.to_json().dump(2) + "\n");
        rec.config = rc.to_json();
        rec.outputs = {report_path.string()};
        rec.finished = utc_timestamp();
        rec.write(sibling(report_path, ".run.json"));
        out << format_report_table(report);
        out << "report: " << report_path.string() << "\n";
        return 0;
    });
}

}  // namespace cov3d::pipeline
