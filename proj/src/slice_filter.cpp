#include "cov3d/slice_filter.hpp"

#include <cstring>

#include "cov3d/io.hpp"
#include "cov3d/volume_assembly.hpp"

namespace cov3d {

using torch::Tensor;

void SliceFilterConfig::validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("slice_filter", "threshold must lie strictly inside (0,1)");
    if (input_size < 1) throw Error("slice_filter", "input_size must be >= 1");
}

nlohmann::json SliceFilterConfig::to_json() const {
    return {{"backbone", nn::to_string(backbone)}, {"input_size", input_size}, {"threshold", threshold}};
}

SliceFilterConfig SliceFilterConfig::from_json(const nlohmann::json& j) {
    SliceFilterConfig c;
    c.backbone = nn::parse_backbone(j.value("backbone", nn::to_string(c.backbone)));
    c.input_size = j.value("input_size", c.input_size);
    c.threshold = j.value("threshold", c.threshold);
    c.validate();
    return c;
}

Tensor slice_input(const Image& slice, std::int64_t size) {
    const Image r = resize_bilinear(slice, size, size);
    return torch::from_blob(const_cast<float*>(r.pixels.data()), {1, size, size}, torch::kFloat32).clone();
}

SliceFilterModel::SliceFilterModel(std::shared_ptr<nn::Classifier> model, SliceFilterConfig config)
    : model_(std::move(model)), config_(config) {
    config_.validate();
    if (model_->num_classes() != 2) throw Error("slice_filter", "filter head must have exactly 2 logits");
    model_->eval();
}

std::vector<double> SliceFilterModel::lung_probabilities(std::span<const Image> slices) {
    std::vector<double> out;
    out.reserve(slices.size());
    torch::NoGradGuard guard;
    constexpr std::size_t kChunk = 32;
    for (std::size_t s = 0; s < slices.size(); s += kChunk) {
        std::vector<Tensor> batch;
        for (std::size_t i = s; i < std::min(slices.size(), s + kChunk); ++i)
            batch.push_back(slice_input(slices[i], config_.input_size));
        const Tensor p = torch::softmax(model_->forward_inputs({torch::stack(batch)}).to(torch::kFloat64), 1);
        const Tensor lung = p.select(1, 1).contiguous();
        const double* d = lung.data_ptr<double>();
        out.insert(out.end(), d, d + lung.numel());
    }
    return out;
}

FilterResult select_slices(std::span<const double> lung_probs, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("filter_slices", "threshold must lie strictly inside (0,1)");
    FilterResult r;
    for (std::size_t i = 0; i < lung_probs.size(); ++i)
        if (lung_probs[i] >= threshold) r.kept.push_back(i);
    if (r.kept.empty()) {
        r.fallback = true;
        for (std::size_t i = 0; i < lung_probs.size(); ++i) r.kept.push_back(i);
    }
    return r;
}

FilterResult filter_slices(std::span<const Image> slices, SliceScorer& scorer, double threshold) {
    if (slices.empty()) throw Error("filter_slices", "scan has no slices");
    const auto probs = scorer.lung_probabilities(slices);
    if (probs.size() != slices.size()) throw Error("filter_slices", "scorer returned the wrong number of probabilities");
    return select_slices(probs, threshold);
}

FilterResult filter_slices(const CTScan& scan, SliceScorer& scorer, double threshold) {
    const auto slices = read_slices(scan);
    return filter_slices(slices, scorer, threshold);
}

SliceFilterTrained train_slice_filter(const std::vector<LabeledSlice>& train_set, const TrainConfig& config,
                                      const SliceFilterConfig& filter_config) {
    filter_config.validate();
    if (train_set.empty()) throw Error("train_slice_filter", "empty dataset");
    std::size_t lung = 0;
    for (const auto& s : train_set) lung += s.is_lung ? 1 : 0;
    if (lung == 0 || lung == train_set.size()) throw Error("train_slice_filter", "single-class training set");

    Dataset data;
    for (const auto& s : train_set) data.train.push_back({{slice_input(s.image, filter_config.input_size)}, s.is_lung ? 1 : 0});

    const nlohmann::json arch{{"kind", "image"},
                              {"backbone", nn::to_string(filter_config.backbone)},
                              {"in_channels", 1},
                              {"num_classes", 2}};
    auto model = nn::make_classifier(arch, config.seed);
    const TrainOutcome outcome = train_model(*model, data, config);

    SliceFilterTrained out;
    out.history = outcome.history;
    out.meta.architecture = model->architecture();
    out.meta.task = "filter";
    out.meta.seed = config.seed;
    out.meta.epoch = outcome.selected_epoch;
    out.meta.set_config(config.to_json());
    out.meta.final_loss = outcome.final_loss;
    out.meta.extras["filter"] = filter_config.to_json();
    out.meta.extras["epochs_run"] = static_cast<int>(outcome.history.rows.size());
    out.model = std::make_shared<SliceFilterModel>(model, filter_config);
    return out;
}

std::vector<LabeledSlice> labeled_slices_for(const fs::path& scan_dir) {
    const CTScan scan = load_scan(scan_dir);
    const auto labels = load_slice_labels(slice_labels_for(scan_dir));
    std::map<std::int64_t, bool> by_index;
    for (const auto& l : labels) by_index[l.index] = l.is_lung;
    std::vector<LabeledSlice> out;
    for (std::size_t i = 0; i < scan.n_slices(); ++i) {
        const auto it = by_index.find(scan.slice_indices[i]);
        if (it == by_index.end())
            throw Error("slice_labels", "no label for slice " + std::to_string(scan.slice_indices[i]) + " of '" +
                                            scan.scan_id + "'");
        out.push_back({scan.slices[i], it->second});
    }
    return out;
}

void save_slice_filter(SliceFilterTrained& trained, const fs::path& stem) {
    save_checkpoint(trained.model->classifier(), trained.meta, stem);
}

std::shared_ptr<SliceFilterModel> load_slice_filter(const fs::path& stem) {
    LoadedClassifier loaded = load_classifier(stem);
    if (loaded.meta.task != "filter")
        throw Error("slice_filter", "checkpoint '" + stem.string() + "' is a " + loaded.meta.task + " model, not a filter");
    return std::make_shared<SliceFilterModel>(loaded.model,
                                              SliceFilterConfig::from_json(loaded.meta.extras.value("filter", nlohmann::json::object())));
}

}  // namespace cov3d
