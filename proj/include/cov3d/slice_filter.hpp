#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "cov3d/data_model.hpp"
#include "cov3d/training.hpp"

namespace cov3d {

struct SliceFilterConfig {
    nn::BackboneKind backbone = nn::BackboneKind::ToyResNeXt;
    /// Slices are resized to input_size x input_size before scoring.
    std::int64_t input_size = 64;
    double threshold = 0.5;

    void validate() const;
    nlohmann::json to_json() const;
    static SliceFilterConfig from_json(const nlohmann::json& j);
};

/// Anything that can assign P(lung) to slices. Implementations must be safe
/// to call concurrently.
class SliceScorer {
public:
    virtual ~SliceScorer() = default;
    virtual std::vector<double> lung_probabilities(std::span<const Image> slices) = 0;
};

/// Trained 2-logit (non-lung, lung) classifier.
class SliceFilterModel final : public SliceScorer {
public:
    SliceFilterModel(std::shared_ptr<nn::Classifier> model, SliceFilterConfig config);

    std::vector<double> lung_probabilities(std::span<const Image> slices) override;
    const SliceFilterConfig& config() const noexcept { return config_; }
    nn::Classifier& classifier() { return *model_; }

private:
    std::shared_ptr<nn::Classifier> model_;
    SliceFilterConfig config_;
};

struct FilterResult {
    /// Positions into the scan's ordered slice list.
    std::vector<std::size_t> kept;
    /// True when nothing cleared the threshold and every slice was kept.
    bool fallback = false;
};

/// Keeps positions with p >= threshold in order; keeps all and flags when
/// none qualify. threshold must lie strictly inside (0,1).
FilterResult select_slices(std::span<const double> lung_probs, double threshold);

/// Scores a scan's slices and applies select_slices.
FilterResult filter_slices(const CTScan& scan, SliceScorer& scorer, double threshold);
FilterResult filter_slices(std::span<const Image> slices, SliceScorer& scorer, double threshold);

/// [1, size, size] tensor of the bilinearly resized slice.
torch::Tensor slice_input(const Image& slice, std::int64_t size);

struct LabeledSlice {
    Image image;
    bool is_lung = false;
};

struct SliceFilterTrained {
    std::shared_ptr<SliceFilterModel> model;
    CheckpointMeta meta;
    TrainHistory history;
};

/// Errors: "empty dataset", "single-class training set".
SliceFilterTrained train_slice_filter(const std::vector<LabeledSlice>& train_set, const TrainConfig& config,
                                      const SliceFilterConfig& filter_config = {});

/// Slices plus is_lung labels of a synthetic scan directory.
std::vector<LabeledSlice> labeled_slices_for(const fs::path& scan_dir);

void save_slice_filter(SliceFilterTrained& trained, const fs::path& stem);
std::shared_ptr<SliceFilterModel> load_slice_filter(const fs::path& stem);

}  // namespace cov3d
