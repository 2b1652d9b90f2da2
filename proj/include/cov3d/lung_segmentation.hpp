#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "cov3d/common.hpp"
#include "cov3d/training.hpp"

namespace cov3d {

struct SegmentationConfig {
    int depth = 4;
    int base_channels = 32;
    double threshold = 0.5;
    bool auto_pad = true;
    /// Share of pairs held out for the recorded Dice (used when >= 5 pairs).
    double holdout_fraction = 0.2;

    void validate() const;
    nlohmann::json to_json() const;
    static SegmentationConfig from_json(const nlohmann::json& j);
};

/// U-Net with additive attention gates on the skip connections. Input
/// [B,1,H,W] with H and W divisible by 2^depth; output [B,1,H,W] logits.
class AttentionUNetImpl : public torch::nn::Module {
public:
    AttentionUNetImpl(int depth, int base_channels);

    torch::Tensor forward(const torch::Tensor& x);
    int depth() const noexcept { return depth_; }
    int base_channels() const noexcept { return base_; }

private:
    int depth_;
    int base_;
    torch::nn::ModuleList enc_, up_, gate_, dec_;
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(AttentionUNet);

struct SegmentationModel {
    AttentionUNet net{nullptr};
    SegmentationConfig config;
};

/// Smallest multiple of 2^depth that is >= n.
std::int64_t padded_extent(std::int64_t n, int depth);

/// sigmoid(output) >= threshold. With auto-pad the slice is zero-padded
/// (bottom/right) to a multiple of 2^depth and the mask cropped back.
BinaryMask segment_lungs(const Image& slice, SegmentationModel& model);
std::vector<BinaryMask> segment_lungs(std::span<const Image> slices, SegmentationModel& model);

/// slice where mask = 1, else 0.
Image apply_mask(const Image& slice, const BinaryMask& mask);

/// 2|A and B| / (|A| + |B|); 1 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& truth);

struct MaskPair {
    Image slice;
    BinaryMask mask;
};

struct SegmenterTrained {
    SegmentationModel model;
    CheckpointMeta meta;
    TrainHistory history;
    /// Mean Dice on the held-out pairs (the training pairs when fewer than 5).
    double heldout_dice = 0.0;
    std::size_t n_heldout = 0;
};

/// Dice + BCE with equal weights; optimiser and LR schedule from `config`.
SegmenterTrained train_segmenter(const std::vector<MaskPair>& pairs, const TrainConfig& config,
                                 const SegmentationConfig& seg_config = {});

/// Mean Dice of the model's masks against the given pairs.
double mean_dice(SegmentationModel& model, const std::vector<MaskPair>& pairs);

/// `slice_path,mask_path` listing; relative paths resolve against the file's directory.
std::vector<MaskPair> load_mask_pairs(const std::filesystem::path& csv_path);

void save_segmenter(SegmenterTrained& trained, const std::filesystem::path& stem);
SegmentationModel load_segmenter(const std::filesystem::path& stem);

}  // namespace cov3d
