#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cov3d/backbones.hpp"
#include "cov3d/volume_assembly.hpp"

namespace cov3d::nn {

/// 3x3, stride 1, padding 1 convolution with bias mapping a depth-stacked
/// volume to `out_channels` (3) image channels. `name` tags shape errors.
class ChannelReductionBlockImpl : public torch::nn::Module {
public:
    ChannelReductionBlockImpl(std::int64_t in_channels, std::string name = "block", std::int64_t out_channels = 3);

    /// Accepts [C,H,W] or [B,C,H,W]; returns the same rank.
    torch::Tensor forward(const torch::Tensor& x);

    /// Kaiming-uniform (fan-in, ReLU gain) weights, bias U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    void reset_parameters();

    std::int64_t in_channels() const noexcept { return in_channels_; }
    std::int64_t out_channels() const noexcept { return out_channels_; }
    const std::string& name() const noexcept { return name_; }

    torch::nn::Conv2d conv{nullptr};

private:
    std::int64_t in_channels_;
    std::int64_t out_channels_;
    std::string name_;
};
TORCH_MODULE(ChannelReductionBlock);

/// Volume <-> tensor views. The tensor is float32 [D,H,W].
torch::Tensor to_tensor(const VolumeTensor& v);
VolumeTensor to_volume(const torch::Tensor& t, VolumeProvenance provenance = {});

/// reduce_channels on a stored volume. Runs without autograd.
VolumeTensor reduce_channels(ChannelReductionBlock& block, const VolumeTensor& v);

/// Common surface of everything the training loop can fit. Inputs carry a
/// leading batch axis.
class Classifier : public torch::nn::Module {
public:
    virtual torch::Tensor forward_inputs(const std::vector<torch::Tensor>& inputs) = 0;
    virtual std::int64_t num_classes() const = 0;
    /// Enough to rebuild the module with make_classifier.
    virtual nlohmann::json architecture() const = 0;
};

/// ChannelReductionBlock(64->3), optional standardisation, dense-family backbone.
class DetectionModel final : public Classifier {
public:
    DetectionModel(BackboneKind backbone, ChannelStats stats = ChannelStats::identity(),
                   std::int64_t depth = kDetectionDepth, std::int64_t num_classes = 2);

    /// [B,64,H,W] -> [B,2] logits. Non-finite activations raise naming the stage.
    torch::Tensor forward(const torch::Tensor& volume);
    torch::Tensor forward_inputs(const std::vector<torch::Tensor>& inputs) override;
    std::int64_t num_classes() const override { return num_classes_; }
    nlohmann::json architecture() const override;

    ChannelReductionBlock block{nullptr};
    std::shared_ptr<Backbone> backbone;

private:
    BackboneKind kind_;
    ChannelStats stats_;
    std::int64_t depth_;
    std::int64_t num_classes_;
};

/// block1(coarse) and block2(fine) concatenated on channels (block1 first),
/// then block3. `relu_after` inserts a ReLU on block3's output.
class SeverityConvLayerImpl : public torch::nn::Module {
public:
    explicit SeverityConvLayerImpl(bool relu_after = false, std::int64_t coarse_depth = kSeverityCoarseDepth,
                                   std::int64_t fine_depth = kSeverityFineDepth);

    torch::Tensor forward(const torch::Tensor& coarse, const torch::Tensor& fine);
    bool relu_after() const noexcept { return relu_after_; }

    ChannelReductionBlock block1{nullptr}, block2{nullptr}, block3{nullptr};

private:
    bool relu_after_;
};
TORCH_MODULE(SeverityConvLayer);

enum class InceptionVariant { V3, V4, ResNet };

std::string to_string(InceptionVariant v);
InceptionVariant parse_inception_variant(std::string_view token);
/// Backbone for a variant in the requested tier.
BackboneKind backbone_for(InceptionVariant variant, bool toy);

class SeverityModel final : public Classifier {
public:
    SeverityModel(BackboneKind backbone, ChannelStats stats = ChannelStats::identity(), bool relu_after = false,
                  std::int64_t num_classes = 4);

    /// ([B,32,S,S], [B,16,S,S]) -> [B,4] logits.
    torch::Tensor forward(const torch::Tensor& coarse, const torch::Tensor& fine);
    torch::Tensor forward_inputs(const std::vector<torch::Tensor>& inputs) override;
    std::int64_t num_classes() const override { return num_classes_; }
    nlohmann::json architecture() const override;

    SeverityConvLayer conv_layer{nullptr};
    std::shared_ptr<Backbone> backbone;

private:
    BackboneKind kind_;
    ChannelStats stats_;
    std::int64_t num_classes_;
};

/// Backbone used directly on images (the slice filter).
class ImageClassifier final : public Classifier {
public:
    ImageClassifier(BackboneKind backbone, std::int64_t in_channels, std::int64_t num_classes);

    torch::Tensor forward(const torch::Tensor& images);
    torch::Tensor forward_inputs(const std::vector<torch::Tensor>& inputs) override;
    std::int64_t num_classes() const override { return num_classes_; }
    nlohmann::json architecture() const override;

    std::shared_ptr<Backbone> backbone;

private:
    BackboneKind kind_;
    std::int64_t in_channels_;
    std::int64_t num_classes_;
};

/// Rebuilds a classifier from architecture() output. torch's global generator
/// is seeded with `seed` first, so initial weights are a function of it.
std::shared_ptr<Classifier> make_classifier(const nlohmann::json& architecture, std::uint64_t seed);

/// Throws Error(stage, ...) if `t` holds NaN or Inf.
void check_finite(const torch::Tensor& t, const std::string& stage);

}  // namespace cov3d::nn
