#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <torch/torch.h>

namespace cov3d::nn {

/// 2D classifier families. The full-size kinds follow the torchvision
/// (DenseNet-161, Inception-v3, ResNeXt-50 32x4d) and timm (Inception-v4,
/// Inception-ResNet-v2) module layouts, so their parameter names match the
/// state dicts those libraries export. The toy kinds keep the same family
/// traits at CI-friendly size.
enum class BackboneKind {
    ToyDense,
    ToyInceptionV3,
    ToyInceptionV4,
    ToyInceptionResNet,
    ToyResNeXt,
    DenseNet161,
    InceptionV3,
    InceptionV4,
    InceptionResNetV2,
    ResNeXt50,
};

std::string to_string(BackboneKind kind);
BackboneKind parse_backbone(std::string_view token);
bool is_toy(BackboneKind kind);

class Backbone : public torch::nn::Module {
public:
    /// [B, in_channels, H, W] -> [B, num_classes] logits.
    virtual torch::Tensor forward(torch::Tensor x) = 0;
    /// Smallest square input the layer stack accepts.
    virtual std::int64_t min_input_size() const = 0;
};

std::shared_ptr<Backbone> make_backbone(BackboneKind kind, std::int64_t in_channels, std::int64_t num_classes);

std::int64_t parameter_count(const torch::nn::Module& module);

/// Copies tensors from a `torch.save(dict(state_dict))` archive into `module`,
/// matching by name with an optional prefix. Parameters absent from the
/// archive or shaped differently (e.g. a replaced classifier head) are left
/// untouched. Returns the number of tensors copied. A bare OrderedDict (what
/// state_dict() returns) cannot be read by libtorch and is rejected.
std::size_t load_state_dict(torch::nn::Module& module, const std::filesystem::path& path,
                            const std::string& prefix = "");

}  // namespace cov3d::nn
