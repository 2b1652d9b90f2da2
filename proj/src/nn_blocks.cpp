#include "cov3d/nn_blocks.hpp"

#include <cmath>
#include <cstring>

#include "cov3d/common.hpp"

namespace cov3d::nn {

namespace tnn = torch::nn;
using torch::Tensor;

void check_finite(const Tensor& t, const std::string& stage) {
    if (!torch::isfinite(t).all().item<bool>()) throw Error(stage, "non-finite values detected");
}

ChannelReductionBlockImpl::ChannelReductionBlockImpl(std::int64_t in_channels, std::string name, std::int64_t out_channels)
    : in_channels_(in_channels), out_channels_(out_channels), name_(std::move(name)) {
    if (in_channels < 1 || out_channels < 1) throw Error(name_, "channel counts must be >= 1");
    conv = register_module("conv", tnn::Conv2d(tnn::Conv2dOptions(in_channels, out_channels, 3).stride(1).padding(1).bias(true)));
    reset_parameters();
}

void ChannelReductionBlockImpl::reset_parameters() {
    torch::NoGradGuard guard;
    tnn::init::kaiming_uniform_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels_ * 9));
    conv->bias.uniform_(-bound, bound);
}

Tensor ChannelReductionBlockImpl::forward(const Tensor& x) {
    const bool unbatched = x.dim() == 3;
    if (!unbatched && x.dim() != 4)
        throw Error(name_, "expected a [C,H,W] or [B,C,H,W] tensor, got rank " + std::to_string(x.dim()));
    const Tensor in = unbatched ? x.unsqueeze(0) : x;
    if (in.size(1) != in_channels_)
        throw Error(name_, "expected " + std::to_string(in_channels_) + " input channels, got " + std::to_string(in.size(1)));
    if (in.size(2) < 1 || in.size(3) < 1) throw Error(name_, "empty spatial extent");
    const Tensor out = conv(in);
    return unbatched ? out.squeeze(0) : out;
}

Tensor to_tensor(const VolumeTensor& v) {
    v.validate();
    return torch::from_blob(const_cast<float*>(v.data.data()), {v.shape.depth, v.shape.height, v.shape.width},
                            torch::kFloat32)
        .clone();
}

VolumeTensor to_volume(const Tensor& t, VolumeProvenance provenance) {
    if (t.dim() != 3) throw Error("to_volume", "expected a rank-3 tensor");
    const Tensor c = t.detach().to(torch::kFloat32).contiguous();
    VolumeTensor v({c.size(0), c.size(1), c.size(2)});
    std::memcpy(v.data.data(), c.data_ptr<float>(), v.data.size() * sizeof(float));
    v.provenance = std::move(provenance);
    return v;
}

VolumeTensor reduce_channels(ChannelReductionBlock& block, const VolumeTensor& v) {
    if (v.shape.depth != block->in_channels())
        throw Error(block->name(), "channel mismatch: block takes " + std::to_string(block->in_channels()) +
                                       ", volume has " + std::to_string(v.shape.depth));
    torch::NoGradGuard guard;
    const auto dtype = block->conv->weight.scalar_type();
    const Tensor out = block->forward(to_tensor(v).to(dtype));
    return to_volume(out, v.provenance);
}

namespace {

Tensor standardise(const Tensor& x, const ChannelStats& stats) {
    if (stats.is_identity()) return x;
    const auto opts = x.options();
    const Tensor mean = torch::tensor({stats.mean[0], stats.mean[1], stats.mean[2]}, opts).view({1, 3, 1, 1});
    const Tensor std = torch::tensor({stats.std[0], stats.std[1], stats.std[2]}, opts).view({1, 3, 1, 1});
    return (x - mean) / std;
}

nlohmann::json stats_json(const ChannelStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

ChannelStats stats_from_json(const nlohmann::json& j) {
    ChannelStats s;
    if (j.is_null()) return s;
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.std = j.at("std").get<std::array<double, 3>>();
    s.validate();
    return s;
}

void check_min_size(const Tensor& x, const Backbone& b, const std::string& stage) {
    const auto need = b.min_input_size();
    if (x.size(-1) < need || x.size(-2) < need)
        throw Error(stage, "spatial size " + std::to_string(x.size(-2)) + "x" + std::to_string(x.size(-1)) +
                               " is below the backbone minimum " + std::to_string(need));
}

}  // namespace

DetectionModel::DetectionModel(BackboneKind backbone_kind, ChannelStats stats, std::int64_t depth, std::int64_t num_classes)
    : kind_(backbone_kind), stats_(stats), depth_(depth), num_classes_(num_classes) {
    stats_.validate();
    block = register_module("block", ChannelReductionBlock(depth, "block"));
    backbone = register_module("backbone", make_backbone(backbone_kind, 3, num_classes));
}

Tensor DetectionModel::forward(const Tensor& volume) {
    if (volume.dim() != 4) throw Error("detection_forward", "expected [B,D,H,W] input");
    check_finite(volume, "detection_forward:input");
    check_min_size(volume, *backbone, "detection_forward");
    Tensor x = standardise(block->forward(volume), stats_);
    check_finite(x, "detection_forward:block");
    x = backbone->forward(x);
    check_finite(x, "detection_forward:backbone");
    return x;
}

Tensor DetectionModel::forward_inputs(const std::vector<Tensor>& inputs) {
    if (inputs.size() != 1) throw Error("detection_forward", "expected one input volume");
    return forward(inputs[0]);
}

nlohmann::json DetectionModel::architecture() const {
    return {{"kind", "detection"},
            {"backbone", to_string(kind_)},
            {"blocks", {{depth_, 3}}},
            {"num_classes", num_classes_},
            {"normalization", stats_json(stats_)}};
}

SeverityConvLayerImpl::SeverityConvLayerImpl(bool relu_after, std::int64_t coarse_depth, std::int64_t fine_depth)
    : relu_after_(relu_after) {
    block1 = register_module("block1", ChannelReductionBlock(coarse_depth, "block1"));
    block2 = register_module("block2", ChannelReductionBlock(fine_depth, "block2"));
    block3 = register_module("block3", ChannelReductionBlock(6, "block3"));
}

Tensor SeverityConvLayerImpl::forward(const Tensor& coarse, const Tensor& fine) {
    const Tensor a = block1->forward(coarse);
    const Tensor b = block2->forward(fine);
    if (a.sizes() != b.sizes())
        throw Error("block3", "block1 and block2 outputs differ in shape; coarse and fine volumes must share S x S");
    const int64_t channel_axis = a.dim() - 3;
    Tensor y = block3->forward(torch::cat({a, b}, channel_axis));
    return relu_after_ ? torch::relu(y) : y;
}

std::string to_string(InceptionVariant v) {
    switch (v) {
        case InceptionVariant::V3: return "v3";
        case InceptionVariant::V4: return "v4";
        case InceptionVariant::ResNet: return "resnet";
    }
    return "?";
}

InceptionVariant parse_inception_variant(std::string_view token) {
    if (token == "v3") return InceptionVariant::V3;
    if (token == "v4") return InceptionVariant::V4;
    if (token == "resnet") return InceptionVariant::ResNet;
    throw Error("severity", "unknown Inception variant '" + std::string(token) + "' (expected v3, v4 or resnet)");
}

BackboneKind backbone_for(InceptionVariant variant, bool toy) {
    switch (variant) {
        case InceptionVariant::V3: return toy ? BackboneKind::ToyInceptionV3 : BackboneKind::InceptionV3;
        case InceptionVariant::V4: return toy ? BackboneKind::ToyInceptionV4 : BackboneKind::InceptionV4;
        case InceptionVariant::ResNet: return toy ? BackboneKind::ToyInceptionResNet : BackboneKind::InceptionResNetV2;
    }
    throw Error("severity", "unhandled variant");
}

SeverityModel::SeverityModel(BackboneKind backbone_kind, ChannelStats stats, bool relu_after, std::int64_t num_classes)
    : kind_(backbone_kind), stats_(stats), num_classes_(num_classes) {
    stats_.validate();
    conv_layer = register_module("conv_layer", SeverityConvLayer(relu_after));
    backbone = register_module("backbone", make_backbone(backbone_kind, 3, num_classes));
}

Tensor SeverityModel::forward(const Tensor& coarse, const Tensor& fine) {
    if (coarse.dim() != 4 || fine.dim() != 4) throw Error("severity_forward", "expected batched [B,D,S,S] inputs");
    check_finite(coarse, "severity_forward:input");
    check_finite(fine, "severity_forward:input");
    check_min_size(coarse, *backbone, "severity_forward");
    Tensor x = standardise(conv_layer->forward(coarse, fine), stats_);
    check_finite(x, "severity_forward:conv_layer");
    x = backbone->forward(x);
    check_finite(x, "severity_forward:backbone");
    return x;
}

Tensor SeverityModel::forward_inputs(const std::vector<Tensor>& inputs) {
    if (inputs.size() != 2) throw Error("severity_forward", "expected (coarse, fine) inputs");
    return forward(inputs[0], inputs[1]);
}

nlohmann::json SeverityModel::architecture() const {
    return {{"kind", "severity"},
            {"backbone", to_string(kind_)},
            {"blocks", {{conv_layer->block1->in_channels(), 3}, {conv_layer->block2->in_channels(), 3}, {6, 3}}},
            {"relu_after_block3", conv_layer->relu_after()},
            {"num_classes", num_classes_},
            {"normalization", stats_json(stats_)}};
}

ImageClassifier::ImageClassifier(BackboneKind backbone_kind, std::int64_t in_channels, std::int64_t num_classes)
    : kind_(backbone_kind), in_channels_(in_channels), num_classes_(num_classes) {
    backbone = register_module("backbone", make_backbone(backbone_kind, in_channels, num_classes));
}

Tensor ImageClassifier::forward(const Tensor& images) {
    if (images.dim() != 4 || images.size(1) != in_channels_)
        throw Error("image_classifier", "expected [B," + std::to_string(in_channels_) + ",H,W] input");
    check_min_size(images, *backbone, "image_classifier");
    Tensor x = backbone->forward(images);
    check_finite(x, "image_classifier:backbone");
    return x;
}

Tensor ImageClassifier::forward_inputs(const std::vector<Tensor>& inputs) {
    if (inputs.size() != 1) throw Error("image_classifier", "expected one input");
    return forward(inputs[0]);
}

nlohmann::json ImageClassifier::architecture() const {
    return {{"kind", "image"}, {"backbone", to_string(kind_)}, {"in_channels", in_channels_}, {"num_classes", num_classes_}};
}

std::shared_ptr<Classifier> make_classifier(const nlohmann::json& a, std::uint64_t seed) {
    torch::manual_seed(seed);
    try {
        const std::string kind = a.at("kind").get<std::string>();
        const BackboneKind backbone = parse_backbone(a.at("backbone").get<std::string>());
        const auto classes = a.at("num_classes").get<std::int64_t>();
        if (kind == "detection") {
            const auto depth = a.at("blocks").at(0).at(0).get<std::int64_t>();
            return std::make_shared<DetectionModel>(backbone, stats_from_json(a.value("normalization", nlohmann::json())),
                                                    depth, classes);
        }
        if (kind == "severity")
            return std::make_shared<SeverityModel>(backbone, stats_from_json(a.value("normalization", nlohmann::json())),
                                                   a.value("relu_after_block3", false), classes);
        if (kind == "image")
            return std::make_shared<ImageClassifier>(backbone, a.at("in_channels").get<std::int64_t>(), classes);
        throw Error("make_classifier", "unknown model kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
        throw Error("make_classifier", std::string("malformed architecture: ") + e.what());
    }
}

}  // namespace cov3d::nn
