#include "cov3d/backbones.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "cov3d/common.hpp"

namespace cov3d::nn {

namespace tnn = torch::nn;
using torch::Tensor;

std::string to_string(BackboneKind kind) {
    switch (kind) {
        case BackboneKind::ToyDense: return "toy-dense";
        case BackboneKind::ToyInceptionV3: return "toy-inception-v3";
        case BackboneKind::ToyInceptionV4: return "toy-inception-v4";
        case BackboneKind::ToyInceptionResNet: return "toy-inception-resnet";
        case BackboneKind::ToyResNeXt: return "toy-resnext";
        case BackboneKind::DenseNet161: return "densenet161";
        case BackboneKind::InceptionV3: return "inception-v3";
        case BackboneKind::InceptionV4: return "inception-v4";
        case BackboneKind::InceptionResNetV2: return "inception-resnet-v2";
        case BackboneKind::ResNeXt50: return "resnext50-32x4d";
    }
    return "?";
}

BackboneKind parse_backbone(std::string_view token) {
    for (auto k : {BackboneKind::ToyDense, BackboneKind::ToyInceptionV3, BackboneKind::ToyInceptionV4,
                   BackboneKind::ToyInceptionResNet, BackboneKind::ToyResNeXt, BackboneKind::DenseNet161,
                   BackboneKind::InceptionV3, BackboneKind::InceptionV4, BackboneKind::InceptionResNetV2,
                   BackboneKind::ResNeXt50})
        if (token == to_string(k)) return k;
    throw Error("backbone", "unknown backbone '" + std::string(token) + "'");
}

bool is_toy(BackboneKind kind) {
    switch (kind) {
        case BackboneKind::ToyDense:
        case BackboneKind::ToyInceptionV3:
        case BackboneKind::ToyInceptionV4:
        case BackboneKind::ToyInceptionResNet:
        case BackboneKind::ToyResNeXt: return true;
        default: return false;
    }
}

namespace {

using K2 = std::array<std::int64_t, 2>;

torch::ExpandingArray<2> ea(K2 v) { return torch::ExpandingArray<2>({v[0], v[1]}); }

/// Convolution (no bias) + batch norm + ReLU. Child names follow both
/// torchvision's BasicConv2d and timm's ConvNormAct: `conv`, `bn`.
class ConvBnImpl : public tnn::Module {
public:
    ConvBnImpl(std::int64_t in, std::int64_t out, K2 kernel, K2 stride = {1, 1}, K2 padding = {0, 0}, double eps = 1e-3)
        : conv(register_module("conv", tnn::Conv2d(tnn::Conv2dOptions(in, out, ea(kernel))
                                                       .stride(ea(stride))
                                                       .padding(ea(padding))
                                                       .bias(false)))),
          bn(register_module("bn", tnn::BatchNorm2d(tnn::BatchNorm2dOptions(out).eps(eps)))) {}

    Tensor forward(Tensor x) { return torch::relu(bn(conv(x))); }

    tnn::Conv2d conv;
    tnn::BatchNorm2d bn;
};
TORCH_MODULE(ConvBn);

ConvBn cbn(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1, std::int64_t pad = 0, double eps = 1e-3) {
    return ConvBn(in, out, K2{k, k}, K2{stride, stride}, K2{pad, pad}, eps);
}
ConvBn cbn(std::int64_t in, std::int64_t out, K2 k, K2 pad, double eps = 1e-3) {
    return ConvBn(in, out, k, K2{1, 1}, pad, eps);
}

tnn::AvgPool2d avg_pool_same(bool count_include_pad) {
    return tnn::AvgPool2d(tnn::AvgPool2dOptions(3).stride(1).padding(1).count_include_pad(count_include_pad));
}

Tensor global_pool(const Tensor& x) { return torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1); }

// ---------------------------------------------------------------------------
// DenseNet (torchvision layout), parameterised so the toy tier is the same
// topology at reduced width.

struct DenseNetConfig {
    std::int64_t growth = 48;
    std::vector<std::int64_t> blocks{6, 12, 36, 24};
    std::int64_t init_features = 96;
    std::int64_t bn_size = 4;
    std::int64_t min_input = 32;
};

class DenseLayerImpl : public tnn::Module {
public:
    DenseLayerImpl(std::int64_t in, std::int64_t growth, std::int64_t bn_size)
        : norm1(register_module("norm1", tnn::BatchNorm2d(in))),
          conv1(register_module("conv1", tnn::Conv2d(tnn::Conv2dOptions(in, bn_size * growth, 1).bias(false)))),
          norm2(register_module("norm2", tnn::BatchNorm2d(bn_size * growth))),
          conv2(register_module("conv2",
                                tnn::Conv2d(tnn::Conv2dOptions(bn_size * growth, growth, 3).padding(1).bias(false)))) {}

    Tensor forward(const Tensor& x) {
        const Tensor y = conv1(torch::relu(norm1(x)));
        return conv2(torch::relu(norm2(y)));
    }

    tnn::BatchNorm2d norm1;
    tnn::Conv2d conv1;
    tnn::BatchNorm2d norm2;
    tnn::Conv2d conv2;
};
TORCH_MODULE(DenseLayer);

class DenseBlockImpl : public tnn::Module {
public:
    DenseBlockImpl(std::int64_t layers, std::int64_t in, std::int64_t growth, std::int64_t bn_size) {
        for (std::int64_t i = 0; i < layers; ++i)
            layers_.push_back(register_module("denselayer" + std::to_string(i + 1),
                                              DenseLayer(in + i * growth, growth, bn_size)));
    }

    Tensor forward(Tensor x) {
        std::vector<Tensor> features{x};
        for (auto& layer : layers_) features.push_back(layer(torch::cat(features, 1)));
        return torch::cat(features, 1);
    }

private:
    std::vector<DenseLayer> layers_;
};
TORCH_MODULE(DenseBlock);

class TransitionImpl : public tnn::Module {
public:
    TransitionImpl(std::int64_t in, std::int64_t out)
        : norm(register_module("norm", tnn::BatchNorm2d(in))),
          conv(register_module("conv", tnn::Conv2d(tnn::Conv2dOptions(in, out, 1).bias(false)))) {}

    Tensor forward(const Tensor& x) { return torch::avg_pool2d(conv(torch::relu(norm(x))), 2, 2); }

    tnn::BatchNorm2d norm;
    tnn::Conv2d conv;
};
TORCH_MODULE(Transition);

class DenseNetFeaturesImpl : public tnn::Module {
public:
    explicit DenseNetFeaturesImpl(std::int64_t in_channels, const DenseNetConfig& c) {
        conv0 = register_module("conv0", tnn::Conv2d(tnn::Conv2dOptions(in_channels, c.init_features, 7)
                                                         .stride(2)
                                                         .padding(3)
                                                         .bias(false)));
        norm0 = register_module("norm0", tnn::BatchNorm2d(c.init_features));
        std::int64_t ch = c.init_features;
        for (std::size_t i = 0; i < c.blocks.size(); ++i) {
            blocks.push_back(register_module("denseblock" + std::to_string(i + 1),
                                             DenseBlock(c.blocks[i], ch, c.growth, c.bn_size)));
            ch += c.blocks[i] * c.growth;
            if (i + 1 != c.blocks.size()) {
                transitions.push_back(register_module("transition" + std::to_string(i + 1), Transition(ch, ch / 2)));
                ch /= 2;
            }
        }
        norm5 = register_module("norm5", tnn::BatchNorm2d(ch));
        out_channels = ch;
    }

    Tensor forward(Tensor x) {
        x = torch::max_pool2d(torch::relu(norm0(conv0(x))), 3, 2, 1);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            x = blocks[i](x);
            if (i < transitions.size()) x = transitions[i](x);
        }
        return norm5(x);
    }

    tnn::Conv2d conv0{nullptr};
    tnn::BatchNorm2d norm0{nullptr}, norm5{nullptr};
    std::vector<DenseBlock> blocks;
    std::vector<Transition> transitions;
    std::int64_t out_channels = 0;
};
TORCH_MODULE(DenseNetFeatures);

class DenseNet final : public Backbone {
public:
    DenseNet(std::int64_t in_channels, std::int64_t num_classes, DenseNetConfig config)
        : config_(std::move(config)),
          features(register_module("features", DenseNetFeatures(in_channels, config_))),
          classifier(register_module("classifier", tnn::Linear(features->out_channels, num_classes))) {
        for (auto& m : modules(false)) {
            if (auto* conv = m->as<tnn::Conv2d>()) tnn::init::kaiming_normal_(conv->weight);
            if (auto* bn = m->as<tnn::BatchNorm2d>()) {
                tnn::init::ones_(bn->weight);
                tnn::init::zeros_(bn->bias);
            }
        }
        tnn::init::zeros_(classifier->bias);
    }

    Tensor forward(Tensor x) override { return classifier(global_pool(torch::relu(features(x)))); }
    std::int64_t min_input_size() const override { return config_.min_input; }

private:
    DenseNetConfig config_;
    DenseNetFeatures features;
    tnn::Linear classifier;
};

// ---------------------------------------------------------------------------
// Inception-v3 (torchvision layout, no auxiliary head).

class V3InceptionAImpl : public tnn::Module {
public:
    V3InceptionAImpl(std::int64_t in, std::int64_t pool_features)
        : branch1x1(register_module("branch1x1", cbn(in, 64, 1))),
          branch5x5_1(register_module("branch5x5_1", cbn(in, 48, 1))),
          branch5x5_2(register_module("branch5x5_2", cbn(48, 64, 5, 1, 2))),
          branch3x3dbl_1(register_module("branch3x3dbl_1", cbn(in, 64, 1))),
          branch3x3dbl_2(register_module("branch3x3dbl_2", cbn(64, 96, 3, 1, 1))),
          branch3x3dbl_3(register_module("branch3x3dbl_3", cbn(96, 96, 3, 1, 1))),
          branch_pool(register_module("branch_pool", cbn(in, pool_features, 1))) {}

    Tensor forward(const Tensor& x) {
        return torch::cat({branch1x1(x), branch5x5_2(branch5x5_1(x)),
                           branch3x3dbl_3(branch3x3dbl_2(branch3x3dbl_1(x))),
                           branch_pool(torch::avg_pool2d(x, 3, 1, 1))},
                          1);
    }

    ConvBn branch1x1, branch5x5_1, branch5x5_2, branch3x3dbl_1, branch3x3dbl_2, branch3x3dbl_3, branch_pool;
};
TORCH_MODULE(V3InceptionA);

class V3InceptionBImpl : public tnn::Module {
public:
    explicit V3InceptionBImpl(std::int64_t in)
        : branch3x3(register_module("branch3x3", cbn(in, 384, 3, 2))),
          branch3x3dbl_1(register_module("branch3x3dbl_1", cbn(in, 64, 1))),
          branch3x3dbl_2(register_module("branch3x3dbl_2", cbn(64, 96, 3, 1, 1))),
          branch3x3dbl_3(register_module("branch3x3dbl_3", cbn(96, 96, 3, 2))) {}

    Tensor forward(const Tensor& x) {
        return torch::cat({branch3x3(x), branch3x3dbl_3(branch3x3dbl_2(branch3x3dbl_1(x))), torch::max_pool2d(x, 3, 2)},
                          1);
    }

    ConvBn branch3x3, branch3x3dbl_1, branch3x3dbl_2, branch3x3dbl_3;
};
TORCH_MODULE(V3InceptionB);

class V3InceptionCImpl : public tnn::Module {
public:
    V3InceptionCImpl(std::int64_t in, std::int64_t c7)
        : branch1x1(register_module("branch1x1", cbn(in, 192, 1))),
          branch7x7_1(register_module("branch7x7_1", cbn(in, c7, 1))),
          branch7x7_2(register_module("branch7x7_2", cbn(c7, c7, K2{1, 7}, K2{0, 3}))),
          branch7x7_3(register_module("branch7x7_3", cbn(c7, 192, K2{7, 1}, K2{3, 0}))),
          branch7x7dbl_1(register_module("branch7x7dbl_1", cbn(in, c7, 1))),
          branch7x7dbl_2(register_module("branch7x7dbl_2", cbn(c7, c7, K2{7, 1}, K2{3, 0}))),
          branch7x7dbl_3(register_module("branch7x7dbl_3", cbn(c7, c7, K2{1, 7}, K2{0, 3}))),
          branch7x7dbl_4(register_module("branch7x7dbl_4", cbn(c7, c7, K2{7, 1}, K2{3, 0}))),
          branch7x7dbl_5(register_module("branch7x7dbl_5", cbn(c7, 192, K2{1, 7}, K2{0, 3}))),
          branch_pool(register_module("branch_pool", cbn(in, 192, 1))) {}

    Tensor forward(const Tensor& x) {
        return torch::cat(
            {branch1x1(x), branch7x7_3(branch7x7_2(branch7x7_1(x))),
             branch7x7dbl_5(branch7x7dbl_4(branch7x7dbl_3(branch7x7dbl_2(branch7x7dbl_1(x))))),
             branch_pool(torch::avg_pool2d(x, 3, 1, 1))},
            1);
    }

    ConvBn branch1x1, branch7x7_1, branch7x7_2, branch7x7_3, branch7x7dbl_1, branch7x7dbl_2, branch7x7dbl_3,
        branch7x7dbl_4, branch7x7dbl_5, branch_pool;
};
TORCH_MODULE(V3InceptionC);

class V3InceptionDImpl : public tnn::Module {
public:
    explicit V3InceptionDImpl(std::int64_t in)
        : branch3x3_1(register_module("branch3x3_1", cbn(in, 192, 1))),
          branch3x3_2(register_module("branch3x3_2", cbn(192, 320, 3, 2))),
          branch7x7x3_1(register_module("branch7x7x3_1", cbn(in, 192, 1))),
          branch7x7x3_2(register_module("branch7x7x3_2", cbn(192, 192, K2{1, 7}, K2{0, 3}))),
          branch7x7x3_3(register_module("branch7x7x3_3", cbn(192, 192, K2{7, 1}, K2{3, 0}))),
          branch7x7x3_4(register_module("branch7x7x3_4", cbn(192, 192, 3, 2))) {}

    Tensor forward(const Tensor& x) {
        return torch::cat({branch3x3_2(branch3x3_1(x)),
                           branch7x7x3_4(branch7x7x3_3(branch7x7x3_2(branch7x7x3_1(x)))), torch::max_pool2d(x, 3, 2)},
                          1);
    }

    ConvBn branch3x3_1, branch3x3_2, branch7x7x3_1, branch7x7x3_2, branch7x7x3_3, branch7x7x3_4;
};
TORCH_MODULE(V3InceptionD);

class V3InceptionEImpl : public tnn::Module {
public:
    explicit V3InceptionEImpl(std::int64_t in)
        : branch1x1(register_module("branch1x1", cbn(in, 320, 1))),
          branch3x3_1(register_module("branch3x3_1", cbn(in, 384, 1))),
          branch3x3_2a(register_module("branch3x3_2a", cbn(384, 384, K2{1, 3}, K2{0, 1}))),
          branch3x3_2b(register_module("branch3x3_2b", cbn(384, 384, K2{3, 1}, K2{1, 0}))),
          branch3x3dbl_1(register_module("branch3x3dbl_1", cbn(in, 448, 1))),
          branch3x3dbl_2(register_module("branch3x3dbl_2", cbn(448, 384, 3, 1, 1))),
          branch3x3dbl_3a(register_module("branch3x3dbl_3a", cbn(384, 384, K2{1, 3}, K2{0, 1}))),
          branch3x3dbl_3b(register_module("branch3x3dbl_3b", cbn(384, 384, K2{3, 1}, K2{1, 0}))),
          branch_pool(register_module("branch_pool", cbn(in, 192, 1))) {}

    Tensor forward(const Tensor& x) {
        const Tensor b3 = branch3x3_1(x);
        const Tensor bd = branch3x3dbl_2(branch3x3dbl_1(x));
        return torch::cat({branch1x1(x), torch::cat({branch3x3_2a(b3), branch3x3_2b(b3)}, 1),
                           torch::cat({branch3x3dbl_3a(bd), branch3x3dbl_3b(bd)}, 1),
                           branch_pool(torch::avg_pool2d(x, 3, 1, 1))},
                          1);
    }

    ConvBn branch1x1, branch3x3_1, branch3x3_2a, branch3x3_2b, branch3x3dbl_1, branch3x3dbl_2, branch3x3dbl_3a,
        branch3x3dbl_3b, branch_pool;
};
TORCH_MODULE(V3InceptionE);

class InceptionV3Net final : public Backbone {
public:
    InceptionV3Net(std::int64_t in_channels, std::int64_t num_classes)
        : Conv2d_1a_3x3(register_module("Conv2d_1a_3x3", cbn(in_channels, 32, 3, 2))),
          Conv2d_2a_3x3(register_module("Conv2d_2a_3x3", cbn(32, 32, 3))),
          Conv2d_2b_3x3(register_module("Conv2d_2b_3x3", cbn(32, 64, 3, 1, 1))),
          Conv2d_3b_1x1(register_module("Conv2d_3b_1x1", cbn(64, 80, 1))),
          Conv2d_4a_3x3(register_module("Conv2d_4a_3x3", cbn(80, 192, 3))),
          Mixed_5b(register_module("Mixed_5b", V3InceptionA(192, 32))),
          Mixed_5c(register_module("Mixed_5c", V3InceptionA(256, 64))),
          Mixed_5d(register_module("Mixed_5d", V3InceptionA(288, 64))),
          Mixed_6a(register_module("Mixed_6a", V3InceptionB(288))),
          Mixed_6b(register_module("Mixed_6b", V3InceptionC(768, 128))),
          Mixed_6c(register_module("Mixed_6c", V3InceptionC(768, 160))),
          Mixed_6d(register_module("Mixed_6d", V3InceptionC(768, 160))),
          Mixed_6e(register_module("Mixed_6e", V3InceptionC(768, 192))),
          Mixed_7a(register_module("Mixed_7a", V3InceptionD(768))),
          Mixed_7b(register_module("Mixed_7b", V3InceptionE(1280))),
          Mixed_7c(register_module("Mixed_7c", V3InceptionE(2048))),
          fc(register_module("fc", tnn::Linear(2048, num_classes))) {}

    Tensor forward(Tensor x) override {
        x = Conv2d_2b_3x3(Conv2d_2a_3x3(Conv2d_1a_3x3(x)));
        x = torch::max_pool2d(x, 3, 2);
        x = Conv2d_4a_3x3(Conv2d_3b_1x1(x));
        x = torch::max_pool2d(x, 3, 2);
        x = Mixed_5d(Mixed_5c(Mixed_5b(x)));
        x = Mixed_6e(Mixed_6d(Mixed_6c(Mixed_6b(Mixed_6a(x)))));
        x = Mixed_7c(Mixed_7b(Mixed_7a(x)));
        x = torch::dropout(global_pool(x), 0.5, is_training());
        return fc(x);
    }
    std::int64_t min_input_size() const override { return 75; }

private:
    ConvBn Conv2d_1a_3x3, Conv2d_2a_3x3, Conv2d_2b_3x3, Conv2d_3b_1x1, Conv2d_4a_3x3;
    V3InceptionA Mixed_5b, Mixed_5c, Mixed_5d;
    V3InceptionB Mixed_6a;
    V3InceptionC Mixed_6b, Mixed_6c, Mixed_6d, Mixed_6e;
    V3InceptionD Mixed_7a;
    V3InceptionE Mixed_7b, Mixed_7c;
    tnn::Linear fc;
};

// ---------------------------------------------------------------------------
// Inception-v4 (timm layout).

class Cat2Impl : public tnn::Module {
public:
    Cat2Impl(std::string a_name, tnn::AnyModule a, std::string b_name, tnn::AnyModule b) : a_(std::move(a)), b_(std::move(b)) {
        register_module(a_name, a_.ptr());
        register_module(b_name, b_.ptr());
    }
    Tensor forward(const Tensor& x) { return torch::cat({a_.forward(x), b_.forward(x)}, 1); }

private:
    tnn::AnyModule a_, b_;
};
TORCH_MODULE(Cat2);

tnn::Sequential seq(std::initializer_list<tnn::AnyModule> items) {
    tnn::Sequential s;
    for (const auto& m : items) s->push_back(m);
    return s;
}

class V4InceptionAImpl : public tnn::Module {
public:
    V4InceptionAImpl()
        : branch0(register_module("branch0", cbn(384, 96, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(384, 64, 1)), tnn::AnyModule(cbn(64, 96, 3, 1, 1))}))),
          branch2(register_module("branch2", seq({tnn::AnyModule(cbn(384, 64, 1)), tnn::AnyModule(cbn(64, 96, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(96, 96, 3, 1, 1))}))),
          branch3(register_module("branch3", seq({tnn::AnyModule(avg_pool_same(false)), tnn::AnyModule(cbn(384, 96, 1))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0(x), branch1->forward(x), branch2->forward(x), branch3->forward(x)}, 1); }

    ConvBn branch0;
    tnn::Sequential branch1, branch2, branch3;
};
TORCH_MODULE(V4InceptionA);

class V4ReductionAImpl : public tnn::Module {
public:
    V4ReductionAImpl()
        : branch0(register_module("branch0", cbn(384, 384, 3, 2))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(384, 192, 1)), tnn::AnyModule(cbn(192, 224, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(224, 256, 3, 2))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0(x), branch1->forward(x), torch::max_pool2d(x, 3, 2)}, 1); }

    ConvBn branch0;
    tnn::Sequential branch1;
};
TORCH_MODULE(V4ReductionA);

class V4InceptionBImpl : public tnn::Module {
public:
    V4InceptionBImpl()
        : branch0(register_module("branch0", cbn(1024, 384, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(1024, 192, 1)),
                                                  tnn::AnyModule(cbn(192, 224, K2{1, 7}, K2{0, 3})),
                                                  tnn::AnyModule(cbn(224, 256, K2{7, 1}, K2{3, 0}))}))),
          branch2(register_module("branch2", seq({tnn::AnyModule(cbn(1024, 192, 1)),
                                                  tnn::AnyModule(cbn(192, 192, K2{7, 1}, K2{3, 0})),
                                                  tnn::AnyModule(cbn(192, 224, K2{1, 7}, K2{0, 3})),
                                                  tnn::AnyModule(cbn(224, 224, K2{7, 1}, K2{3, 0})),
                                                  tnn::AnyModule(cbn(224, 256, K2{1, 7}, K2{0, 3}))}))),
          branch3(register_module("branch3", seq({tnn::AnyModule(avg_pool_same(false)), tnn::AnyModule(cbn(1024, 128, 1))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0(x), branch1->forward(x), branch2->forward(x), branch3->forward(x)}, 1); }

    ConvBn branch0;
    tnn::Sequential branch1, branch2, branch3;
};
TORCH_MODULE(V4InceptionB);

class V4ReductionBImpl : public tnn::Module {
public:
    V4ReductionBImpl()
        : branch0(register_module("branch0", seq({tnn::AnyModule(cbn(1024, 192, 1)), tnn::AnyModule(cbn(192, 192, 3, 2))}))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(1024, 256, 1)),
                                                  tnn::AnyModule(cbn(256, 256, K2{1, 7}, K2{0, 3})),
                                                  tnn::AnyModule(cbn(256, 320, K2{7, 1}, K2{3, 0})),
                                                  tnn::AnyModule(cbn(320, 320, 3, 2))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0->forward(x), branch1->forward(x), torch::max_pool2d(x, 3, 2)}, 1); }

    tnn::Sequential branch0, branch1;
};
TORCH_MODULE(V4ReductionB);

class V4InceptionCImpl : public tnn::Module {
public:
    V4InceptionCImpl()
        : branch0(register_module("branch0", cbn(1536, 256, 1))),
          branch1_0(register_module("branch1_0", cbn(1536, 384, 1))),
          branch1_1a(register_module("branch1_1a", cbn(384, 256, K2{1, 3}, K2{0, 1}))),
          branch1_1b(register_module("branch1_1b", cbn(384, 256, K2{3, 1}, K2{1, 0}))),
          branch2_0(register_module("branch2_0", cbn(1536, 384, 1))),
          branch2_1(register_module("branch2_1", cbn(384, 448, K2{3, 1}, K2{1, 0}))),
          branch2_2(register_module("branch2_2", cbn(448, 512, K2{1, 3}, K2{0, 1}))),
          branch2_3a(register_module("branch2_3a", cbn(512, 256, K2{1, 3}, K2{0, 1}))),
          branch2_3b(register_module("branch2_3b", cbn(512, 256, K2{3, 1}, K2{1, 0}))),
          branch3(register_module("branch3", seq({tnn::AnyModule(avg_pool_same(false)), tnn::AnyModule(cbn(1536, 256, 1))}))) {}

    Tensor forward(const Tensor& x) {
        const Tensor x1 = branch1_0(x);
        const Tensor x2 = branch2_2(branch2_1(branch2_0(x)));
        return torch::cat({branch0(x), torch::cat({branch1_1a(x1), branch1_1b(x1)}, 1),
                           torch::cat({branch2_3a(x2), branch2_3b(x2)}, 1), branch3->forward(x)},
                          1);
    }

    ConvBn branch0, branch1_0, branch1_1a, branch1_1b, branch2_0, branch2_1, branch2_2, branch2_3a, branch2_3b;
    tnn::Sequential branch3;
};
TORCH_MODULE(V4InceptionC);

class V4Mixed3aImpl : public tnn::Module {
public:
    V4Mixed3aImpl() : conv(register_module("conv", cbn(64, 96, 3, 2))) {}
    Tensor forward(const Tensor& x) { return torch::cat({torch::max_pool2d(x, 3, 2), conv(x)}, 1); }
    ConvBn conv;
};
TORCH_MODULE(V4Mixed3a);

class V4Mixed4aImpl : public tnn::Module {
public:
    V4Mixed4aImpl()
        : branch0(register_module("branch0", seq({tnn::AnyModule(cbn(160, 64, 1)), tnn::AnyModule(cbn(64, 96, 3))}))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(160, 64, 1)),
                                                  tnn::AnyModule(cbn(64, 64, K2{1, 7}, K2{0, 3})),
                                                  tnn::AnyModule(cbn(64, 64, K2{7, 1}, K2{3, 0})),
                                                  tnn::AnyModule(cbn(64, 96, 3))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0->forward(x), branch1->forward(x)}, 1); }
    tnn::Sequential branch0, branch1;
};
TORCH_MODULE(V4Mixed4a);

class V4Mixed5aImpl : public tnn::Module {
public:
    V4Mixed5aImpl() : conv(register_module("conv", cbn(192, 192, 3, 2))) {}
    Tensor forward(const Tensor& x) { return torch::cat({conv(x), torch::max_pool2d(x, 3, 2)}, 1); }
    ConvBn conv;
};
TORCH_MODULE(V4Mixed5a);

class InceptionV4Net final : public Backbone {
public:
    InceptionV4Net(std::int64_t in_channels, std::int64_t num_classes) {
        features->push_back(cbn(in_channels, 32, 3, 2));
        features->push_back(cbn(32, 32, 3));
        features->push_back(cbn(32, 64, 3, 1, 1));
        features->push_back(V4Mixed3a());
        features->push_back(V4Mixed4a());
        features->push_back(V4Mixed5a());
        for (int i = 0; i < 4; ++i) features->push_back(V4InceptionA());
        features->push_back(V4ReductionA());
        for (int i = 0; i < 7; ++i) features->push_back(V4InceptionB());
        features->push_back(V4ReductionB());
        for (int i = 0; i < 3; ++i) features->push_back(V4InceptionC());
        register_module("features", features);
        last_linear = register_module("last_linear", tnn::Linear(1536, num_classes));
    }

    Tensor forward(Tensor x) override { return last_linear(global_pool(features->forward(x))); }
    std::int64_t min_input_size() const override { return 75; }

private:
    tnn::Sequential features;
    tnn::Linear last_linear{nullptr};
};

// ---------------------------------------------------------------------------
// Inception-ResNet-v2 (timm layout).

class IrMixed5bImpl : public tnn::Module {
public:
    IrMixed5bImpl()
        : branch0(register_module("branch0", cbn(192, 96, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(192, 48, 1)), tnn::AnyModule(cbn(48, 64, 5, 1, 2))}))),
          branch2(register_module("branch2", seq({tnn::AnyModule(cbn(192, 64, 1)), tnn::AnyModule(cbn(64, 96, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(96, 96, 3, 1, 1))}))),
          branch3(register_module("branch3", seq({tnn::AnyModule(avg_pool_same(false)), tnn::AnyModule(cbn(192, 64, 1))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0(x), branch1->forward(x), branch2->forward(x), branch3->forward(x)}, 1); }

    ConvBn branch0;
    tnn::Sequential branch1, branch2, branch3;
};
TORCH_MODULE(IrMixed5b);

class Block35Impl : public tnn::Module {
public:
    explicit Block35Impl(double scale)
        : scale_(scale),
          branch0(register_module("branch0", cbn(320, 32, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(320, 32, 1)), tnn::AnyModule(cbn(32, 32, 3, 1, 1))}))),
          branch2(register_module("branch2", seq({tnn::AnyModule(cbn(320, 32, 1)), tnn::AnyModule(cbn(32, 48, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(48, 64, 3, 1, 1))}))),
          conv2d(register_module("conv2d", tnn::Conv2d(tnn::Conv2dOptions(128, 320, 1)))) {}
    Tensor forward(const Tensor& x) {
        const Tensor out = conv2d(torch::cat({branch0(x), branch1->forward(x), branch2->forward(x)}, 1));
        return torch::relu(out * scale_ + x);
    }

    double scale_;
    ConvBn branch0;
    tnn::Sequential branch1, branch2;
    tnn::Conv2d conv2d;
};
TORCH_MODULE(Block35);

class IrMixed6aImpl : public tnn::Module {
public:
    IrMixed6aImpl()
        : branch0(register_module("branch0", cbn(320, 384, 3, 2))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(320, 256, 1)), tnn::AnyModule(cbn(256, 256, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(256, 384, 3, 2))}))) {}
    Tensor forward(const Tensor& x) { return torch::cat({branch0(x), branch1->forward(x), torch::max_pool2d(x, 3, 2)}, 1); }

    ConvBn branch0;
    tnn::Sequential branch1;
};
TORCH_MODULE(IrMixed6a);

class Block17Impl : public tnn::Module {
public:
    explicit Block17Impl(double scale)
        : scale_(scale),
          branch0(register_module("branch0", cbn(1088, 192, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(1088, 128, 1)),
                                                  tnn::AnyModule(cbn(128, 160, K2{1, 7}, K2{0, 3})),
                                                  tnn::AnyModule(cbn(160, 192, K2{7, 1}, K2{3, 0}))}))),
          conv2d(register_module("conv2d", tnn::Conv2d(tnn::Conv2dOptions(384, 1088, 1)))) {}
    Tensor forward(const Tensor& x) {
        const Tensor out = conv2d(torch::cat({branch0(x), branch1->forward(x)}, 1));
        return torch::relu(out * scale_ + x);
    }

    double scale_;
    ConvBn branch0;
    tnn::Sequential branch1;
    tnn::Conv2d conv2d;
};
TORCH_MODULE(Block17);

class IrMixed7aImpl : public tnn::Module {
public:
    IrMixed7aImpl()
        : branch0(register_module("branch0", seq({tnn::AnyModule(cbn(1088, 256, 1)), tnn::AnyModule(cbn(256, 384, 3, 2))}))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(1088, 256, 1)), tnn::AnyModule(cbn(256, 288, 3, 2))}))),
          branch2(register_module("branch2", seq({tnn::AnyModule(cbn(1088, 256, 1)), tnn::AnyModule(cbn(256, 288, 3, 1, 1)),
                                                  tnn::AnyModule(cbn(288, 320, 3, 2))}))) {}
    Tensor forward(const Tensor& x) {
        return torch::cat({branch0->forward(x), branch1->forward(x), branch2->forward(x), torch::max_pool2d(x, 3, 2)}, 1);
    }

    tnn::Sequential branch0, branch1, branch2;
};
TORCH_MODULE(IrMixed7a);

class Block8Impl : public tnn::Module {
public:
    Block8Impl(double scale, bool no_relu)
        : scale_(scale),
          relu_(!no_relu),
          branch0(register_module("branch0", cbn(2080, 192, 1))),
          branch1(register_module("branch1", seq({tnn::AnyModule(cbn(2080, 192, 1)),
                                                  tnn::AnyModule(cbn(192, 224, K2{1, 3}, K2{0, 1})),
                                                  tnn::AnyModule(cbn(224, 256, K2{3, 1}, K2{1, 0}))}))),
          conv2d(register_module("conv2d", tnn::Conv2d(tnn::Conv2dOptions(448, 2080, 1)))) {}
    Tensor forward(const Tensor& x) {
        Tensor out = conv2d(torch::cat({branch0(x), branch1->forward(x)}, 1)) * scale_ + x;
        return relu_ ? torch::relu(out) : out;
    }

    double scale_;
    bool relu_;
    ConvBn branch0;
    tnn::Sequential branch1;
    tnn::Conv2d conv2d;
};
TORCH_MODULE(Block8);

class InceptionResNetV2Net final : public Backbone {
public:
    InceptionResNetV2Net(std::int64_t in_channels, std::int64_t num_classes)
        : conv2d_1a(register_module("conv2d_1a", cbn(in_channels, 32, 3, 2))),
          conv2d_2a(register_module("conv2d_2a", cbn(32, 32, 3))),
          conv2d_2b(register_module("conv2d_2b", cbn(32, 64, 3, 1, 1))),
          conv2d_3b(register_module("conv2d_3b", cbn(64, 80, 1))),
          conv2d_4a(register_module("conv2d_4a", cbn(80, 192, 3))),
          mixed_5b(register_module("mixed_5b", IrMixed5b())),
          mixed_6a(register_module("mixed_6a", IrMixed6a())),
          mixed_7a(register_module("mixed_7a", IrMixed7a())),
          block8(register_module("block8", Block8(1.0, true))),
          conv2d_7b(register_module("conv2d_7b", cbn(2080, 1536, 1))),
          classif(register_module("classif", tnn::Linear(1536, num_classes))) {
        for (int i = 0; i < 10; ++i) repeat->push_back(Block35(0.17));
        for (int i = 0; i < 20; ++i) repeat_1->push_back(Block17(0.10));
        for (int i = 0; i < 9; ++i) repeat_2->push_back(Block8(0.20, false));
        register_module("repeat", repeat);
        register_module("repeat_1", repeat_1);
        register_module("repeat_2", repeat_2);
    }

    Tensor forward(Tensor x) override {
        x = conv2d_2b(conv2d_2a(conv2d_1a(x)));
        x = torch::max_pool2d(x, 3, 2);
        x = conv2d_4a(conv2d_3b(x));
        x = torch::max_pool2d(x, 3, 2);
        x = repeat->forward(mixed_5b(x));
        x = repeat_1->forward(mixed_6a(x));
        x = repeat_2->forward(mixed_7a(x));
        x = conv2d_7b(block8(x));
        return classif(global_pool(x));
    }
    std::int64_t min_input_size() const override { return 75; }

private:
    ConvBn conv2d_1a, conv2d_2a, conv2d_2b, conv2d_3b, conv2d_4a;
    IrMixed5b mixed_5b;
    tnn::Sequential repeat, repeat_1, repeat_2;
    IrMixed6a mixed_6a;
    IrMixed7a mixed_7a;
    Block8 block8;
    ConvBn conv2d_7b;
    tnn::Linear classif;
};

// ---------------------------------------------------------------------------
// ResNeXt (torchvision layout).

struct ResNeXtConfig {
    std::vector<std::int64_t> layers{3, 4, 6, 3};
    std::vector<std::int64_t> planes{64, 128, 256, 512};
    std::int64_t groups = 32;
    std::int64_t width_per_group = 4;
    std::int64_t stem_channels = 64;
    std::int64_t min_input = 32;
};

class BottleneckImpl : public tnn::Module {
public:
    static constexpr std::int64_t kExpansion = 4;

    BottleneckImpl(std::int64_t in, std::int64_t planes, std::int64_t stride, std::int64_t groups, std::int64_t width_per_group) {
        const std::int64_t width = planes * width_per_group / 64 * groups;
        conv1 = register_module("conv1", tnn::Conv2d(tnn::Conv2dOptions(in, width, 1).bias(false)));
        bn1 = register_module("bn1", tnn::BatchNorm2d(width));
        conv2 = register_module("conv2", tnn::Conv2d(tnn::Conv2dOptions(width, width, 3)
                                                         .stride(stride)
                                                         .padding(1)
                                                         .groups(groups)
                                                         .bias(false)));
        bn2 = register_module("bn2", tnn::BatchNorm2d(width));
        conv3 = register_module("conv3", tnn::Conv2d(tnn::Conv2dOptions(width, planes * kExpansion, 1).bias(false)));
        bn3 = register_module("bn3", tnn::BatchNorm2d(planes * kExpansion));
        if (stride != 1 || in != planes * kExpansion) {
            downsample = tnn::Sequential(
                tnn::Conv2d(tnn::Conv2dOptions(in, planes * kExpansion, 1).stride(stride).bias(false)),
                tnn::BatchNorm2d(planes * kExpansion));
            register_module("downsample", downsample);
        }
    }

    Tensor forward(const Tensor& x) {
        Tensor out = torch::relu(bn1(conv1(x)));
        out = torch::relu(bn2(conv2(out)));
        out = bn3(conv3(out));
        return torch::relu(out + (downsample ? downsample->forward(x) : x));
    }

    tnn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    tnn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    tnn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

class ResNeXt final : public Backbone {
public:
    ResNeXt(std::int64_t in_channels, std::int64_t num_classes, ResNeXtConfig config) : config_(std::move(config)) {
        conv1 = register_module("conv1", tnn::Conv2d(tnn::Conv2dOptions(in_channels, config_.stem_channels, 7)
                                                         .stride(2)
                                                         .padding(3)
                                                         .bias(false)));
        bn1 = register_module("bn1", tnn::BatchNorm2d(config_.stem_channels));
        std::int64_t in = config_.stem_channels;
        for (std::size_t i = 0; i < config_.layers.size(); ++i) {
            tnn::Sequential layer;
            for (std::int64_t b = 0; b < config_.layers[i]; ++b) {
                const std::int64_t stride = (i > 0 && b == 0) ? 2 : 1;
                layer->push_back(Bottleneck(in, config_.planes[i], stride, config_.groups, config_.width_per_group));
                in = config_.planes[i] * BottleneckImpl::kExpansion;
            }
            stages.push_back(register_module("layer" + std::to_string(i + 1), layer));
        }
        fc = register_module("fc", tnn::Linear(in, num_classes));
        for (auto& m : modules(false)) {
            if (auto* conv = m->as<tnn::Conv2d>())
                tnn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
        }
    }

    Tensor forward(Tensor x) override {
        x = torch::max_pool2d(torch::relu(bn1(conv1(x))), 3, 2, 1);
        for (auto& s : stages) x = s->forward(x);
        return fc(global_pool(x));
    }
    std::int64_t min_input_size() const override { return config_.min_input; }

private:
    ResNeXtConfig config_;
    tnn::Conv2d conv1{nullptr};
    tnn::BatchNorm2d bn1{nullptr};
    std::vector<tnn::Sequential> stages;
    tnn::Linear fc{nullptr};
};

// ---------------------------------------------------------------------------
// Toy Inception family: shared stem and head, variant-specific modules.

enum class ToyInceptionVariant { V3, V4, Residual };

/// Factorised 5x5 / double-3x3 mixing in the Inception-v3 style.
class ToyMixV3Impl : public tnn::Module {
public:
    explicit ToyMixV3Impl(std::int64_t in)
        : b1x1(register_module("b1x1", cbn(in, 16, 1, 1, 0, 1e-5))),
          b5x5_1(register_module("b5x5_1", cbn(in, 12, 1, 1, 0, 1e-5))),
          b5x5_2(register_module("b5x5_2", cbn(12, 16, 5, 1, 2, 1e-5))),
          bdbl_1(register_module("bdbl_1", cbn(in, 16, 1, 1, 0, 1e-5))),
          bdbl_2(register_module("bdbl_2", cbn(16, 24, 3, 1, 1, 1e-5))),
          bdbl_3(register_module("bdbl_3", cbn(24, 24, 3, 1, 1, 1e-5))),
          bpool(register_module("bpool", cbn(in, 8, 1, 1, 0, 1e-5))) {}
    Tensor forward(const Tensor& x) {
        return torch::cat({b1x1(x), b5x5_2(b5x5_1(x)), bdbl_3(bdbl_2(bdbl_1(x))), bpool(torch::avg_pool2d(x, 3, 1, 1))}, 1);
    }
    static constexpr std::int64_t kOut = 64;
    ConvBn b1x1, b5x5_1, b5x5_2, bdbl_1, bdbl_2, bdbl_3, bpool;
};
TORCH_MODULE(ToyMixV3);

/// Uniform 3x3 towers with exclusive-pad average pooling, as in Inception-v4.
class ToyMixV4Impl : public tnn::Module {
public:
    explicit ToyMixV4Impl(std::int64_t in)
        : b0(register_module("b0", cbn(in, 16, 1, 1, 0, 1e-5))),
          b1_1(register_module("b1_1", cbn(in, 16, 1, 1, 0, 1e-5))),
          b1_2(register_module("b1_2", cbn(16, 24, 3, 1, 1, 1e-5))),
          b2_1(register_module("b2_1", cbn(in, 16, 1, 1, 0, 1e-5))),
          b2_2(register_module("b2_2", cbn(16, 24, 3, 1, 1, 1e-5))),
          b2_3(register_module("b2_3", cbn(24, 24, 3, 1, 1, 1e-5))),
          b3(register_module("b3", cbn(in, 16, 1, 1, 0, 1e-5))) {}
    Tensor forward(const Tensor& x) {
        return torch::cat({b0(x), b1_2(b1_1(x)), b2_3(b2_2(b2_1(x))),
                           b3(torch::avg_pool2d(x, 3, 1, 1, /*ceil_mode=*/false, /*count_include_pad=*/false))},
                          1);
    }
    static constexpr std::int64_t kOut = 80;
    ConvBn b0, b1_1, b1_2, b2_1, b2_2, b2_3, b3;
};
TORCH_MODULE(ToyMixV4);

/// Scaled residual Inception block (Block35 pattern).
class ToyMixResImpl : public tnn::Module {
public:
    explicit ToyMixResImpl(std::int64_t in)
        : proj(register_module("proj", cbn(in, 48, 1, 1, 0, 1e-5))),
          b0(register_module("b0", cbn(48, 16, 1, 1, 0, 1e-5))),
          b1_1(register_module("b1_1", cbn(48, 16, 1, 1, 0, 1e-5))),
          b1_2(register_module("b1_2", cbn(16, 16, 3, 1, 1, 1e-5))),
          b2_1(register_module("b2_1", cbn(48, 16, 1, 1, 0, 1e-5))),
          b2_2(register_module("b2_2", cbn(16, 24, 3, 1, 1, 1e-5))),
          b2_3(register_module("b2_3", cbn(24, 32, 3, 1, 1, 1e-5))),
          up(register_module("up", tnn::Conv2d(tnn::Conv2dOptions(64, 48, 1)))) {}
    Tensor forward(const Tensor& x) {
        const Tensor base = proj(x);
        const Tensor mixed = torch::cat({b0(base), b1_2(b1_1(base)), b2_3(b2_2(b2_1(base)))}, 1);
        return torch::relu(base + 0.2 * up(mixed));
    }
    static constexpr std::int64_t kOut = 48;
    ConvBn proj, b0, b1_1, b1_2, b2_1, b2_2, b2_3;
    tnn::Conv2d up;
};
TORCH_MODULE(ToyMixRes);

class ToyInception final : public Backbone {
public:
    ToyInception(std::int64_t in_channels, std::int64_t num_classes, ToyInceptionVariant variant)
        : stem(register_module("stem", cbn(in_channels, 24, 3, 2, 1, 1e-5))) {
        auto make = [&](std::int64_t in) -> std::pair<tnn::AnyModule, std::int64_t> {
            switch (variant) {
                case ToyInceptionVariant::V3: return {tnn::AnyModule(ToyMixV3(in)), ToyMixV3Impl::kOut};
                case ToyInceptionVariant::V4: return {tnn::AnyModule(ToyMixV4(in)), ToyMixV4Impl::kOut};
                default: return {tnn::AnyModule(ToyMixRes(in)), ToyMixResImpl::kOut};
            }
        };
        auto [m1, c1] = make(24);
        auto [m2, c2] = make(c1);
        mix1 = std::move(m1);
        mix2 = std::move(m2);
        register_module("mix1", mix1.ptr());
        register_module("mix2", mix2.ptr());
        head = register_module("head", tnn::Linear(c2, num_classes));
    }

    Tensor forward(Tensor x) override {
        x = torch::max_pool2d(stem(x), 2, 2);
        x = torch::max_pool2d(mix1.forward(x), 2, 2);
        return head(global_pool(mix2.forward(x)));
    }
    std::int64_t min_input_size() const override { return 8; }

private:
    ConvBn stem;
    tnn::AnyModule mix1, mix2;
    tnn::Linear head{nullptr};
};

}  // namespace

std::shared_ptr<Backbone> make_backbone(BackboneKind kind, std::int64_t in_channels, std::int64_t num_classes) {
    if (in_channels < 1 || num_classes < 1) throw Error("backbone", "channel and class counts must be >= 1");
    switch (kind) {
        case BackboneKind::DenseNet161: return std::make_shared<DenseNet>(in_channels, num_classes, DenseNetConfig{});
        case BackboneKind::ToyDense:
            return std::make_shared<DenseNet>(in_channels, num_classes,
                                              DenseNetConfig{8, {3, 3}, 16, 2, 16});
        case BackboneKind::InceptionV3: return std::make_shared<InceptionV3Net>(in_channels, num_classes);
        case BackboneKind::InceptionV4: return std::make_shared<InceptionV4Net>(in_channels, num_classes);
        case BackboneKind::InceptionResNetV2: return std::make_shared<InceptionResNetV2Net>(in_channels, num_classes);
        case BackboneKind::ToyInceptionV3:
            return std::make_shared<ToyInception>(in_channels, num_classes, ToyInceptionVariant::V3);
        case BackboneKind::ToyInceptionV4:
            return std::make_shared<ToyInception>(in_channels, num_classes, ToyInceptionVariant::V4);
        case BackboneKind::ToyInceptionResNet:
            return std::make_shared<ToyInception>(in_channels, num_classes, ToyInceptionVariant::Residual);
        case BackboneKind::ResNeXt50: return std::make_shared<ResNeXt>(in_channels, num_classes, ResNeXtConfig{});
        case BackboneKind::ToyResNeXt:
            return std::make_shared<ResNeXt>(in_channels, num_classes, ResNeXtConfig{{1, 1}, {16, 32}, 4, 16, 16, 16});
    }
    throw Error("backbone", "unhandled backbone kind");
}

std::int64_t parameter_count(const torch::nn::Module& module) {
    std::int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

std::size_t load_state_dict(torch::nn::Module& module, const std::filesystem::path& path, const std::string& prefix) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_state_dict", "cannot open '" + path.string() + "'");
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    torch::IValue value;
    try {
        value = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
        // libtorch's unpickler has no OrderedDict, which is what state_dict() returns
        static const std::string od = "OrderedDict";
        if (std::search(bytes.begin(), bytes.end(), od.begin(), od.end()) != bytes.end())
            throw Error("load_state_dict", "'" + path.string() +
                                               "' holds an OrderedDict; re-save it as torch.save(dict(model.state_dict()))");
        throw Error("load_state_dict", "'" + path.string() + "' is not a torch.save archive: " + e.what_without_backtrace());
    }
    if (!value.isGenericDict()) throw Error("load_state_dict", "archive does not hold a state dict");

    auto params = module.named_parameters(true);
    auto buffers = module.named_buffers(true);
    std::size_t copied = 0;
    torch::NoGradGuard guard;
    for (const auto& item : value.toGenericDict()) {
        if (!item.key().isString() || !item.value().isTensor()) continue;
        std::string name = item.key().toStringRef();
        if (!prefix.empty()) {
            if (name.rfind(prefix, 0) != 0) continue;
            name = name.substr(prefix.size());
        }
        const torch::Tensor src = item.value().toTensor();
        torch::Tensor* dst = params.find(name);
        if (!dst) dst = buffers.find(name);
        if (!dst || dst->sizes() != src.sizes()) continue;
        dst->copy_(src.to(dst->dtype()));
        ++copied;
    }
    return copied;
}

}  // namespace cov3d::nn
