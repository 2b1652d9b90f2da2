#include <cmath>

#include <torch/torch.h>

#include "cov3d/nn_blocks.hpp"
#include "test_support.hpp"

using namespace cov3d;
using namespace cov3d::nn;
using cov3d::testing::expect_error;
using torch::Tensor;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

// Direct 3x3 cross-correlation, zero padding 1, evaluated at one output pixel.
double direct_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t o, std::int64_t r, std::int64_t c) {
    const auto xa = x.accessor<double, 3>();
    const auto wa = w.accessor<double, 4>();
    double s = b.accessor<double, 1>()[o];
    for (std::int64_t ch = 0; ch < x.size(0); ++ch)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const auto rr = r + dy, cc = c + dx;
                if (rr < 0 || cc < 0 || rr >= x.size(1) || cc >= x.size(2)) continue;
                s += wa[o][ch][dy + 1][dx + 1] * xa[ch][rr][cc];
            }
    return s;
}

/// Checks every weight and bias gradient of `block` against central
/// differences of L = sum(probe * block(x)).
void check_block_gradients(std::int64_t in_channels) {
    torch::manual_seed(static_cast<std::uint64_t>(in_channels));
    ChannelReductionBlock block(in_channels, "b");
    block->to(torch::kFloat64);
    const Tensor x = torch::randn({in_channels, 8, 8}, torch::kFloat64);
    const Tensor probe = torch::randn({3, 8, 8}, torch::kFloat64);
    block->zero_grad();
    (block->forward(x) * probe).sum().backward();

    const double h = 1e-3;
    for (Tensor* p : {&block->conv->weight, &block->conv->bias}) {
        const Tensor g = p->grad().clone().flatten();
        Tensor flat = p->data().view({-1});
        for (std::int64_t i = 0; i < flat.numel(); ++i) {
            torch::NoGradGuard ng;
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = (block->forward(x) * probe).sum().item<double>();
            flat[i] = orig - h;
            const double down = (block->forward(x) * probe).sum().item<double>();
            flat[i] = orig;
            const double numeric = (up - down) / (2 * h);
            ASSERT_LT(rel_err(g[i].item<double>(), numeric), 1e-2) << "in=" << in_channels << " index " << i;
        }
    }
    // Input gradient as well, on a handful of entries.
    Tensor xi = x.clone().requires_grad_(true);
    (block->forward(xi) * probe).sum().backward();
    for (std::int64_t i : {0L, 17L, 63L, in_channels * 64 - 1}) {
        torch::NoGradGuard ng;
        Tensor xp = x.clone(), xm = x.clone();
        xp.view({-1})[i] += h;
        xm.view({-1})[i] -= h;
        const double numeric = ((block->forward(xp) * probe).sum() - (block->forward(xm) * probe).sum()).item<double>() / (2 * h);
        EXPECT_LT(rel_err(xi.grad().view({-1})[i].item<double>(), numeric), 1e-2);
    }
}

}  // namespace

TEST(ChannelReductionBlock, ShapeContract) {
    ChannelReductionBlock b(64, "block");
    EXPECT_EQ(b->forward(torch::rand({64, 224, 224})).sizes(), (std::vector<std::int64_t>{3, 224, 224}));
    EXPECT_EQ(b->forward(torch::rand({2, 64, 5, 7})).sizes(), (std::vector<std::int64_t>{2, 3, 5, 7}));
    EXPECT_EQ(b->conv->options.kernel_size()->at(0), 3);
    EXPECT_EQ(b->conv->options.stride()->at(0), 1);
    EXPECT_TRUE(b->conv->options.bias());
}

TEST(ChannelReductionBlock, PreservesSpatialDimsForArbitrarySizes) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto c = rng.integer(1, 40), h = rng.integer(3, 40), w = rng.integer(3, 40);
        ChannelReductionBlock b(c);
        const Tensor y = b->forward(torch::rand({c, h, w}));
        EXPECT_EQ(y.sizes(), (std::vector<std::int64_t>{3, h, w}));
    }
}

TEST(ChannelReductionBlock, ZeroWeightsGiveZeroOutput) {
    ChannelReductionBlock b(16);
    {
        torch::NoGradGuard ng;
        b->conv->weight.zero_();
        b->conv->bias.zero_();
    }
    EXPECT_EQ(b->forward(torch::rand({16, 9, 9})).abs().max().item<float>(), 0.0f);
}

TEST(ChannelReductionBlock, IdentityKernelMatchesDirectConvolution) {
    ChannelReductionBlock b(1, "block", 1);
    b->to(torch::kFloat64);
    {
        torch::NoGradGuard ng;
        b->conv->weight.zero_();
        b->conv->weight[0][0][1][1] = 1.0;
        b->conv->bias.zero_();
    }
    const Tensor x = torch::rand({1, 12, 10}, torch::kFloat64);
    const Tensor y = b->forward(x);
    for (auto [r, c] : std::vector<std::pair<int, int>>{{1, 1}, {5, 4}, {10, 8}, {6, 2}}) {
        EXPECT_EQ(y[0][r][c].item<double>(), x[0][r][c].item<double>());
        EXPECT_NEAR(y[0][r][c].item<double>(), direct_conv(x, b->conv->weight, b->conv->bias, 0, r, c), 1e-15);
    }
}

TEST(ChannelReductionBlock, RandomKernelMatchesDirectConvolution) {
    torch::manual_seed(3);
    ChannelReductionBlock b(6);
    b->to(torch::kFloat64);
    const Tensor x = torch::randn({6, 7, 9}, torch::kFloat64);
    const Tensor y = b->forward(x);
    for (std::int64_t o = 0; o < 3; ++o)
        for (auto [r, c] : std::vector<std::pair<int, int>>{{0, 0}, {3, 4}, {6, 8}, {0, 8}, {6, 0}})
            EXPECT_NEAR(y[o][r][c].item<double>(), direct_conv(x, b->conv->weight, b->conv->bias, o, r, c), 1e-12);
}

TEST(ChannelReductionBlock, InitIsKaimingUniformFanIn) {
    torch::manual_seed(0);
    ChannelReductionBlock b(64);
    const double fan_in = 64 * 9;
    const double bound = std::sqrt(2.0) * std::sqrt(3.0 / fan_in);
    const Tensor w = b->conv->weight;
    EXPECT_LE(w.abs().max().item<double>(), bound + 1e-7);
    // Uniform(-a, a) has variance a^2 / 3.
    EXPECT_NEAR(w.var().item<double>(), bound * bound / 3.0, 0.1 * bound * bound / 3.0);
    EXPECT_LE(b->conv->bias.abs().max().item<double>(), 1.0 / std::sqrt(fan_in) + 1e-7);
}

TEST(ChannelReductionBlock, GradientsMatchFiniteDifferences) {
    for (std::int64_t c : {64, 32, 16, 6}) check_block_gradients(c);
}

TEST(ReduceChannels, VolumeInterfaceAndMismatch) {
    ChannelReductionBlock b(5, "block2");
    VolumeTensor v({5, 6, 4}, 0.25f);
    v.provenance.scan_id = "s";
    const VolumeTensor out = reduce_channels(b, v);
    EXPECT_EQ(out.shape, (VolumeShape{3, 6, 4}));
    EXPECT_EQ(out.provenance.scan_id, "s");
    VolumeTensor wrong({4, 6, 4});
    expect_error([&] { reduce_channels(b, wrong); }, "[block2] channel mismatch");
    expect_error([&] { b->forward(torch::rand({4, 6, 4})); }, "block2");
}

TEST(DetectionForward, FiniteDeterministicLogits) {
    torch::manual_seed(1);
    DetectionModel m(BackboneKind::ToyDense);
    m.eval();
    const Tensor x = torch::rand({2, 64, 32, 32});
    const Tensor a = m.forward(x), b = m.forward(x);
    EXPECT_EQ(a.sizes(), (std::vector<std::int64_t>{2, 2}));
    EXPECT_TRUE(torch::isfinite(a).all().item<bool>());
    EXPECT_TRUE(torch::equal(a, b));
}

TEST(DetectionForward, NonFiniteInputNamesStage) {
    DetectionModel m(BackboneKind::ToyDense);
    m.eval();
    Tensor x = torch::rand({1, 64, 32, 32});
    x[0][3][4][5] = std::nanf("");
    expect_error([&] { m.forward(x); }, "detection_forward:input");
    {
        torch::NoGradGuard ng;
        m.block->conv->bias[0] = INFINITY;
    }
    expect_error([&] { m.forward(torch::rand({1, 64, 32, 32})); }, "detection_forward:block");
}

TEST(DetectionForward, RejectsUndersizedInput) {
    DetectionModel m(BackboneKind::ToyDense);
    expect_error([&] { m.forward(torch::rand({1, 64, 4, 4})); }, "minimum");
    expect_error([&] { m.forward(torch::rand({1, 63, 32, 32})); }, "channels");
}

TEST(DetectionForward, ImagenetStatsApplyAfterBlock) {
    torch::manual_seed(2);
    DetectionModel plain(BackboneKind::ToyDense);
    torch::manual_seed(2);
    DetectionModel norm(BackboneKind::ToyDense, ChannelStats::imagenet());
    plain.eval();
    norm.eval();
    const Tensor x = torch::rand({1, 64, 32, 32});
    torch::NoGradGuard ng;
    const Tensor reduced = norm.block->forward(x);
    const Tensor mean = torch::tensor({0.485, 0.456, 0.406}).view({1, 3, 1, 1});
    const Tensor std = torch::tensor({0.229, 0.224, 0.225}).view({1, 3, 1, 1});
    const Tensor expected = norm.backbone->forward((reduced - mean) / std);
    EXPECT_TRUE(torch::allclose(norm.forward(x), expected, 1e-5, 1e-6));
    EXPECT_FALSE(torch::allclose(plain.forward(x), norm.forward(x)));
}

TEST(SeverityForward, FourFiniteLogitsForEveryVariant) {
    for (auto kind : {BackboneKind::ToyInceptionV3, BackboneKind::ToyInceptionV4, BackboneKind::ToyInceptionResNet}) {
        SeverityModel m(kind);
        m.eval();
        const Tensor y = m.forward(torch::rand({2, 32, 24, 24}), torch::rand({2, 16, 24, 24}));
        EXPECT_EQ(y.sizes(), (std::vector<std::int64_t>{2, 4}));
        EXPECT_TRUE(torch::isfinite(y).all().item<bool>());
    }
}

TEST(SeverityForward, ZeroBlock3GivesBackboneOfZeroImage) {
    SeverityModel m(BackboneKind::ToyInceptionV3);
    m.eval();
    {
        torch::NoGradGuard ng;
        m.conv_layer->block3->conv->weight.zero_();
        m.conv_layer->block3->conv->bias.zero_();
    }
    torch::NoGradGuard ng;
    const Tensor y = m.forward(torch::rand({1, 32, 20, 20}), torch::rand({1, 16, 20, 20}));
    const Tensor ref = m.backbone->forward(torch::zeros({1, 3, 20, 20}));
    EXPECT_TRUE(torch::equal(y, ref));
}

TEST(SeverityForward, ConcatenationIsBlock1First) {
    torch::manual_seed(5);
    SeverityConvLayer layer;
    const Tensor c = torch::randn({1, 32, 9, 9}), f = torch::randn({1, 16, 9, 9});
    torch::NoGradGuard ng;
    const Tensor a = layer->block1->forward(c), b = layer->block2->forward(f);
    const Tensor expected = layer->block3->forward(torch::cat({a, b}, 1));
    const Tensor swapped = layer->block3->forward(torch::cat({b, a}, 1));
    const Tensor got = layer->forward(c, f);
    EXPECT_TRUE(torch::equal(got, expected));
    EXPECT_FALSE(torch::allclose(got, swapped));
    // Unbatched input goes through the same path.
    EXPECT_TRUE(torch::allclose(layer->forward(c[0], f[0]), expected[0]));
}

TEST(SeverityForward, ShapeErrorsNameTheBlock) {
    SeverityModel m(BackboneKind::ToyInceptionV3);
    expect_error([&] { m.forward(torch::rand({1, 31, 20, 20}), torch::rand({1, 16, 20, 20})); }, "[block1]");
    expect_error([&] { m.forward(torch::rand({1, 32, 20, 20}), torch::rand({1, 15, 20, 20})); }, "[block2]");
    expect_error([&] { m.forward(torch::rand({1, 32, 20, 20}), torch::rand({1, 16, 21, 21})); }, "[block3]");
    // Swapped members fail at block1 rather than silently running.
    expect_error([&] { m.forward(torch::rand({1, 16, 20, 20}), torch::rand({1, 32, 20, 20})); }, "[block1]");
}

TEST(SeverityForward, ReluFlagClampsBlock3Output) {
    torch::manual_seed(4);
    SeverityConvLayer plain(false);
    torch::manual_seed(4);
    SeverityConvLayer relu(true);
    const Tensor c = torch::randn({1, 32, 6, 6}), f = torch::randn({1, 16, 6, 6});
    torch::NoGradGuard ng;
    EXPECT_TRUE(torch::equal(relu->forward(c, f), torch::relu(plain->forward(c, f))));
    EXPECT_LT(plain->forward(c, f).min().item<float>(), 0.0f);
}

TEST(SeverityForward, EveryBlockWeightGetsNonzeroGradientMatchingFiniteDifferences) {
    torch::manual_seed(9);
    SeverityModel m(BackboneKind::ToyInceptionV3);
    m.to(torch::kFloat64);
    m.eval();
    const Tensor c = torch::rand({2, 32, 16, 16}, torch::kFloat64);
    const Tensor f = torch::rand({2, 16, 16, 16}, torch::kFloat64);
    const Tensor probe = torch::randn({2, 4}, torch::kFloat64);
    auto loss = [&] { return (m.forward(c, f) * probe).sum(); };
    m.zero_grad();
    loss().backward();

    Rng rng(12);
    // Through the backbone a 1e-3 step crosses ReLU and pooling kinks.
    const double h = 1e-6;
    for (auto* blk : {&m.conv_layer->block1, &m.conv_layer->block2, &m.conv_layer->block3}) {
        Tensor& w = (*blk)->conv->weight;
        const Tensor g = w.grad().flatten();
        EXPECT_EQ((g == 0).sum().item<std::int64_t>(), 0) << (*blk)->name();
        Tensor flat = w.data().view({-1});
        int checked = 0;
        for (int k = 0; k < 12; ++k) {
            const auto i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(flat.numel())));
            torch::NoGradGuard ng;
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = loss().item<double>();
            flat[i] = orig - h;
            const double down = loss().item<double>();
            flat[i] = orig;
            const double numeric = (up - down) / (2 * h);
            EXPECT_LT(rel_err(g[i].item<double>(), numeric), 1e-2) << (*blk)->name() << " index " << i;
            ++checked;
        }
        EXPECT_EQ(checked, 12);
    }
}

TEST(MakeClassifier, RebuildsFromArchitectureDeterministically) {
    SeverityModel m(BackboneKind::ToyInceptionV4, ChannelStats::imagenet(), true);
    const auto arch = m.architecture();
    EXPECT_EQ(arch["blocks"], nlohmann::json::parse("[[32,3],[16,3],[6,3]]"));
    auto a = make_classifier(arch, 7), b = make_classifier(arch, 7), c = make_classifier(arch, 8);
    EXPECT_EQ(a->architecture(), arch);
    const auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        all_equal = all_equal && torch::equal(pa[i], pb[i]);
        any_diff = any_diff || !torch::equal(pa[i], pc[i]);
    }
    EXPECT_TRUE(all_equal);
    EXPECT_TRUE(any_diff);
    expect_error([] { make_classifier({{"kind", "nope"}, {"backbone", "toy-dense"}, {"num_classes", 2}}, 0); }, "nope");
    expect_error([] { make_classifier({{"kind", "detection"}}, 0); }, "malformed");
}
