#include <cmath>

#include <torch/torch.h>

#include "cov3d/checkpoint.hpp"
#include "cov3d/data_model.hpp"
#include "cov3d/ensemble_eval.hpp"
#include "cov3d/pipeline.hpp"
#include "cov3d/training.hpp"
#include "test_support.hpp"

using namespace cov3d;
using cov3d::testing::TempDir;
using cov3d::testing::expect_error;

namespace {

// Bright vs dark 16x16 images with noise; label 1 is bright.
std::vector<Sample> brightness_samples(int n, std::uint64_t seed, int classes = 2) {
    torch::manual_seed(seed);
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        const int label = i % classes;
        const float level = 0.2f + 0.6f * static_cast<float>(label) / static_cast<float>(classes - 1);
        out.push_back({{torch::clamp(level + 0.1f * torch::randn({1, 16, 16}), 0.0, 1.0)}, label});
    }
    return out;
}

std::shared_ptr<nn::Classifier> small_model(std::uint64_t seed, int classes = 2) {
    return nn::make_classifier({{"kind", "image"}, {"backbone", "toy-dense"}, {"in_channels", 1}, {"num_classes", classes}},
                               seed);
}

TrainConfig quick_config(int epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 8;
    c.lr0 = 1e-3;
    c.lr_decay_epochs = {};
    return c;
}

bool same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!torch::equal(pa[i], pb[i])) return false;
    return true;
}

}  // namespace

TEST(LrSchedule, PaperScheduleExamples) {
    TrainConfig c;  // lr0 1e-4, decay at 15 and 30, factor 0.1
    c.epochs = 40;
    EXPECT_EQ(lr_at_epoch(c, 0), 1e-4);
    EXPECT_EQ(lr_at_epoch(c, 14), 1e-4);
    EXPECT_EQ(lr_at_epoch(c, 15), 1e-5);
    EXPECT_EQ(lr_at_epoch(c, 29), 1e-5);
    EXPECT_EQ(lr_at_epoch(c, 30), 1e-6);
    EXPECT_EQ(lr_at_epoch(c, 39), 1e-6);
    expect_error([&] { lr_at_epoch(c, 40); }, "outside");
    expect_error([&] { lr_at_epoch(c, -1); }, "outside");
}

TEST(LrSchedule, PiecewiseConstantAndNonIncreasing) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        TrainConfig c;
        c.epochs = static_cast<int>(rng.integer(1, 60));
        c.lr0 = std::pow(10.0, -rng.uniform(1.0, 5.0));
        c.lr_decay_factor = rng.uniform(0.05, 0.9);
        c.lr_decay_epochs.clear();
        for (int e = 1; e < 70; ++e)
            if (rng.uniform() < 0.08) c.lr_decay_epochs.push_back(e);
        for (int e = 0; e < c.epochs; ++e) {
            int decays = 0;
            for (int d : c.lr_decay_epochs) decays += d <= e;
            const double oracle = c.lr0 * std::pow(c.lr_decay_factor, decays);
            EXPECT_NEAR(lr_at_epoch(c, e), oracle, 1e-13 * oracle);
            if (e > 0) EXPECT_LE(lr_at_epoch(c, e), lr_at_epoch(c, e - 1));
        }
    }
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
    TrainConfig c;
    c.batch_size = 3;
    c.epochs = 7;
    c.optimizer = OptimizerId::Sgd;
    c.shuffle_seed = 99;
    c.class_weighting = true;
    const auto back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.effective_shuffle_seed(), 99u);
    EXPECT_EQ(TrainConfig{}.effective_shuffle_seed(), 0u);

    const auto bad = [](nlohmann::json j, const std::string& needle) {
        expect_error([&] { TrainConfig::from_json(j); }, needle);
    };
    bad({{"batch_size", 0}}, "batch_size");
    bad({{"epochs", -1}}, "epochs");
    bad({{"lr0", 0.0}}, "lr0");
    bad({{"lr_decay_epochs", {5, 5}}}, "strictly increasing");
    bad({{"lr_decay_epochs", {0}}}, ">= 1");
    bad({{"optimizer_id", "rmsprop"}}, "rmsprop");
    bad({{"loss_id", "focal"}}, "focal");
    bad({{"lr", 1e-3}}, "unknown key 'lr'");
    bad({{"epochs", "ten"}}, "train_config");
    bad(nlohmann::json::array(), "JSON object");
}

TEST(TrainModel, ZeroEpochsKeepsInitialWeights) {
    auto m = small_model(5), ref = small_model(5);
    const auto out = train_model(*m, {brightness_samples(8, 1), {}}, quick_config(0));
    EXPECT_TRUE(out.history.rows.empty());
    EXPECT_EQ(out.selected_epoch, -1);
    EXPECT_TRUE(same_parameters(*m, *ref));
    EXPECT_EQ(out.history.to_csv(), "epoch,loss,lr,train_metric,val_metric\n");
}

TEST(TrainModel, SameSeedGivesIdenticalHistory) {
    const auto data = Dataset{brightness_samples(12, 2), brightness_samples(6, 3)};
    auto cfg = quick_config(3);
    cfg.seed = 11;
    auto a = small_model(cfg.seed), b = small_model(cfg.seed);
    const auto ha = train_model(*a, data, cfg).history;
    const auto hb = train_model(*b, data, cfg).history;
    EXPECT_EQ(ha.loss_column(), hb.loss_column());
    EXPECT_TRUE(same_parameters(*a, *b));

    auto shuffled = cfg;
    shuffled.shuffle_seed = 12;
    auto c = small_model(cfg.seed);
    EXPECT_NE(train_model(*c, data, shuffled).history.loss_column(), ha.loss_column());
}

TEST(TrainModel, HistoryLrColumnFollowsSchedule) {
    auto cfg = quick_config(5);
    cfg.lr_decay_epochs = {2, 4};
    auto m = small_model(1);
    const auto h = train_model(*m, {brightness_samples(8, 1), {}}, cfg).history;
    ASSERT_EQ(h.rows.size(), 5u);
    for (int e = 0; e < 5; ++e) {
        EXPECT_EQ(h.rows[static_cast<std::size_t>(e)].epoch, e);
        EXPECT_EQ(h.lr_column()[static_cast<std::size_t>(e)], lr_at_epoch(cfg, e));
    }
    EXPECT_EQ(h.lr_column(), (std::vector<double>{1e-3, 1e-3, 1e-4, 1e-4, 1e-5}));
}

TEST(TrainModel, RejectsMissingClassesAndBadLabels) {
    auto m = small_model(0, 3);
    auto data = brightness_samples(9, 1, 3);
    auto two = data;
    std::erase_if(two, [](const Sample& s) { return s.label == 2; });
    expect_error([&] { train_model(*m, {two, {}}, quick_config(1)); }, "missing class 2");
    auto bad = data;
    bad[0].label = 3;
    expect_error([&] { train_model(*m, {bad, {}}, quick_config(1)); }, "out of range");
    expect_error([&] { train_model(*m, {{}, {}}, quick_config(1)); }, "empty dataset");
}

TEST(TrainModel, NonFiniteInputIsReported) {
    auto m = small_model(0);
    auto data = brightness_samples(8, 1);
    data[3].inputs[0][0][2][2] = std::nanf("");
    EXPECT_THROW(train_model(*m, {data, {}}, quick_config(1)), Error);
}

TEST(TrainModel, FullBatchLossDecreasesOverFirstSteps) {
    auto cfg = quick_config(5);
    cfg.batch_size = 16;  // one step per epoch, so epoch loss is the step loss
    auto m = small_model(4);
    const auto losses = train_model(*m, {brightness_samples(16, 8), {}}, cfg).history.loss_column();
    ASSERT_EQ(losses.size(), 5u);
    EXPECT_LT(losses.back(), losses.front());
}

TEST(TrainModel, KeepsBestValidationEpoch) {
    auto cfg = quick_config(6);
    cfg.lr0 = 3e-3;
    auto m = small_model(2);
    const Dataset data{brightness_samples(16, 4), brightness_samples(10, 5)};
    const auto out = train_model(*m, data, cfg);
    int best = 0;
    for (std::size_t e = 0; e < out.history.rows.size(); ++e)
        if (*out.history.rows[e].val_metric > *out.history.rows[static_cast<std::size_t>(best)].val_metric)
            best = static_cast<int>(e);
    EXPECT_EQ(out.selected_epoch, best);

    std::vector<int> truth;
    for (const auto& s : data.val) truth.push_back(s.label);
    EXPECT_DOUBLE_EQ(macro_f1(predict_classes(*m, data.val), truth, 2), *out.history.rows[static_cast<std::size_t>(best)].val_metric);
}

namespace {

std::vector<Sample> detection_samples(int per_class, std::uint64_t seed) {
    TempDir dir;
    SyntheticSpec spec;
    spec.n_scans_per_class = {{ScanClass::NonCovid, per_class}, {ScanClass::Covid, per_class}};
    spec.image_size = {64, 64};
    spec.slice_count_range = {40, 60};
    spec.seed = seed;
    const Manifest manifest = generate_synthetic_dataset(spec, dir.path());
    pipeline::Preprocessor pre;
    pre.preprocess.task = pipeline::Task::Detect;
    pre.preprocess.spatial = 32;
    std::vector<Sample> out;
    for (const auto& e : manifest.entries()) {
        auto in = pre.run(manifest.resolve(e));
        out.push_back({in.inputs, e.detection_label == DetectionLabel::Covid ? 1 : 0});
    }
    return out;
}

}  // namespace

TEST(TrainModel, ToyDetectionReachesFullAccuracyOnEightScans) {
    const auto train = detection_samples(4, 33);
    auto cfg = quick_config(30);
    cfg.batch_size = 4;
    cfg.seed = 1;
    auto m = nn::make_classifier(nn::DetectionModel(nn::BackboneKind::ToyDense).architecture(), cfg.seed);
    train_model(*m, {train, {}}, cfg);
    const auto preds = predict_classes(*m, train);
    for (std::size_t i = 0; i < train.size(); ++i) EXPECT_EQ(preds[i], train[i].label) << "scan " << i;
}

TEST(TrainModel, ToyDetectionOverfitsSixteenSyntheticScans) {
    const auto train = detection_samples(8, 21);
    auto cfg = quick_config(30);
    cfg.batch_size = 4;
    cfg.seed = 3;
    auto m = nn::make_classifier(nn::DetectionModel(nn::BackboneKind::ToyDense).architecture(), cfg.seed);
    const auto out = train_model(*m, {train, {}}, cfg);
    EXPECT_GE(out.history.rows.back().train_metric, 95.0);
}

TEST(Checkpoint, SaveLoadRoundTripPreservesOutputs) {
    TempDir dir;
    auto m = small_model(6);
    train_model(*m, {brightness_samples(8, 1), {}}, quick_config(2));
    CheckpointMeta meta;
    meta.architecture = m->architecture();
    meta.task = "filter";
    meta.seed = 6;
    meta.epoch = 1;
    meta.set_config(quick_config(2).to_json());
    save_checkpoint(*m, meta, dir / "ck");
    EXPECT_TRUE(checkpoint_exists(dir / "ck"));
    EXPECT_EQ(checkpoint_stem(dir / "ck.pt"), dir / "ck");
    EXPECT_EQ(checkpoint_stem(dir / "ck.json"), dir / "ck");

    const auto loaded = load_classifier(dir / "ck.pt");
    EXPECT_EQ(loaded.meta.to_json(), meta.to_json());
    EXPECT_EQ(loaded.meta.config_describe.substr(0, 4), "cfg-");
    EXPECT_EQ(loaded.meta.config_describe.size(), 16u);
    const auto samples = brightness_samples(6, 9);
    EXPECT_EQ(predict_probabilities(*m, samples), predict_probabilities(*loaded.model, samples));
    expect_error([&] { load_classifier(dir / "nope"); }, "nope");
}
