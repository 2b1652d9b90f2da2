#include <algorithm>

#include "cov3d/slice_filter.hpp"
#include "test_support.hpp"

using namespace cov3d;
using cov3d::testing::TempDir;
using cov3d::testing::expect_error;

namespace {

// Scorer that returns a fixed probability per slice, looked up by the
// slice's first pixel (which the tests set to the slice position).
class TableScorer final : public SliceScorer {
public:
    explicit TableScorer(std::vector<double> p) : p_(std::move(p)) {}
    std::vector<double> lung_probabilities(std::span<const Image> slices) override {
        std::vector<double> out;
        for (const auto& s : slices) out.push_back(p_.at(static_cast<std::size_t>(s.pixels[0])));
        return out;
    }

private:
    std::vector<double> p_;
};

std::vector<Image> numbered_slices(std::size_t n) {
    std::vector<Image> out;
    for (std::size_t i = 0; i < n; ++i) {
        Image im(4, 4, 0.0f);
        im.pixels[0] = static_cast<float>(i);
        out.push_back(im);
    }
    return out;
}

struct FilterData {
    std::vector<LabeledSlice> train;
    std::vector<LabeledSlice> heldout;
};

// Six training scans and two held-out scans from the synthetic generator.
const FilterData& filter_data() {
    static const FilterData data = [] {
        TempDir dir;
        SyntheticSpec spec;
        spec.n_scans_per_class = {{ScanClass::NonCovid, 4}, {ScanClass::Covid, 4}};
        spec.image_size = {64, 64};
        spec.slice_count_range = {30, 40};
        spec.seed = 5;
        const Manifest m = generate_synthetic_dataset(spec, dir.path());
        FilterData d;
        const auto& entries = m.entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto part = labeled_slices_for(m.resolve(entries[i]));
            auto& dst = (i == 3 || i == 7) ? d.heldout : d.train;
            dst.insert(dst.end(), part.begin(), part.end());
        }
        return d;
    }();
    return data;
}

TrainConfig filter_train_config() {
    TrainConfig c;
    c.epochs = 5;
    c.batch_size = 16;
    c.lr0 = 1e-3;
    c.lr_decay_epochs = {};
    c.seed = 2;
    return c;
}

const SliceFilterTrained& trained_filter() {
    static SliceFilterTrained t = train_slice_filter(filter_data().train, filter_train_config());
    return t;
}

std::vector<Image> images_of(const std::vector<LabeledSlice>& s) {
    std::vector<Image> out;
    for (const auto& x : s) out.push_back(x.image);
    return out;
}

}  // namespace

TEST(SelectSlices, ThresholdIsInclusiveAndOrderPreserving) {
    const std::vector<double> p{0.9, 0.2, 0.6, 0.5, 0.49};
    const auto r = select_slices(p, 0.5);
    EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 2, 3}));
    EXPECT_FALSE(r.fallback);
}

TEST(SelectSlices, AllLungKeepsEverything) {
    std::vector<Image> slices = numbered_slices(6);
    TableScorer scorer(std::vector<double>(6, 1.0));
    const auto r = filter_slices(slices, scorer, 0.5);
    EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
    EXPECT_FALSE(r.fallback);
}

TEST(SelectSlices, NoLungFallsBackToAllSlices) {
    std::vector<Image> slices = numbered_slices(5);
    TableScorer scorer(std::vector<double>(5, 0.0));
    const auto r = filter_slices(slices, scorer, 0.5);
    EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_TRUE(r.fallback);
}

TEST(SelectSlices, RaisingThresholdOnlyRemovesSlices) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p(static_cast<std::size_t>(rng.integer(1, 40)));
        for (auto& v : p) v = rng.uniform();
        const double t1 = rng.uniform(0.01, 0.98), t2 = rng.uniform(t1, 0.99);
        const auto a = select_slices(p, t1), b = select_slices(p, t2);
        EXPECT_TRUE(std::is_sorted(a.kept.begin(), a.kept.end()));
        if (!b.fallback) {
            ASSERT_FALSE(a.fallback);
            EXPECT_TRUE(std::includes(a.kept.begin(), a.kept.end(), b.kept.begin(), b.kept.end()));
        }
        // Oracle: a plain scan over the probabilities.
        std::vector<std::size_t> oracle;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] >= t1) oracle.push_back(i);
        if (oracle.empty()) {
            EXPECT_TRUE(a.fallback);
            EXPECT_EQ(a.kept.size(), p.size());
        } else {
            EXPECT_EQ(a.kept, oracle);
        }
    }
}

TEST(SelectSlices, RejectsDegenerateThresholds) {
    const std::vector<double> p{0.5};
    expect_error([&] { select_slices(p, 0.0); }, "threshold");
    expect_error([&] { select_slices(p, 1.0); }, "threshold");
    SliceFilterConfig c;
    c.threshold = 1.5;
    EXPECT_THROW(c.validate(), Error);
}

TEST(SliceInput, ResizesToSquareTensor) {
    const auto t = slice_input(Image(30, 50, 0.25f), 64);
    EXPECT_EQ(t.sizes(), (std::vector<std::int64_t>{1, 64, 64}));
    EXPECT_NEAR(t.min().item<float>(), 0.25f, 1e-6);
    EXPECT_NEAR(t.max().item<float>(), 0.25f, 1e-6);
}

TEST(TrainSliceFilter, RejectsEmptyAndSingleClassSets) {
    expect_error([] { train_slice_filter({}, filter_train_config()); }, "empty dataset");
    std::vector<LabeledSlice> lungs(4, LabeledSlice{Image(16, 16, 0.5f), true});
    expect_error([&] { train_slice_filter(lungs, filter_train_config()); }, "single-class training set");
    for (auto& s : lungs) s.is_lung = false;
    expect_error([&] { train_slice_filter(lungs, filter_train_config()); }, "single-class training set");
}

TEST(TrainSliceFilter, FiveEpochsReachHighTrainAccuracy) {
    const auto& t = trained_filter();
    const auto& train = filter_data().train;
    const auto p = t.model->lung_probabilities(images_of(train));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < train.size(); ++i) correct += (p[i] >= 0.5) == train[i].is_lung;
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(train.size()), 0.95);
    EXPECT_EQ(t.history.rows.size(), 5u);
    EXPECT_EQ(t.meta.task, "filter");
}

TEST(TrainSliceFilter, HeldOutLungRecall) {
    const auto& held = filter_data().heldout;
    const auto p = trained_filter().model->lung_probabilities(images_of(held));
    std::size_t lungs = 0, found = 0;
    for (std::size_t i = 0; i < held.size(); ++i)
        if (held[i].is_lung) {
            ++lungs;
            found += p[i] >= 0.5;
        }
    ASSERT_GT(lungs, 0u);
    EXPECT_GE(static_cast<double>(found) / static_cast<double>(lungs), 0.9);
}

TEST(TrainSliceFilter, SameSeedSameModel) {
    const auto& data = filter_data();
    std::vector<LabeledSlice> small(data.train.begin(), data.train.begin() + 60);
    auto cfg = filter_train_config();
    cfg.epochs = 2;
    const auto a = train_slice_filter(small, cfg), b = train_slice_filter(small, cfg);
    const auto imgs = images_of(data.heldout);
    EXPECT_EQ(a.model->lung_probabilities(imgs), b.model->lung_probabilities(imgs));
}

TEST(TrainSliceFilter, SaveLoadRoundTrip) {
    TempDir dir;
    auto t = trained_filter();
    save_slice_filter(t, dir / "filter");
    const auto loaded = load_slice_filter(dir / "filter");
    const auto imgs = images_of(filter_data().heldout);
    EXPECT_EQ(loaded->lung_probabilities(imgs), t.model->lung_probabilities(imgs));
    EXPECT_EQ(loaded->config().to_json(), t.model->config().to_json());
}

TEST(LabeledSlices, MissingLabelIsReported) {
    TempDir dir;
    SyntheticSpec spec;
    spec.n_scans_per_class = {{ScanClass::NonCovid, 1}};
    spec.image_size = {32, 32};
    spec.slice_count_range = {5, 5};
    const Manifest m = generate_synthetic_dataset(spec, dir.path());
    const auto scan_dir = m.resolve(m.entries()[0]);
    EXPECT_EQ(labeled_slices_for(scan_dir).size(), 5u);
    cov3d::testing::write_file(slice_labels_for(scan_dir), "index,is_lung\n0,1\n1,0\n");
    expect_error([&] { labeled_slices_for(scan_dir); }, "no label for slice 2");
}
