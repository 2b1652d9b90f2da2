// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cov3d/data_model.hpp"
#include "cov3d/ensemble_eval.hpp"
#include "cov3d/io.hpp"
#include "cov3d/lung_segmentation.hpp"
#include "cov3d/nn_blocks.hpp"
#include "cov3d/pipeline.hpp"
#include "cov3d/rng.hpp"
#include "cov3d/slice_filter.hpp"
#include "cov3d/training.hpp"
#include "cov3d/volume_assembly.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cov3d;

namespace {

// Collects failed checks for one criterion.
struct Check {
    std::vector<std::string> failures;
    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

struct Scratch {
    fs::path path;
    Scratch() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("cov3d-acc-" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~Scratch() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path operator/(const std::string& s) const { return path / s; }
};

void write_json(const fs::path& p, const json& j) { io::write_text_atomic(p, j.dump(2)); }

// Runs a cmd_* entry point, returning stdout; throws with stderr on failure.
std::string run_cmd(const std::function<int(std::ostream&, std::ostream&)>& cmd) {
    std::ostringstream out, err;
    const int code = cmd(out, err);
    if (code != 0) throw std::runtime_error("command failed (" + std::to_string(code) + "): " + err.str());
    return out.str();
}

std::string last_line(std::string s) {
    while (!s.empty() && s.back() == '\n') s.pop_back();
    const auto p = s.rfind('\n');
    return p == std::string::npos ? s : s.substr(p + 1);
}

fs::path stem_of(const std::string& pt) {
    fs::path p(pt);
    p.replace_extension();
    return p;
}

json read_json(const fs::path& p) { return json::parse(io::read_text(p)); }

fs::path gen(const fs::path& out, const json& spec) {
    fs::create_directories(out.parent_path());
    write_json(out.string() + ".spec.json", spec);
    pipeline::GenArgs a;
    a.out = out;
    a.config = out.string() + ".spec.json";
    run_cmd([&](auto& o, auto& e) { return pipeline::cmd_gen_synthetic(a, o, e); });
    return out / "manifest.csv";
}

fs::path train(pipeline::Task task, const fs::path& manifest, const fs::path& out, const fs::path& config,
               std::uint64_t seed, const std::function<void(pipeline::TrainArgs&)>& extra = {}) {
    pipeline::TrainArgs a;
    a.task = task;
    a.data = manifest;
    a.out = out;
    a.config = config;
    a.seed = seed;
    if (extra) extra(a);
    return last_line(run_cmd([&](auto& o, auto& e) { return pipeline::cmd_train(a, o, e); }));
}

// ---------------------------------------------------------------------------

double brute_macro_f1(const std::vector<int>& p, const std::vector<int>& t, int k) {
    std::vector<std::vector<double>> cm(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k), 0));
    for (std::size_t i = 0; i < p.size(); ++i) cm[static_cast<std::size_t>(t[i])][static_cast<std::size_t>(p[i])] += 1;
    double sum = 0;
    for (int c = 0; c < k; ++c) {
        const auto cu = static_cast<std::size_t>(c);
        double tp = cm[cu][cu], col = 0, row = 0;
        for (int o = 0; o < k; ++o) {
            col += cm[static_cast<std::size_t>(o)][cu];
            row += cm[cu][static_cast<std::size_t>(o)];
        }
        const double prec = col > 0 ? tp / col : 0, rec = row > 0 ? tp / row : 0;
        sum += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
    }
    return 100.0 * sum / k;
}

void ac1(Check& c) {
    Rng rng(1);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = trial % 2 ? 2 : 4;
        const auto n = static_cast<std::size_t>(rng.integer(1, 50));
        std::vector<int> p(n), t(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = static_cast<int>(rng.integer(0, k - 1));
            t[i] = static_cast<int>(rng.integer(0, k - 1));
        }
        worst = std::max(worst, std::abs(macro_f1(p, t, k) - brute_macro_f1(p, t, k)));
    }
    c.expect(worst <= 1e-9, "max deviation from brute force " + std::to_string(worst));

    const std::vector<int> t2{1, 0, 0, 0}, p2{1, 1, 0, 0};
    const double f2 = macro_f1(p2, t2, 2);
    c.expect(std::abs(f2 - (80.0 + 200.0 / 3.0) / 2.0) <= 1e-12 && std::round(f2 * 100) / 100 == 73.33,
             "two-class worked example gave " + std::to_string(f2));
    std::vector<int> t4, p4(16, 0);
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < 4; ++i) t4.push_back(k);
    const double f4 = macro_f1(p4, t4, 4);
    c.expect(std::abs(f4 - 10.0) <= 1e-12, "four-class worked example gave " + std::to_string(f4));
}

void ac2(Check& c) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = trial % 2 ? 2 : 4;
        const auto m = static_cast<std::size_t>(rng.integer(1, 6));
        PredictionTable table;
        table.num_classes = k;
        table.num_members = m;
        PredictionTable permuted = table;
        std::vector<std::size_t> perm(m);
        for (std::size_t i = 0; i < m; ++i) perm[i] = i;
        for (std::size_t i = m; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
        for (int r = 0; r < 10; ++r) {
            PredictionRow row;
            row.scan_id = "scan_" + std::to_string(r);
            for (std::size_t j = 0; j < m; ++j) {
                std::vector<double> logits(static_cast<std::size_t>(k));
                for (auto& v : logits) v = rng.uniform(-4, 4);
                row.members.push_back(softmax(logits));
            }
            row.ensemble = ensemble_average(row.members);
            row.pred = predict_label(row.ensemble);
            table.rows.push_back(row);
            PredictionRow prow = row;
            for (std::size_t j = 0; j < m; ++j) prow.members[j] = row.members[perm[j]];
            prow.ensemble = ensemble_average(prow.members);
            permuted.rows.push_back(prow);
        }
        // Recompute the mean from the CSV text itself.
        std::istringstream csv(format_predictions_csv(table));
        std::string line;
        std::getline(csv, line);
        while (std::getline(csv, line)) {
            std::vector<std::string> f;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) f.push_back(cell);
            for (int cls = 0; cls < k; ++cls) {
                double mean = 0;
                for (std::size_t j = 0; j < m; ++j)
                    mean += std::stod(f[static_cast<std::size_t>(k) + 3 + j * static_cast<std::size_t>(k) + static_cast<std::size_t>(cls)]);
                mean /= static_cast<double>(m);
                const double ens = std::stod(f[1 + static_cast<std::size_t>(cls)]);
                if (std::abs(ens - mean) > 1e-9) {
                    c.expect(false, "ensemble differs from member mean by " + std::to_string(std::abs(ens - mean)));
                    return;
                }
            }
        }
        for (std::size_t r = 0; r < table.rows.size(); ++r)
            if (table.rows[r].ensemble != permuted.rows[r].ensemble) {
                c.expect(false, "permuting members changed the ensemble");
                return;
            }
    }
}

void ac3(Check& c) {
    TrainConfig cfg;  // lr0 1e-4, decay at 15 and 30
    cfg.epochs = 40;
    c.expect(lr_at_epoch(cfg, 0) == 1e-4, "epoch 0");
    c.expect(lr_at_epoch(cfg, 15) == 1e-5, "epoch 15");
    c.expect(lr_at_epoch(cfg, 30) == 1e-6, "epoch 30");

    torch::manual_seed(0);
    std::vector<Sample> data;
    for (int i = 0; i < 8; ++i) data.push_back({{torch::rand({1, 16, 16}) * (0.5 + 0.5 * (i % 2))}, i % 2});
    cfg.batch_size = 8;
    nn::ImageClassifier model(nn::BackboneKind::ToyDense, 1, 2);
    const auto history = train_model(model, {data, {}}, cfg).history;
    c.expect(history.rows.size() == 40, "history has " + std::to_string(history.rows.size()) + " rows");
    for (int e = 0; e < 40 && e < static_cast<int>(history.rows.size()); ++e) {
        const double expected = e < 15 ? 1e-4 : e < 30 ? 1e-5 : 1e-6;
        if (std::memcmp(&history.rows[static_cast<std::size_t>(e)].lr, &expected, sizeof(double)) != 0) {
            c.expect(false, "history lr at epoch " + std::to_string(e));
            break;
        }
    }
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

void ac4(Check& c) {
    for (std::int64_t in : {64, 32, 16, 6}) {
        torch::manual_seed(static_cast<std::uint64_t>(in));
        nn::ChannelReductionBlock block(in, "b" + std::to_string(in));
        block->to(torch::kFloat64);
        const auto x = torch::randn({in, 6, 6}, torch::kFloat64);
        const auto probe = torch::randn({3, 6, 6}, torch::kFloat64);
        block->zero_grad();
        (block->forward(x) * probe).sum().backward();
        double worst = 0;
        for (torch::Tensor* p : {&block->conv->weight, &block->conv->bias}) {
            const auto g = p->grad().clone().flatten();
            auto flat = p->data().view({-1});
            torch::NoGradGuard ng;
            for (std::int64_t i = 0; i < flat.numel(); ++i) {
                const double orig = flat[i].item<double>();
                flat[i] = orig + 1e-3;
                const double up = (block->forward(x) * probe).sum().item<double>();
                flat[i] = orig - 1e-3;
                const double down = (block->forward(x) * probe).sum().item<double>();
                flat[i] = orig;
                worst = std::max(worst, rel_err(g[i].item<double>(), (up - down) / 2e-3));
            }
        }
        c.expect(worst <= 1e-2, std::to_string(in) + "->3 gradient rel error " + std::to_string(worst));
    }

    // Identity kernel on channel 0 vs a direct convolution.
    nn::ChannelReductionBlock block(2, "id", 1);
    block->to(torch::kFloat64);
    {
        torch::NoGradGuard ng;
        block->conv->weight.zero_();
        block->conv->weight[0][0][1][1] = 1.0;
        block->conv->bias.zero_();
    }
    const auto x = torch::rand({2, 7, 9}, torch::kFloat64);
    const auto y = block->forward(x);
    bool same = true;
    const auto xa = x.accessor<double, 3>();
    const auto ya = y.accessor<double, 3>();
    const auto wa = block->conv->weight.accessor<double, 4>();
    for (std::int64_t r = 0; r < 7; ++r)
        for (std::int64_t col = 0; col < 9; ++col) {
            double s = 0;
            for (std::int64_t ch = 0; ch < 2; ++ch)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const auto rr = r + dy, cc = col + dx;
                        if (rr >= 0 && cc >= 0 && rr < 7 && cc < 9) s += wa[0][ch][dy + 1][dx + 1] * xa[ch][rr][cc];
                    }
            same = same && ya[0][r][col] == s && ya[0][r][col] == xa[0][r][col];
        }
    c.expect(same, "identity kernel output differs from the direct convolution");
}

void ac5(Check& c) {
    Scratch dir;
    Rng rng(5);
    const std::vector<int> counts{50, 700, static_cast<int>(rng.integer(51, 699)), static_cast<int>(rng.integer(51, 699))};
    torch::manual_seed(0);
    nn::DetectionModel det(nn::BackboneKind::ToyDense);
    nn::SeverityModel sev(nn::BackboneKind::ToyInceptionV3);
    det.eval();
    sev.eval();
    auto seg = std::make_shared<SegmentationModel>();
    seg->config.depth = 3;
    seg->config.base_channels = 4;
    seg->net = AttentionUNet(3, 4);
    seg->net->eval();
    pipeline::Preprocessor det_pre, sev_pre;
    det_pre.preprocess.task = pipeline::Task::Detect;
    det_pre.preprocess.spatial = 224;
    sev_pre.preprocess.task = pipeline::Task::Severity;
    sev_pre.preprocess.spatial = 299;
    sev_pre.seg = seg;
    torch::NoGradGuard ng;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        SyntheticSpec spec;
        spec.n_scans_per_class = {{ScanClass::Covid, 1}};
        spec.image_size = {64, 64};
        spec.slice_count_range = {counts[i], counts[i]};
        spec.seed = i;
        const fs::path out = dir / ("s" + std::to_string(i));
        const Manifest m = generate_synthetic_dataset(spec, out);
        const fs::path scan = m.resolve(m.entries()[0]);

        const auto d = det_pre.run(scan);
        c.expect(d.n_slices == static_cast<std::size_t>(counts[i]), "slice count");
        c.expect(d.inputs.size() == 1 && d.inputs[0].sizes() == torch::IntArrayRef({64, 224, 224}),
                 std::to_string(counts[i]) + "-slice detection volume shape");
        const auto logits = det.forward(d.inputs[0].unsqueeze(0));
        c.expect(logits.sizes() == torch::IntArrayRef({1, 2}), "detection logits shape");

        const auto s = sev_pre.run(scan);
        c.expect(s.inputs.size() == 2 && s.inputs[0].sizes() == torch::IntArrayRef({32, 299, 299}) &&
                     s.inputs[1].sizes() == torch::IntArrayRef({16, 299, 299}),
                 std::to_string(counts[i]) + "-slice dual volume shape");
        const auto sl = sev.forward(s.inputs[0].unsqueeze(0), s.inputs[1].unsqueeze(0));
        c.expect(sl.sizes() == torch::IntArrayRef({1, 4}), "severity logits shape");
    }

    // Depth identity: 64 slices at the target size come back unchanged.
    Rng img_rng(6);
    std::vector<Image> slices;
    for (int z = 0; z < 64; ++z) {
        Image im(224, 224);
        for (auto& v : im.pixels) v = static_cast<float>(img_rng.uniform());
        slices.push_back(std::move(im));
    }
    const VolumeTensor v = assemble_volume(slices, {64, 224, 224});
    bool identical = true;
    for (std::size_t z = 0; z < 64 && identical; ++z)
        identical = std::equal(slices[z].pixels.begin(), slices[z].pixels.end(),
                               v.data.begin() + static_cast<std::ptrdiff_t>(z * 224 * 224));
    c.expect(identical, "64-slice volume differs from its input slices");
}

double heldout_recall(const Manifest& m, const fs::path& filter_stem, std::size_t skip) {
    const auto filter = load_slice_filter(filter_stem);
    const auto entries = m.entries_in(Split::Train);
    std::size_t lungs = 0, found = 0;
    for (std::size_t i = skip; i < entries.size(); ++i) {
        const auto labeled = labeled_slices_for(m.resolve(entries[i]));
        std::vector<Image> imgs;
        for (const auto& s : labeled) imgs.push_back(s.image);
        const auto p = filter->lung_probabilities(imgs);
        for (std::size_t j = 0; j < labeled.size(); ++j)
            if (labeled[j].is_lung) {
                ++lungs;
                found += p[j] >= filter->config().threshold;
            }
    }
    return lungs ? static_cast<double>(found) / static_cast<double>(lungs) : 0.0;
}

void ac6(Check& c) {
    Scratch dir;
    const fs::path det_manifest =
        gen(dir / "det", {{"n_scans_per_class", {{"non-covid", 20}, {"covid", 20}}}, {"image_size", {128, 128}}, {"seed", 7}});
    const fs::path sev_manifest = gen(dir / "sev", {{"n_scans_per_class", {{"severity-1", 10}, {"severity-2", 10}, {"severity-3", 10}, {"severity-4", 10}}},
                                                    {"image_size", {128, 128}},
                                                    {"seed", 7}});
    write_json(dir / "filter.json", {{"epochs", 5},
                                     {"batch_size", 16},
                                     {"lr0", 1e-3},
                                     {"lr_decay_epochs", json::array()},
                                     {"filter_input_size", 64},
                                     {"filter_max_scans", 20}});
    write_json(dir / "det.json", {{"epochs", 30}, {"spatial_size", 64}, {"filter_input_size", 64}});
    write_json(dir / "seg.json", {{"epochs", 12},
                                  {"lr0", 1e-3},
                                  {"lr_decay_epochs", {8}},
                                  {"batch_size", 8},
                                  {"seg_depth", 3},
                                  {"seg_base_channels", 8},
                                  {"seg_slices_per_scan", 6},
                                  {"seg_max_scans", 20}});
    write_json(dir / "sev.json", {{"epochs", 30}, {"batch_size", 4}, {"severity_spatial_size", 64}});

    const fs::path ck = dir / "ck";
    const auto filter = stem_of(train(pipeline::Task::Filter, det_manifest, ck, dir / "filter.json", 7));
    const double recall = heldout_recall(load_manifest(det_manifest), filter, 20);
    c.expect(recall >= 0.90, "slice filter held-out recall " + std::to_string(recall));

    const auto det = stem_of(train(pipeline::Task::Detect, det_manifest, ck, dir / "det.json", 7,
                                   [&](auto& a) { a.filter_checkpoint = filter.string() + ".pt"; }));
    const double det_f1 = read_json(det.string() + ".json")["extras"]["train_macro_f1"].get<double>();
    c.expect(det_f1 >= 95.0, "detection train macro F1 " + std::to_string(det_f1));

    const auto seg = stem_of(train(pipeline::Task::Seg, sev_manifest, ck, dir / "seg.json", 7));
    const auto seg_meta = read_json(seg.string() + ".json");
    const double dice = seg_meta["extras"]["dice"].get<double>();
    c.expect(seg_meta["extras"]["dice_split"] == "heldout", "segmentation Dice was not measured on held-out pairs");
    c.expect(dice >= 0.90, "segmentation held-out Dice " + std::to_string(dice));

    const auto sev = stem_of(train(pipeline::Task::Severity, sev_manifest, ck, dir / "sev.json", 7, [&](auto& a) {
        a.filter_checkpoint = filter.string() + ".pt";
        a.seg_checkpoint = seg.string() + ".pt";
    }));
    const double sev_f1 = read_json(sev.string() + ".json")["extras"]["train_macro_f1"].get<double>();
    c.expect(sev_f1 >= 90.0, "severity train macro F1 " + std::to_string(sev_f1));
    std::printf("    recall %.3f  detection F1 %.2f  Dice %.3f  severity F1 %.2f\n", recall, det_f1, dice, sev_f1);
}

// gen -> train toy x3 -> predict -> evaluate; returns the report path.
fs::path end_to_end(const fs::path& root) {
    const fs::path manifest = gen(root / "data", {{"n_scans_per_class", {{"non-covid", 4}, {"covid", 4}}},
                                                  {"image_size", {64, 64}},
                                                  {"slice_count_range", {20, 30}},
                                                  {"val_fraction", 0.25},
                                                  {"seed", 11}});
    write_json(root / "run.json", {{"epochs", 3},
                                   {"batch_size", 4},
                                   {"lr0", 1e-3},
                                   {"lr_decay_epochs", json::array()},
                                   {"spatial_size", 32},
                                   {"bootstrap_resamples", 200}});
    pipeline::PredictArgs p;
    p.task = pipeline::Task::Detect;
    for (std::uint64_t seed : {0, 1, 2})
        p.checkpoints.push_back(train(pipeline::Task::Detect, manifest, root / "ck", root / "run.json", seed));
    p.data = manifest;
    p.out = root / "pred" / "predictions.csv";
    run_cmd([&](auto& o, auto& e) { return pipeline::cmd_predict(p, o, e); });
    pipeline::EvaluateArgs e;
    e.predictions = p.out;
    e.data = manifest;
    e.config = root / "run.json";
    e.seed = 5;
    run_cmd([&](auto& o, auto& err) { return pipeline::cmd_evaluate(e, o, err); });
    return root / "pred" / "report.json";
}

// AC8 reads the report AC7 produced.
Scratch* g_shared = nullptr;
fs::path g_ac7_report;

void ac7(Check& c) {
    const Scratch& dir = *g_shared;
    const auto a = end_to_end(dir / "run_a"), b = end_to_end(dir / "run_b");
    const auto da = digest::sha256_file(a), db = digest::sha256_file(b);
    c.expect(da == db, "report digests differ: " + da + " vs " + db);
    const auto pa = digest::sha256_file(dir / "run_a" / "pred" / "predictions.csv");
    const auto pb = digest::sha256_file(dir / "run_b" / "pred" / "predictions.csv");
    c.expect(pa == pb, "prediction digests differ");
    g_ac7_report = a;
}

void ac8(Check& c) {
    if (g_ac7_report.empty()) g_ac7_report = end_to_end(*g_shared / "run");
    const auto report = read_json(g_ac7_report);
    c.expect(report.contains("macro_f1") && report["macro_f1"].is_number(), "ensemble macro_f1 missing");
    c.expect(report.contains("members") && report["members"].size() == 3, "expected 3 member scores");
    for (const auto& m : report.value("members", json::array()))
        c.expect(m.contains("name") && m.contains("macro_f1") && m.contains("ci_halfwidth"), "member entry incomplete");
    c.expect(report.contains("member_spread"), "member_spread missing");

    EvalReport r;
    r.macro_f1 = report["macro_f1"].get<double>();
    r.ci_halfwidth = report["ci_halfwidth"].get<double>();
    r.n_bootstrap = report["n_bootstrap"].get<int>();
    r.n_samples = report["n_samples"].get<std::size_t>();
    r.member_spread = report["member_spread"].get<double>();
    for (const auto& m : report["members"])
        r.members.push_back({m["name"].get<std::string>(), m["macro_f1"].get<double>(), {}, m["ci_halfwidth"].get<double>()});
    const std::string table = format_report_table(r);
    std::size_t rows = 0;
    for (const auto& m : r.members) rows += table.find(m.name) != std::string::npos;
    c.expect(rows == 3 && table.find("Ensemble") != std::string::npos, "table lacks member or ensemble rows");
    std::printf("%s", table.c_str());
}

struct Criterion {
    int id;
    const char* title;
    double limit_s;  // 0 = no runtime limit
    void (*run)(Check&);
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "metric oracle equivalence", 10, ac1},
        {2, "ensemble identity", 5, ac2},
        {3, "schedule fidelity", 0, ac3},
        {4, "adapter-block correctness", 60, ac4},
        {5, "shape pipeline", 60, ac5},
        {6, "desk-scale learnability", 15 * 60, ac6},
        {7, "end-to-end determinism", 0, ac7},
        {8, "ensemble-vs-members reporting", 0, ac8},
    };
    configure_determinism(true);
    Scratch shared;
    g_shared = &shared;
    int failed = 0;
    for (const auto& cr : criteria) {
        Check check;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            cr.run(check);
        } catch (const std::exception& e) {
            check.failures.push_back(std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (cr.limit_s > 0 && secs > cr.limit_s)
            check.failures.push_back("runtime " + std::to_string(secs) + " s over the " + std::to_string(cr.limit_s) + " s limit");
        const bool ok = check.failures.empty();
        failed += !ok;
        std::printf("AC%d %s  %s (%.1f s)\n", cr.id, ok ? "PASS" : "FAIL", cr.title, secs);
        for (const auto& f : check.failures) std::printf("    %s\n", f.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed ? 1 : 0;
}
