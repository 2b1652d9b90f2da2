// cov3d: command-line front end for the CT pipeline.
//
//   cov3d gen-synthetic --out d/ [--config spec.json] [--seed 7]
//   cov3d train --task detect --data d/manifest.csv --out ckpt/ [--config run.json]
//   cov3d predict --task detect --checkpoint a.pt --checkpoint b.pt --data ... --out preds.csv
//   cov3d evaluate --predictions preds.csv --data d/manifest.csv
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cov3d/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cov3d::pipeline;

namespace {

std::string join_argv(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

void add_common(CLI::App* sub, CommonArgs& c) {
    sub->add_flag("--overwrite", c.overwrite, "Replace existing outputs instead of skipping");
    sub->add_option("--workers", c.workers, "Scans preprocessed in parallel")->check(CLI::Range(1, 256));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"COVID CT-scan detection and severity toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "cov3d 0.1.0");

    GenArgs gen;
    TrainArgs train;
    PredictArgs predict;
    EvaluateArgs eval;
    std::string train_task, predict_task, predict_split;
    std::uint64_t gen_seed = 0, train_seed = 0, eval_seed = 0;
    std::string gen_config, train_config, train_backbone, train_filter, train_seg, predict_filter, predict_seg,
        eval_out, eval_config;

    const std::vector<std::string> tasks{"filter", "seg", "detect", "severity"};

    auto* g = app.add_subcommand("gen-synthetic", "Write a seeded synthetic dataset with a manifest");
    g->add_option("--out", gen.out, "Dataset directory")->required();
    g->add_option("--config", gen_config, "SyntheticSpec JSON")->check(CLI::ExistingFile);
    auto* g_seed = g->add_option("--seed", gen_seed, "Overrides the spec seed");
    add_common(g, gen.common);

    auto* t = app.add_subcommand("train", "Train one model and write its checkpoint");
    t->add_option("--task", train_task, "filter | seg | detect | severity")->required()->check(CLI::IsMember(tasks));
    t->add_option("--data", train.data, "Manifest CSV")->required();
    t->add_option("--out", train.out, "Checkpoint directory")->required();
    t->add_option("--config", train_config, "Run config JSON")->check(CLI::ExistingFile);
    auto* t_seed = t->add_option("--seed", train_seed, "Overrides the config seed");
    t->add_option("--variant", train.variant, "Severity backbone: v3 | v4 | resnet")
        ->check(CLI::IsMember({"v3", "v4", "resnet"}));
    t->add_option("--run-index", train.run_index, "Severity run index within the grid")->check(CLI::NonNegativeNumber);
    t->add_option("--backbone", train_backbone, "Backbone override (e.g. toy-dense, densenet161)");
    t->add_option("--filter-checkpoint", train_filter, "Slice filter checkpoint");
    t->add_option("--seg-checkpoint", train_seg, "Segmentation checkpoint (severity)");
    add_common(t, train.common);

    auto* p = app.add_subcommand("predict", "Run an ensemble of checkpoints over a manifest");
    p->add_option("--task", predict_task, "detect | severity")->required()->check(CLI::IsMember({"detect", "severity"}));
    p->add_option("--checkpoint", predict.checkpoints, "Model checkpoint (repeatable)")->required();
    p->add_option("--data", predict.data, "Manifest CSV")->required();
    p->add_option("--out", predict.out, "Predictions CSV")->required();
    p->add_option("--filter-checkpoint", predict_filter, "Slice filter checkpoint");
    p->add_option("--seg-checkpoint", predict_seg, "Segmentation checkpoint (severity)");
    p->add_option("--split", predict_split, "Only this split")->check(CLI::IsMember({"train", "val", "test"}));
    add_common(p, predict.common);

    auto* e = app.add_subcommand("evaluate", "Score predictions against manifest labels");
    e->add_option("--predictions", eval.predictions, "Predictions CSV")->required()->check(CLI::ExistingFile);
    e->add_option("--data", eval.data, "Manifest CSV")->required()->check(CLI::ExistingFile);
    e->add_option("--out", eval_out, "Report JSON (default: report.json beside the predictions)");
    e->add_option("--config", eval_config, "Run config JSON (bootstrap settings)")->check(CLI::ExistingFile);
    auto* e_seed = e->add_option("--seed", eval_seed, "Bootstrap seed");
    add_common(e, eval.common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    const std::string command_line = join_argv(argc, argv);
    auto opt_path = [](const std::string& s) { return s.empty() ? std::optional<fs::path>() : fs::path(s); };

    if (g->parsed()) {
        gen.common.command_line = command_line;
        gen.config = opt_path(gen_config);
        if (*g_seed) gen.seed = gen_seed;
        return cmd_gen_synthetic(gen, std::cout, std::cerr);
    }
    if (t->parsed()) {
        train.common.command_line = command_line;
        train.task = parse_task(train_task);
        train.config = opt_path(train_config);
        if (*t_seed) train.seed = train_seed;
        if (!train_backbone.empty()) train.backbone = train_backbone;
        train.filter_checkpoint = opt_path(train_filter);
        train.seg_checkpoint = opt_path(train_seg);
        return cmd_train(train, std::cout, std::cerr);
    }
    if (p->parsed()) {
        predict.common.command_line = command_line;
        predict.task = parse_task(predict_task);
        predict.filter_checkpoint = opt_path(predict_filter);
        predict.seg_checkpoint = opt_path(predict_seg);
        if (!predict_split.empty()) predict.split = cov3d::parse_split(predict_split);
        return cmd_predict(predict, std::cout, std::cerr);
    }
    eval.common.command_line = command_line;
    eval.out = opt_path(eval_out);
    eval.config = opt_path(eval_config);
    if (*e_seed) eval.seed = eval_seed;
    return cmd_evaluate(eval, std::cout, std::cerr);
}
