#include "cov3d/training.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <span>

#include "cov3d/ensemble_eval.hpp"
#include "cov3d/rng.hpp"

namespace cov3d {

using torch::Tensor;

void TrainConfig::validate() const {
    if (batch_size < 1) throw Error("train_config", "batch_size must be >= 1");
    if (epochs < 0) throw Error("train_config", "epochs must be >= 0");
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw Error("train_config", "lr0 must be > 0");
    if (!(lr_decay_factor > 0.0) || !std::isfinite(lr_decay_factor))
        throw Error("train_config", "lr_decay_factor must be > 0");
    for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
        if (lr_decay_epochs[i] < 1) throw Error("train_config", "decay epochs must be >= 1");
        if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])
            throw Error("train_config", "decay epochs must be strictly increasing");
    }
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j{{"batch_size", batch_size},
                     {"epochs", epochs},
                     {"lr0", lr0},
                     {"lr_decay_epochs", lr_decay_epochs},
                     {"lr_decay_factor", lr_decay_factor},
                     {"optimizer_id", optimizer == OptimizerId::Adam ? "adam" : "sgd"},
                     {"momentum", momentum},
                     {"loss_id", "cross_entropy"},
                     {"class_weighting", class_weighting},
                     {"seed", seed},
                     {"deterministic", deterministic}};
    j["shuffle_seed"] = shuffle_seed ? nlohmann::json(*shuffle_seed) : nlohmann::json();
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("train_config", "config must be a JSON object");
    TrainConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "epochs") c.epochs = value.get<int>();
            else if (key == "lr0") c.lr0 = value.get<double>();
            else if (key == "lr_decay_epochs") c.lr_decay_epochs = value.get<std::vector<int>>();
            else if (key == "lr_decay_factor") c.lr_decay_factor = value.get<double>();
            else if (key == "momentum") c.momentum = value.get<double>();
            else if (key == "class_weighting") c.class_weighting = value.get<bool>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "deterministic") c.deterministic = value.get<bool>();
            else if (key == "shuffle_seed") {
                if (value.is_null()) c.shuffle_seed.reset();
                else c.shuffle_seed = value.get<std::uint64_t>();
            } else if (key == "optimizer_id") {
                const auto s = value.get<std::string>();
                if (s == "adam") c.optimizer = OptimizerId::Adam;
                else if (s == "sgd") c.optimizer = OptimizerId::Sgd;
                else throw Error("train_config", "unknown optimizer_id '" + s + "'");
            } else if (key == "loss_id") {
                if (value.get<std::string>() != "cross_entropy")
                    throw Error("train_config", "unknown loss_id '" + value.get<std::string>() + "'");
            } else {
                throw Error("train_config", "unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("train_config", e.what());
    }
    c.validate();
    return c;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
    if (epoch < 0 || epoch >= config.epochs)
        throw Error("lr_at_epoch", "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
    int decays = 0;
    for (int e : config.lr_decay_epochs)
        if (e <= epoch) ++decays;
    double lr = config.lr0;
    for (int i = 0; i < decays; ++i) lr *= config.lr_decay_factor;
    // Snap to 15 significant digits, below double's 15.95-digit precision, so
    // accumulated binary error from repeated multiplication disappears.
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.15g", lr);
    double snapped = lr;
    std::from_chars(buf, buf + std::strlen(buf), snapped);
    return snapped;
}

std::vector<double> TrainHistory::loss_column() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.loss);
    return out;
}

std::vector<double> TrainHistory::lr_column() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.lr);
    return out;
}

std::string TrainHistory::to_csv() const {
    std::string out = "epoch,loss,lr,train_metric,val_metric\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,", r.epoch, r.loss, r.lr, r.train_metric);
        out += buf;
        if (r.val_metric) {
            std::snprintf(buf, sizeof buf, "%.17g", *r.val_metric);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

void configure_determinism(bool deterministic) {
    if (!deterministic) return;
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
}

namespace {

std::vector<Tensor> collate(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
    std::vector<Tensor> out;
    const std::size_t n_inputs = samples[order[0]].inputs.size();
    for (std::size_t i = 0; i < n_inputs; ++i) {
        std::vector<Tensor> parts;
        parts.reserve(order.size());
        for (auto idx : order) parts.push_back(samples[idx].inputs[i]);
        out.push_back(torch::stack(parts));
    }
    return out;
}

Tensor labels_of(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
    std::vector<std::int64_t> v;
    for (auto idx : order) v.push_back(samples[idx].label);
    return torch::tensor(v, torch::kInt64);
}

/// Batch boundaries; a trailing singleton batch is folded into the previous
/// one so batch norm never sees a batch of one in training mode.
std::vector<std::pair<std::size_t, std::size_t>> batches(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
    if (out.size() > 1 && out.back().second - out.back().first == 1) {
        out.pop_back();
        out.back().second = n;
    }
    return out;
}

struct Snapshot {
    std::vector<Tensor> tensors;
};

Snapshot snapshot(torch::nn::Module& m) {
    Snapshot s;
    for (auto& p : m.parameters()) s.tensors.push_back(p.detach().clone());
    for (auto& b : m.buffers()) s.tensors.push_back(b.detach().clone());
    return s;
}

void restore(torch::nn::Module& m, const Snapshot& s) {
    torch::NoGradGuard guard;
    std::size_t i = 0;
    for (auto& p : m.parameters()) p.copy_(s.tensors[i++]);
    for (auto& b : m.buffers()) b.copy_(s.tensors[i++]);
}

double macro_f1_of(nn::Classifier& model, const std::vector<Sample>& samples, int batch_size) {
    const auto preds = predict_classes(model, samples, batch_size);
    std::vector<int> truth;
    for (const auto& s : samples) truth.push_back(s.label);
    return macro_f1(preds, truth, static_cast<int>(model.num_classes()));
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

}  // namespace

std::vector<std::vector<double>> predict_probabilities(nn::Classifier& model, const std::vector<Sample>& samples,
                                                       int batch_size) {
    std::vector<std::vector<double>> out;
    if (samples.empty()) return out;
    const bool was_training = model.is_training();
    model.eval();
    torch::NoGradGuard guard;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch_size)) {
        const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(batch_size));
        const std::span<const std::size_t> idx(order.data() + s, e - s);
        const Tensor logits = model.forward_inputs(collate(samples, idx)).to(torch::kFloat64).contiguous();
        for (std::int64_t r = 0; r < logits.size(0); ++r) {
            const Tensor row = logits[r];
            const auto* p = row.data_ptr<double>();
            out.push_back(softmax(std::span<const double>(p, static_cast<std::size_t>(row.numel()))).values());
        }
    }
    model.train(was_training);
    return out;
}

std::vector<int> predict_classes(nn::Classifier& model, const std::vector<Sample>& samples, int batch_size) {
    std::vector<int> out;
    for (const auto& p : predict_probabilities(model, samples, batch_size)) out.push_back(predict_label(ProbabilityVector(p)));
    return out;
}

TrainOutcome train_model(nn::Classifier& model, const Dataset& data, const TrainConfig& config,
                         const EpochCallback& on_epoch) {
    config.validate();
    if (data.train.empty()) throw Error("train_model", "empty dataset");
    const auto k = static_cast<int>(model.num_classes());
    std::vector<std::size_t> class_counts(static_cast<std::size_t>(k), 0);
    for (const auto& s : data.train) {
        if (s.label < 0 || s.label >= k) throw Error("train_model", "label " + std::to_string(s.label) + " out of range");
        ++class_counts[static_cast<std::size_t>(s.label)];
    }
    for (int c = 0; c < k; ++c)
        if (class_counts[static_cast<std::size_t>(c)] == 0)
            throw Error("train_model", "missing class " + std::to_string(c) + " in training data");

    configure_determinism(config.deterministic);
    torch::manual_seed(config.seed);

    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome outcome;

    std::unique_ptr<torch::optim::Optimizer> opt;
    if (config.optimizer == OptimizerId::Adam)
        opt = std::make_unique<torch::optim::Adam>(model.parameters(), torch::optim::AdamOptions(config.lr0));
    else
        opt = std::make_unique<torch::optim::SGD>(model.parameters(),
                                                  torch::optim::SGDOptions(config.lr0).momentum(config.momentum));

    Tensor weights;
    if (config.class_weighting) {
        std::vector<double> w;
        for (auto c : class_counts)
            w.push_back(static_cast<double>(data.train.size()) / (static_cast<double>(k) * static_cast<double>(c)));
        weights = torch::tensor(w, torch::kFloat32);
    }

    std::optional<Snapshot> best;
    double best_metric = -1.0;
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto bounds = batches(order.size(), static_cast<std::size_t>(config.batch_size));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        set_lr(*opt, lr);

        Rng rng = Rng::substream(config.effective_shuffle_seed(), static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

        model.train();
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < bounds.size(); ++b) {
            const std::span<const std::size_t> idx(order.data() + bounds[b].first, bounds[b].second - bounds[b].first);
            const auto inputs = collate(data.train, idx);
            const Tensor target = labels_of(data.train, idx);
            opt->zero_grad();
            const Tensor logits = model.forward_inputs(inputs);
            auto options = torch::nn::functional::CrossEntropyFuncOptions();
            if (weights.defined()) options.weight(weights.to(logits.dtype()));
            const Tensor loss = torch::nn::functional::cross_entropy(logits, target, options);
            const double value = loss.item<double>();
            if (!std::isfinite(value))
                throw Error("train_model", "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
            loss.backward();
            opt->step();
            loss_sum += value * static_cast<double>(idx.size());
        }

        HistoryRow row;
        row.epoch = epoch;
        row.loss = loss_sum / static_cast<double>(order.size());
        row.lr = lr;
        row.train_metric = macro_f1_of(model, data.train, config.batch_size);
        if (!data.val.empty()) {
            row.val_metric = macro_f1_of(model, data.val, config.batch_size);
            if (*row.val_metric > best_metric) {
                best_metric = *row.val_metric;
                best = snapshot(model);
                outcome.selected_epoch = epoch;
            }
        } else {
            outcome.selected_epoch = epoch;
        }
        outcome.final_loss = row.loss;
        outcome.history.rows.push_back(row);
        if (on_epoch) on_epoch(row);
    }
    if (best) restore(model, *best);
    model.eval();
    outcome.history.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return outcome;
}

LoadedClassifier load_classifier(const std::filesystem::path& stem) {
    LoadedClassifier out;
    out.meta = read_checkpoint_meta(stem);
    out.model = nn::make_classifier(out.meta.architecture, out.meta.seed);
    load_checkpoint_weights(*out.model, stem);
    out.model->eval();
    return out;
}

}  // namespace cov3d
