#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cov3d/checkpoint.hpp"
#include "cov3d/nn_blocks.hpp"

namespace cov3d {

enum class OptimizerId { Adam, Sgd };
enum class LossId { CrossEntropy };

struct TrainConfig {
    int batch_size = 16;
    int epochs = 40;
    double lr0 = 1e-4;
    std::vector<int> lr_decay_epochs{15, 30};
    double lr_decay_factor = 0.1;
    OptimizerId optimizer = OptimizerId::Adam;
    double momentum = 0.9;  // SGD only
    LossId loss = LossId::CrossEntropy;
    bool class_weighting = false;
    std::uint64_t seed = 0;
    /// Batch order stream; defaults to `seed` when unset.
    std::optional<std::uint64_t> shuffle_seed;
    /// Single intra-op thread and deterministic kernels.
    bool deterministic = true;

    /// batch_size >= 1, epochs >= 0, lr0 > 0, factor > 0, decay epochs
    /// strictly increasing and >= 1.
    void validate() const;
    std::uint64_t effective_shuffle_seed() const { return shuffle_seed.value_or(seed); }

    nlohmann::json to_json() const;
    /// Flat object using the field names above; unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate used throughout `epoch`: lr0 * factor^(decay epochs <= epoch),
/// rounded to 15 significant decimal digits so the decimal schedule is
/// reproduced exactly (1e-4, 1e-5, 1e-6 rather than 1.0000000000000002e-06).
double lr_at_epoch(const TrainConfig& config, int epoch);

struct HistoryRow {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double train_metric = 0.0;  // macro F1 (percent), eval mode, after the epoch
    std::optional<double> val_metric;
};

struct TrainHistory {
    std::vector<HistoryRow> rows;
    double wall_time = 0.0;  // seconds

    std::vector<double> loss_column() const;
    std::vector<double> lr_column() const;
    std::string to_csv() const;
};

/// One training example: model inputs without the batch axis plus the label.
struct Sample {
    std::vector<torch::Tensor> inputs;
    int label = 0;
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

struct TrainOutcome {
    TrainHistory history;
    /// Epoch whose weights were kept (-1 when no epoch ran).
    int selected_epoch = -1;
    double final_loss = 0.0;
};

/// Called after every epoch; used for progress logging.
using EpochCallback = std::function<void(const HistoryRow&)>;

/// Fits `model` in place. On return the model holds the weights of the best
/// validation macro F1 epoch (earliest on ties), or the last epoch when there
/// is no validation data.
TrainOutcome train_model(nn::Classifier& model, const Dataset& data, const TrainConfig& config,
                         const EpochCallback& on_epoch = {});

/// Eval-mode argmax predictions, batched.
std::vector<int> predict_classes(nn::Classifier& model, const std::vector<Sample>& samples, int batch_size = 16);
/// Eval-mode softmax probabilities, one row per sample.
std::vector<std::vector<double>> predict_probabilities(nn::Classifier& model, const std::vector<Sample>& samples,
                                                       int batch_size = 16);

struct LoadedClassifier {
    std::shared_ptr<nn::Classifier> model;
    CheckpointMeta meta;
};

/// Rebuilds the classifier described by the checkpoint metadata and loads its
/// weights; the model is returned in eval mode.
LoadedClassifier load_classifier(const std::filesystem::path& stem);

/// Applies the reproducibility switches (thread count, deterministic kernels).
void configure_determinism(bool deterministic);

}  // namespace cov3d
