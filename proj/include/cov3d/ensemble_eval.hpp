#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cov3d/common.hpp"

namespace cov3d {

/// K class probabilities, K in {2, 4}; each in [0,1], summing to 1 within 1e-6.
class ProbabilityVector {
public:
    static constexpr double kSumTolerance = 1e-6;

    ProbabilityVector() = default;
    explicit ProbabilityVector(std::vector<double> values);

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t k) const { return values_[k]; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool operator==(const ProbabilityVector&) const = default;

private:
    std::vector<double> values_;
};

/// Max-subtracted exponential normalisation.
ProbabilityVector softmax(std::span<const double> logits);

/// Componentwise mean. Each component is summed in sorted order, so the result
/// does not depend on the order of the models.
ProbabilityVector ensemble_average(std::span<const ProbabilityVector> probs);

/// Argmax; ties go to the lowest class index.
int predict_label(const ProbabilityVector& p);

struct F1Options {
    /// When set, classes with no actual and no predicted samples are left out of
    /// the macro average instead of contributing 0.
    bool exclude_absent_classes = false;
};

/// Per-class F1 in percent, 2PR/(P+R), 0 where undefined.
std::vector<double> per_class_f1(std::span<const int> preds, std::span<const int> truth, int num_classes);

/// Unweighted mean of per-class F1, in percent.
double macro_f1(std::span<const int> preds, std::span<const int> truth, int num_classes, const F1Options& options = {});

struct BootstrapResult {
    double mean = 0.0;
    double halfwidth = 0.0;  // standard deviation of the resampled macro F1
    int n_resamples = 0;
    std::uint64_t seed = 0;
};

/// Scan-level bootstrap of macro F1. Resample r draws from an RNG substream
/// derived from (seed, r).
BootstrapResult bootstrap_ci(std::span<const int> preds, std::span<const int> truth, int num_classes, int n_resamples,
                             std::uint64_t seed, const F1Options& options = {});

inline constexpr std::string_view kBootstrapMethod = "bootstrap-v1";

struct MemberScore {
    std::string name;
    double macro_f1 = 0.0;
    std::vector<double> per_class_f1;
    double ci_halfwidth = 0.0;
};

struct EvalReport {
    double macro_f1 = 0.0;
    std::vector<double> per_class_f1;
    double ci_halfwidth = 0.0;
    double bootstrap_mean = 0.0;
    int n_bootstrap = 0;
    std::uint64_t seed = 0;
    std::size_t n_samples = 0;
    bool exclude_absent_classes = false;
    std::vector<MemberScore> members;
    /// Sample standard deviation of the member macro F1 scores (0 with < 2 members).
    double member_spread = 0.0;

    nlohmann::json to_json() const;
};

EvalReport evaluate(std::span<const int> preds, std::span<const int> truth, int num_classes, int n_bootstrap,
                    std::uint64_t seed, const F1Options& options = {});

/// Markdown-style table with one row per member and an ensemble row.
std::string format_report_table(const EvalReport& report);

// ---------------------------------------------------------------------------
// Predictions CSV:
//   scan_id,p_0,...,p_{K-1},pred,label[,m0_p_0,...,m0_p_{K-1},m1_p_0,...]
// The leading columns hold the ensemble; optional member columns follow.

struct PredictionRow {
    std::string scan_id;
    ProbabilityVector ensemble;
    int pred = 0;
    std::optional<int> label;
    std::vector<ProbabilityVector> members;
};

struct PredictionTable {
    int num_classes = 0;
    std::size_t num_members = 0;
    std::vector<PredictionRow> rows;
};

std::string format_predictions_csv(const PredictionTable& table);
PredictionTable parse_predictions_csv(const std::string& text);
void write_predictions_csv(const PredictionTable& table, const std::filesystem::path& path);
PredictionTable read_predictions_csv(const std::filesystem::path& path);

}  // namespace cov3d
