#include "cov3d/ensemble_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "cov3d/io.hpp"
#include "cov3d/rng.hpp"

namespace cov3d {

ProbabilityVector::ProbabilityVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() != 2 && values_.size() != 4)
        throw Error("probability_vector", "class count must be 2 or 4, got " + std::to_string(values_.size()));
    double sum = 0.0;
    for (double v : values_) {
        if (!(v >= 0.0 && v <= 1.0)) throw Error("probability_vector", "component outside [0,1]");
        sum += v;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) throw Error("probability_vector", "components do not sum to 1");
}

ProbabilityVector softmax(std::span<const double> logits) {
    if (logits.empty()) throw Error("softmax", "empty logits");
    for (double l : logits)
        if (!std::isfinite(l)) throw Error("softmax", "non-finite logit");
    const double top = *std::max_element(logits.begin(), logits.end());
    std::vector<double> e(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        e[k] = std::exp(logits[k] - top);
        sum += e[k];
    }
    for (double& v : e) v /= sum;
    return ProbabilityVector(std::move(e));
}

ProbabilityVector ensemble_average(std::span<const ProbabilityVector> probs) {
    if (probs.empty()) throw Error("ensemble_average", "empty model list");
    const std::size_t k = probs.front().size();
    for (const auto& p : probs)
        if (p.size() != k) throw Error("ensemble_average", "ragged class counts");
    std::vector<double> mean(k);
    std::vector<double> column(probs.size());
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t m = 0; m < probs.size(); ++m) column[m] = probs[m][c];
        std::sort(column.begin(), column.end());
        double sum = 0.0;
        for (double v : column) sum += v;
        mean[c] = sum / static_cast<double>(probs.size());
    }
    return ProbabilityVector(std::move(mean));
}

int predict_label(const ProbabilityVector& p) {
    if (p.size() == 0) throw Error("predict_label", "empty probability vector");
    const auto& v = p.values();
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

namespace {

void check_labels(std::span<const int> preds, std::span<const int> truth, int num_classes, std::string_view stage) {
    if (preds.size() != truth.size()) throw Error(stage, "length mismatch between predictions and truth");
    if (preds.empty()) throw Error(stage, "empty predictions");
    if (num_classes < 1) throw Error(stage, "class count must be >= 1");
    auto in_range = [&](int l) { return l >= 0 && l < num_classes; };
    if (!std::all_of(preds.begin(), preds.end(), in_range) || !std::all_of(truth.begin(), truth.end(), in_range))
        throw Error(stage, "label outside [0, " + std::to_string(num_classes) + ")");
}

struct ClassTally {
    std::vector<std::int64_t> tp, fp, fn;
    explicit ClassTally(int k) : tp(static_cast<std::size_t>(k)), fp(tp), fn(tp) {}
};

ClassTally tally(std::span<const int> preds, std::span<const int> truth, int k) {
    ClassTally t(k);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto p = static_cast<std::size_t>(preds[i]), y = static_cast<std::size_t>(truth[i]);
        if (p == y) {
            ++t.tp[p];
        } else {
            ++t.fp[p];
            ++t.fn[y];
        }
    }
    return t;
}

double f1_percent(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    const std::int64_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double macro_from_tally(const ClassTally& t, const F1Options& options) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < t.tp.size(); ++c) {
        const bool absent = t.tp[c] + t.fp[c] + t.fn[c] == 0;
        if (absent && options.exclude_absent_classes) continue;
        sum += f1_percent(t.tp[c], t.fp[c], t.fn[c]);
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace

std::vector<double> per_class_f1(std::span<const int> preds, std::span<const int> truth, int num_classes) {
    check_labels(preds, truth, num_classes, "per_class_f1");
    const auto t = tally(preds, truth, num_classes);
    std::vector<double> out(static_cast<std::size_t>(num_classes));
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = f1_percent(t.tp[c], t.fp[c], t.fn[c]);
    return out;
}

double macro_f1(std::span<const int> preds, std::span<const int> truth, int num_classes, const F1Options& options) {
    check_labels(preds, truth, num_classes, "macro_f1");
    return macro_from_tally(tally(preds, truth, num_classes), options);
}

BootstrapResult bootstrap_ci(std::span<const int> preds, std::span<const int> truth, int num_classes, int n_resamples,
                             std::uint64_t seed, const F1Options& options) {
    if (preds.empty()) throw Error("bootstrap_ci", "empty predictions");
    if (n_resamples < 2) throw Error("bootstrap_ci", "n_resamples must be >= 2");
    check_labels(preds, truth, num_classes, "bootstrap_ci");

    const std::size_t n = preds.size();
    std::vector<int> rp(n), rt(n);
    std::vector<double> scores(static_cast<std::size_t>(n_resamples));
    for (int r = 0; r < n_resamples; ++r) {
        Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(r));
        for (std::size_t i = 0; i < n; ++i) {
            const auto pick = static_cast<std::size_t>(rng.index(n));
            rp[i] = preds[pick];
            rt[i] = truth[pick];
        }
        scores[static_cast<std::size_t>(r)] = macro_from_tally(tally(rp, rt, num_classes), options);
    }
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(n_resamples);
    double ss = 0.0;
    for (double s : scores) ss += (s - mean) * (s - mean);
    return {mean, std::sqrt(ss / static_cast<double>(n_resamples - 1)), n_resamples, seed};
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json members_json = nlohmann::json::array();
    for (const auto& m : members)
        members_json.push_back({{"name", m.name},
                                {"macro_f1", m.macro_f1},
                                {"per_class_f1", m.per_class_f1},
                                {"ci_halfwidth", m.ci_halfwidth}});
    return {{"method", std::string(kBootstrapMethod)},
            {"macro_f1", macro_f1},
            {"per_class_f1", per_class_f1},
            {"ci_halfwidth", ci_halfwidth},
            {"bootstrap_mean", bootstrap_mean},
            {"n_bootstrap", n_bootstrap},
            {"seed", seed},
            {"n_samples", n_samples},
            {"exclude_absent_classes", exclude_absent_classes},
            {"members", members_json},
            {"member_spread", member_spread}};
}

EvalReport evaluate(std::span<const int> preds, std::span<const int> truth, int num_classes, int n_bootstrap,
                    std::uint64_t seed, const F1Options& options) {
    EvalReport r;
    r.macro_f1 = macro_f1(preds, truth, num_classes, options);
    r.per_class_f1 = per_class_f1(preds, truth, num_classes);
    const auto boot = bootstrap_ci(preds, truth, num_classes, n_bootstrap, seed, options);
    r.ci_halfwidth = boot.halfwidth;
    r.bootstrap_mean = boot.mean;
    r.n_bootstrap = n_bootstrap;
    r.seed = seed;
    r.n_samples = preds.size();
    r.exclude_absent_classes = options.exclude_absent_classes;
    return r;
}

std::string format_report_table(const EvalReport& report) {
    std::ostringstream out;
    char buf[160];
    out << "| Model | Architecture | Macro F1-Score |\n|---|---|---|\n";
    for (std::size_t i = 0; i < report.members.size(); ++i) {
        const auto& m = report.members[i];
        std::snprintf(buf, sizeof buf, "| %zu | %s | %.2f +/- %.2f |\n", i + 1, m.name.c_str(), m.macro_f1, m.ci_halfwidth);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "| %zu | Ensemble | %.2f +/- %.2f |\n", report.members.size() + 1, report.macro_f1,
                  report.ci_halfwidth);
    out << buf;
    std::snprintf(buf, sizeof buf, "(+/- = %s std over %d resamples, n=%zu; member spread %.2f)\n",
                  std::string(kBootstrapMethod).c_str(), report.n_bootstrap, report.n_samples, report.member_spread);
    out << buf;
    return out.str();
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string format_predictions_csv(const PredictionTable& table) {
    const int k = table.num_classes;
    std::string out = "scan_id";
    for (int c = 0; c < k; ++c) out += ",p_" + std::to_string(c);
    out += ",pred,label";
    for (std::size_t m = 0; m < table.num_members; ++m)
        for (int c = 0; c < k; ++c) out += ",m" + std::to_string(m) + "_p_" + std::to_string(c);
    out += '\n';
    for (const auto& row : table.rows) {
        if (row.members.size() != table.num_members)
            throw Error("predictions_csv", "row '" + row.scan_id + "' has the wrong member count");
        out += row.scan_id;
        for (double v : row.ensemble.values()) out += "," + fmt_double(v);
        out += "," + std::to_string(row.pred) + ",";
        if (row.label) out += std::to_string(*row.label);
        for (const auto& m : row.members)
            for (double v : m.values()) out += "," + fmt_double(v);
        out += '\n';
    }
    return out;
}

PredictionTable parse_predictions_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw Error("predictions_csv", "missing header");
    const auto header = io::split_csv_line(line);
    PredictionTable table;
    if (header.empty() || header[0] != "scan_id") throw Error("predictions_csv", "header must start with scan_id");
    std::size_t col = 1;
    while (col < header.size() && header[col] == "p_" + std::to_string(table.num_classes)) {
        ++table.num_classes;
        ++col;
    }
    if (table.num_classes != 2 && table.num_classes != 4)
        throw Error("predictions_csv", "expected 2 or 4 probability columns");
    if (col + 1 >= header.size() || header[col] != "pred" || header[col + 1] != "label")
        throw Error("predictions_csv", "expected pred,label after probability columns");
    col += 2;
    const std::size_t member_cols = header.size() - col;
    if (member_cols % static_cast<std::size_t>(table.num_classes) != 0)
        throw Error("predictions_csv", "member columns do not divide the class count");
    table.num_members = member_cols / static_cast<std::size_t>(table.num_classes);
    for (std::size_t m = 0; m < table.num_members; ++m)
        for (int c = 0; c < table.num_classes; ++c)
            if (header[col + m * static_cast<std::size_t>(table.num_classes) + static_cast<std::size_t>(c)] !=
                "m" + std::to_string(m) + "_p_" + std::to_string(c))
                throw Error("predictions_csv", "unexpected member column name");

    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        const std::string where = "row " + std::to_string(row_no);
        if (f.size() != header.size()) throw Error("predictions_csv", where + ": wrong field count");
        try {
            PredictionRow row;
            row.scan_id = f[0];
            auto probs = [&](std::size_t start) {
                std::vector<double> v(static_cast<std::size_t>(table.num_classes));
                for (std::size_t c = 0; c < v.size(); ++c) v[c] = std::stod(f[start + c]);
                return ProbabilityVector(std::move(v));
            };
            row.ensemble = probs(1);
            const std::size_t k = static_cast<std::size_t>(table.num_classes);
            row.pred = std::stoi(f[1 + k]);
            if (!f[2 + k].empty()) row.label = std::stoi(f[2 + k]);
            for (std::size_t m = 0; m < table.num_members; ++m) row.members.push_back(probs(3 + k + m * k));
            table.rows.push_back(std::move(row));
        } catch (const Error& e) {
            throw Error("predictions_csv", where + ": " + e.what());
        } catch (const std::exception&) {
            throw Error("predictions_csv", where + ": malformed number");
        }
    }
    return table;
}

void write_predictions_csv(const PredictionTable& table, const std::filesystem::path& path) {
    io::write_text_atomic(path, format_predictions_csv(table));
}

PredictionTable read_predictions_csv(const std::filesystem::path& path) {
    return parse_predictions_csv(io::read_text(path));
}

}  // namespace cov3d
