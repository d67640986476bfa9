#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "attack_kind.hpp"
#include "dataset.hpp"
#include "embedding_cache.hpp"
#include "errors.hpp"
#include "hash.hpp"
#include "pipeline.hpp"
#include "prompt_tuner.hpp"
#include "text_io.hpp"

namespace bsentinel {

/// Inference-time classifier: the prefix is frozen and the two class text
/// embeddings are computed once at construction.
class Detector {
public:
    Detector(Tensor<float> text, double scale) : text_(std::move(text)), scale_(scale) {
        if (text_.rank() != 2 || text_.rows() != 2) throw ShapeError("detector needs 2 class text embeddings");
        if (!(scale_ > 0.0)) throw ConfigError("scale must be positive");
    }

    static Detector build(const PrefixState& prefix, const TextEncoder<float>& encoder, const Vocabulary& vocab,
                          double scale) {
        return Detector(class_text_embeddings(prefix, encoder, vocab), scale);
    }

    const Tensor<float>& text() const noexcept { return text_; }
    double scale() const noexcept { return scale_; }
    std::size_t dim() const { return text_.cols(); }

    struct Scores {
        double clean = 0.0;
        double backdoored = 0.0;
        /// s_backdoored - s_clean; positive means backdoored.
        double margin() const { return backdoored - clean; }
    };

    Scores scores(std::span<const float> embedding) const {
        if (embedding.size() != dim()) {
            throw ShapeError("embedding of dimension " + std::to_string(embedding.size()) + ", detector expects " +
                             std::to_string(dim()));
        }
        Scores s;
        for (std::size_t i = 0; i < embedding.size(); ++i) {
            s.clean += static_cast<double>(embedding[i]) * text_(0, i);
            s.backdoored += static_cast<double>(embedding[i]) * text_(1, i);
        }
        s.clean *= scale_;
        s.backdoored *= scale_;
        return s;
    }

    /// Class with the highest similarity score; exact ties go to clean.
    DetectionLabel predict(std::span<const float> embedding) const {
        const Scores s = scores(embedding);
        return s.backdoored > s.clean ? DetectionLabel::backdoored : DetectionLabel::clean;
    }

private:
    Tensor<float> text_;
    double scale_;
};

struct EvalResult {
    std::size_t total = 0;
    /// confusion[truth][predicted], 0 = clean, 1 = backdoored.
    std::size_t confusion[2][2] = {{0, 0}, {0, 0}};
    double accuracy = 0.0;
    double clean_recall = 0.0;
    double backdoor_recall = 0.0;
};

/// Scores predictions against ground truth. Recall of a class with no
/// samples is reported as 0.
inline EvalResult score_predictions(const std::vector<DetectionLabel>& predicted, const std::vector<DetectionLabel>& truth) {
    if (predicted.size() != truth.size()) throw ShapeError("prediction and label counts differ");
    if (truth.empty()) throw DataError("evaluate: empty set");
    EvalResult r;
    r.total = truth.size();
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++r.confusion[static_cast<int>(truth[i])][static_cast<int>(predicted[i])];
    }
    const std::size_t correct = r.confusion[0][0] + r.confusion[1][1];
    r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(r.total);
    const std::size_t n_clean = r.confusion[0][0] + r.confusion[0][1];
    const std::size_t n_bd = r.confusion[1][0] + r.confusion[1][1];
    r.clean_recall = n_clean ? 100.0 * static_cast<double>(r.confusion[0][0]) / static_cast<double>(n_clean) : 0.0;
    r.backdoor_recall = n_bd ? 100.0 * static_cast<double>(r.confusion[1][1]) / static_cast<double>(n_bd) : 0.0;
    return r;
}

inline EvalResult evaluate(const Detector& det, const EmbeddingCache& data) {
    if (data.empty()) throw DataError("evaluate: empty set");
    std::vector<DetectionLabel> predicted, truth;
    predicted.reserve(data.size());
    truth.reserve(data.size());
    for (const auto& r : data.records) {
        predicted.push_back(det.predict(r.vector));
        truth.push_back(r.detection);
    }
    return score_predictions(predicted, truth);
}

// ---------------------------------------------------------------------------
// Reports

struct SeedResult {
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double clean_recall = 0.0;
    double backdoor_recall = 0.0;

    friend bool operator==(const SeedResult&, const SeedResult&) = default;
};

struct ReportRow {
    std::string attack;
    std::string dataset;
    std::string method = "learned-prefix";
    std::vector<SeedResult> runs;
    double mean = 0.0;
    double std = 0.0;

    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

inline void finalize_row(ReportRow& row) {
    std::vector<double> acc;
    for (const auto& r : row.runs) acc.push_back(r.accuracy);
    std::tie(row.mean, row.std) = mean_std(acc);
}

struct ExperimentReport {
    std::string experiment;
    std::string run_id;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<ReportRow> rows;

    friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

inline nlohmann::ordered_json to_json(const ExperimentReport& report) {
    nlohmann::ordered_json j;
    j["experiment"] = report.experiment;
    j["run_id"] = report.run_id;
    j["config"] = report.config;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : report.rows) {
        nlohmann::ordered_json r;
        r["attack"] = row.attack;
        r["dataset"] = row.dataset;
        r["method"] = row.method;
        r["runs"] = nlohmann::ordered_json::array();
        for (const auto& s : row.runs) {
            r["runs"].push_back({{"seed", s.seed},
                                 {"accuracy", s.accuracy},
                                 {"clean_recall", s.clean_recall},
                                 {"backdoor_recall", s.backdoor_recall}});
        }
        r["mean"] = row.mean;
        r["std"] = row.std;
        j["rows"].push_back(std::move(r));
    }
    return j;
}

inline ExperimentReport report_from_json(const nlohmann::ordered_json& j) {
    try {
        ExperimentReport report;
        report.experiment = j.at("experiment").get<std::string>();
        report.run_id = j.at("run_id").get<std::string>();
        report.config = j.at("config");
        for (const auto& r : j.at("rows")) {
            ReportRow row;
            row.attack = r.at("attack").get<std::string>();
            row.dataset = r.at("dataset").get<std::string>();
            row.method = r.at("method").get<std::string>();
            for (const auto& s : r.at("runs")) {
                row.runs.push_back(SeedResult{s.at("seed").get<std::uint64_t>(), s.at("accuracy").get<double>(),
                                              s.at("clean_recall").get<double>(), s.at("backdoor_recall").get<double>()});
            }
            row.mean = r.at("mean").get<double>();
            row.std = r.at("std").get<double>();
            report.rows.push_back(std::move(row));
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
}

enum class ReportFormat { json, csv };

/// CSV layout: attack,dataset,seed,accuracy,mean,std. One row per seed run
/// (mean/std empty) followed by one aggregate row per report row (seed "all",
/// accuracy empty).
inline std::string report_csv(const ExperimentReport& report) {
    std::string out = "attack,dataset,seed,accuracy,mean,std\n";
    for (const auto& row : report.rows) {
        for (const auto& s : row.runs) {
            out += row.attack + "," + row.dataset + "," + std::to_string(s.seed) + "," + detail::csv_number(s.accuracy) + ",,\n";
        }
        out += row.attack + "," + row.dataset + ",all,," + detail::csv_number(row.mean) + "," + detail::csv_number(row.std) + "\n";
    }
    return out;
}

inline void export_report(const ExperimentReport& report, const std::filesystem::path& path, ReportFormat format) {
    detail::write_text(path, format == ReportFormat::json ? to_json(report).dump(2) + "\n" : report_csv(report));
}

/// Short content hash of a configuration, in the style of an abbreviated
/// commit id.
inline std::string run_id_for(const nlohmann::ordered_json& config) { return sha256_hex(config.dump()).substr(0, 12); }

// ---------------------------------------------------------------------------
// Experiments

/// Everything a prompt-tuning run needs besides the data.
struct PromptModel {
    const TextEncoder<float>* text = nullptr;
    const Vocabulary* vocab = nullptr;
};

struct SingleRun {
    FitResult fit;
    EvalResult eval;
    std::size_t contamination = 0;
};

/// Trains on the leave-one-out mixture of `train` and evaluates on the clean
/// plus held-out-attack version of `test`.
inline SingleRun run_single_loo(const EmbeddingPool& train, const EmbeddingPool& test, const PromptModel& model,
                                TrainConfig config, AttackKind held_out, std::uint64_t seed) {
    const LooPlan plan = LooPlan::make(held_out, seed);
    const EmbeddingCache train_cache = build_loo_training_cache(train, plan);
    SingleRun run;
    run.contamination = count_provenance(train_cache, Provenance(held_out));
    if (run.contamination != 0) throw DataError("held-out attack leaked into the training set");
    config.seed = seed;
    run.fit = fit(train_cache, *model.text, *model.vocab, config);
    const Detector det = Detector::build(run.fit.state, *model.text, *model.vocab, config.scale);
    run.eval = evaluate(det, build_loo_test_cache(test, held_out));
    return run;
}

inline std::vector<AttackKind> all_attacks() { return {kAllAttacks.begin(), kAllAttacks.end()}; }

/// One row per held-out attack, one run per seed.
inline ExperimentReport run_loo_experiment(const EmbeddingPool& train, const EmbeddingPool& test, const PromptModel& model,
                                           const TrainConfig& config, const std::vector<std::uint64_t>& seeds,
                                           const std::string& dataset_name,
                                           const std::vector<AttackKind>& held_out = all_attacks()) {
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    ExperimentReport report;
    report.experiment = "loo";
    for (AttackKind kind : held_out) {
        ReportRow row;
        row.attack = std::string(attack_name(kind));
        row.dataset = dataset_name;
        for (std::uint64_t seed : seeds) {
            const SingleRun run = run_single_loo(train, test, model, config, kind, seed);
            row.runs.push_back({seed, run.eval.accuracy, run.eval.clean_recall, run.eval.backdoor_recall});
        }
        finalize_row(row);
        report.rows.push_back(std::move(row));
    }
    return report;
}

struct NamedPools {
    std::string name;
    const EmbeddingPool* train = nullptr;
    const EmbeddingPool* test = nullptr;
};

/// Trains on one dataset's mixture and tests on the other's, in both
/// directions. Dataset column reads "A->B".
inline ExperimentReport run_crossgen(const NamedPools& a, const NamedPools& b, const PromptModel& model,
                                     const TrainConfig& config, const std::vector<std::uint64_t>& seeds,
                                     const std::vector<AttackKind>& held_out = all_attacks()) {
    if (a.name == b.name) throw ConfigError("cross-generalization needs two distinct datasets");
    if (a.train->dim != b.test->dim || b.train->dim != a.test->dim) {
        throw ShapeError("cross-generalization datasets must share the joint embedding dimension");
    }
    ExperimentReport report;
    report.experiment = "crossgen";
    for (const auto& [src, dst] : {std::pair{&a, &b}, std::pair{&b, &a}}) {
        ExperimentReport part = run_loo_experiment(*src->train, *dst->test, model, config, seeds,
                                                   src->name + "->" + dst->name, held_out);
        for (auto& row : part.rows) report.rows.push_back(std::move(row));
    }
    return report;
}

struct AblationRow {
    std::string attack;
    std::string dataset;
    std::vector<std::uint64_t> seeds;
    std::vector<double> static_accuracy;
    std::vector<double> learned_accuracy;
    double static_mean = 0.0;
    double learned_mean = 0.0;
    double difference = 0.0;  // learned_mean - static_mean
    std::uint64_t static_steps = 0;
};

struct AblationReport {
    std::string run_id;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<AblationRow> rows;
};

/// Static arm: detector from the untouched "a photo of" prefix (no optimizer
/// steps). Learned arm: the usual leave-one-out fit.
inline AblationReport run_static_prefix_ablation(const std::vector<NamedPools>& datasets, const PromptModel& model,
                                                 const TrainConfig& config, const std::vector<std::uint64_t>& seeds,
                                                 const std::vector<AttackKind>& held_out = all_attacks()) {
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    AblationReport report;
    const PrefixState static_prefix = init_prefix(*model.vocab, config.prefix_length);
    const Detector static_det = Detector::build(static_prefix, *model.text, *model.vocab, config.scale);
    for (const auto& ds : datasets) {
        for (AttackKind kind : held_out) {
            AblationRow row;
            row.attack = std::string(attack_name(kind));
            row.dataset = ds.name;
            row.static_steps = static_prefix.step;
            const EmbeddingCache test_cache = build_loo_test_cache(*ds.test, kind);
            for (std::uint64_t seed : seeds) {
                row.seeds.push_back(seed);
                row.static_accuracy.push_back(evaluate(static_det, test_cache).accuracy);
                row.learned_accuracy.push_back(run_single_loo(*ds.train, *ds.test, model, config, kind, seed).eval.accuracy);
            }
            row.static_mean = mean_std(row.static_accuracy).first;
            row.learned_mean = mean_std(row.learned_accuracy).first;
            row.difference = row.learned_mean - row.static_mean;
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

inline nlohmann::ordered_json to_json(const AblationReport& report) {
    nlohmann::ordered_json j;
    j["experiment"] = "ablate";
    j["run_id"] = report.run_id;
    j["config"] = report.config;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : report.rows) {
        j["rows"].push_back({{"attack", row.attack},
                             {"dataset", row.dataset},
                             {"seeds", row.seeds},
                             {"static_accuracy", row.static_accuracy},
                             {"learned_accuracy", row.learned_accuracy},
                             {"static_mean", row.static_mean},
                             {"learned_mean", row.learned_mean},
                             {"difference", row.difference},
                             {"static_steps", row.static_steps}});
    }
    return j;
}

/// CSV layout: attack,dataset,learned,static,difference (means over seeds).
inline std::string ablation_csv(const AblationReport& report) {
    std::string out = "attack,dataset,learned,static,difference\n";
    for (const auto& row : report.rows) {
        out += row.attack + "," + row.dataset + "," + detail::csv_number(row.learned_mean) + "," +
               detail::csv_number(row.static_mean) + "," + detail::csv_number(row.difference) + "\n";
    }
    return out;
}

inline void export_report(const AblationReport& report, const std::filesystem::path& path, ReportFormat format) {
    detail::write_text(path, format == ReportFormat::json ? to_json(report).dump(2) + "\n" : ablation_csv(report));
}

}  // namespace bsentinel
