#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bsentinel/dataset.hpp"
#include "bsentinel/detector.hpp"
#include "bsentinel/embedding_cache.hpp"
#include "bsentinel/hash.hpp"
#include "bsentinel/pipeline.hpp"
#include "bsentinel/prompt_tuner.hpp"
#include "bsentinel/run_config.hpp"
#include "bsentinel/tsne.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace bsentinel;

namespace {

constexpr const char* kToolVersion = "1.0.0";

struct Flags {
    std::string config;
    std::optional<std::string> out;
    std::vector<std::uint64_t> seeds;
    std::optional<std::size_t> threads;
    std::optional<std::string> encoder;
    std::vector<std::string> import_embeddings;
    std::optional<std::string> held_out;
    std::optional<std::string> prefix;
    std::optional<std::string> dataset_cache;
};

void add_common_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON run configuration file");
    cmd->add_option("--out", f.out, "Output directory (created if missing)");
    cmd->add_option("--seed", f.seeds, "Run seed; repeat for several seeds");
    cmd->add_option("--threads", f.threads, "Worker thread cap")->check(CLI::PositiveNumber);
    cmd->add_option("--encoder", f.encoder, "Embedding source")->check(CLI::IsMember({"toy", "import"}));
    cmd->add_option("--import-embeddings", f.import_embeddings,
                    "Embedding cache file; repeat as train,test (crossgen: A-train,A-test,B-train,B-test)");
    cmd->add_option("--held-out", f.held_out, "Held-out attack for forge/train/eval/project");
    cmd->add_option("--prefix", f.prefix, "Trained prefix file (eval, project)");
    cmd->add_option("--dataset-cache", f.dataset_cache, "Dataset cache to embed (embed)");
}

RunConfig effective_config(const Flags& f) {
    json j = json::object();
    if (!f.config.empty()) {
        std::ifstream in(f.config);
        if (!in) throw ConfigError("input path '" + f.config + "' does not exist or is unreadable");
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError("config '" + f.config + "' is not valid JSON: " + e.what());
        }
    }
    RunConfig c = run_config_from_json(j);
    if (f.out) c.out = *f.out;
    if (!f.seeds.empty()) c.seeds = f.seeds;
    if (f.threads) c.threads = *f.threads;
    if (f.encoder) c.encoder = *f.encoder;
    if (!f.import_embeddings.empty()) c.import_embeddings = f.import_embeddings;
    if (f.held_out) c.held_out = parse_attack(*f.held_out);
    if (f.prefix) c.prefix = *f.prefix;
    if (f.dataset_cache) c.dataset_cache = *f.dataset_cache;
    c.validate();
    return c;
}

/// Config echo used inside reports: everything that can change a result.
json result_config(const RunConfig& c) {
    json j = to_json(c);
    j.erase("out");
    j.erase("threads");
    return j;
}

// ---------------------------------------------------------------------------
// Data and model acquisition

Dataset fit_shape(Dataset d, ImageShape shape) {
    if (d.shape == shape) return d;
    for (auto& s : d.samples) s.image = resize_bilinear(s.image, shape.height, shape.width);
    d.shape = shape;
    return d;
}

Dataset truncate(Dataset d, std::size_t limit) {
    if (limit > 0 && d.size() > limit) d.samples.resize(limit);
    return d;
}

Dataset load_clean(const DatasetConfig& dc, bool train) {
    const ImageShape shape{3, dc.height, dc.width};
    const auto& paths = train ? dc.train : dc.test;
    const std::size_t limit = train ? dc.train_size : dc.test_size;
    Dataset d;
    if (dc.source == "synthetic") {
        return generate_synthetic_dataset(limit, dc.classes, shape, derive_seed(dc.seed, train ? 1 : 2));
    } else if (dc.source == "cifar10") {
        std::vector<fs::path> files(paths.begin(), paths.end());
        d = truncate(load_cifar10_binary(files), limit);
    } else if (dc.source == "directory") {
        d = truncate(load_image_directory(paths[0], train ? dc.train_labels : dc.test_labels, shape, dc.classes), limit);
    } else {
        d = truncate(load_dataset(paths[0]), limit);
        for (const auto& s : d.samples) {
            if (!s.provenance.is_clean()) throw DataError("dataset cache '" + paths[0] + "' must hold clean samples only");
        }
        if (d.shape.channels != 3) throw DataError("dataset cache '" + paths[0] + "' must hold 3-channel images");
    }
    if (d.empty()) throw DataError("dataset '" + dc.name + "' " + (train ? "train" : "test") + " split is empty");
    return fit_shape(std::move(d), shape);
}

EncoderStack toy_stack(const RunConfig& c, ImageShape input) {
    EncoderConfig ec;
    ec.image.input = input;
    ec.token_std = c.token_std;
    return build_toy_encoders(ec, c.encoder_seed);
}

/// Prompt-side model. Toy mode uses the toy stack; import mode builds the toy
/// text encoder at the imported widths and takes the word embeddings from the
/// cache's token section.
struct Model {
    EncoderStack stack;
    PromptModel prompt() const { return PromptModel{&stack.text, &stack.vocab}; }
};

Model import_model(const RunConfig& c, const EmbeddingCache& with_tokens) {
    Model m;
    Vocabulary vocab = vocabulary_from_cache(with_tokens);
    EncoderConfig ec;
    ec.token_std = c.token_std;
    ec.text.width = vocab.width();
    ec.text.heads = vocab.width() % 2 == 0 ? 2 : 1;
    ec.text.ff_width = 2 * vocab.width();
    ec.text.joint_dim = with_tokens.dim;
    ec.image.joint_dim = with_tokens.dim;
    m.stack = build_toy_encoders(ec, c.encoder_seed);
    m.stack.vocab = std::move(vocab);
    return m;
}

struct DatasetPools {
    std::string name;
    EmbeddingPool train;
    EmbeddingPool test;
};

struct Workspace {
    Model model;
    std::vector<DatasetPools> datasets;
};

EmbeddingCache import_cache(const std::string& path) {
    ImportResult r = import_embeddings(path);
    if (r.renormalized > 0) spdlog::warn("{}: re-normalized {} embedding(s) off unit norm", path, r.renormalized);
    spdlog::info("imported {} embeddings of dimension {} from {}", r.cache.size(), r.cache.dim, path);
    return r.cache;
}

/// Builds or imports the embedding pools of the first `count` configured
/// datasets (1 or 2).
Workspace workspace(const RunConfig& c, std::size_t count) {
    Workspace w;
    std::vector<DatasetConfig> dcs{c.dataset};
    if (count > 1) {
        if (!c.second_dataset && c.encoder == "toy") throw ConfigError("this command needs 'second_dataset' in the config");
        DatasetConfig second = c.second_dataset ? *c.second_dataset : DatasetConfig{};
        if (!c.second_dataset) second.name = "second";
        dcs.push_back(second);
    }
    if (c.encoder == "import") {
        if (c.import_embeddings.size() != 2 * count) {
            throw ConfigError("import mode needs " + std::to_string(2 * count) + " --import-embeddings files (train,test per dataset), got " +
                              std::to_string(c.import_embeddings.size()));
        }
        std::optional<EmbeddingCache> first;
        for (std::size_t i = 0; i < count; ++i) {
            EmbeddingCache train = import_cache(c.import_embeddings[2 * i]);
            EmbeddingCache test = import_cache(c.import_embeddings[2 * i + 1]);
            if (train.dim != test.dim) throw DataError("train and test embedding dimensions differ");
            if (!first) first = train;
            w.datasets.push_back({dcs[i].name, make_pool(train), make_pool(test)});
        }
        w.model = import_model(c, *first);
        return w;
    }
    const ImageShape shape{3, c.dataset.height, c.dataset.width};
    w.model.stack = toy_stack(c, shape);
    for (std::size_t i = 0; i < count; ++i) {
        if (!(ImageShape{3, dcs[i].height, dcs[i].width} == shape)) {
            throw ConfigError("both datasets must use the same image size in toy mode");
        }
        spdlog::info("embedding dataset '{}' (clean + {} attacks)", dcs[i].name, kAllAttacks.size());
        Dataset train = load_clean(dcs[i], true);
        Dataset test = load_clean(dcs[i], false);
        w.datasets.push_back({dcs[i].name, embed_pool(w.model.stack.image, train, c.triggers, c.threads),
                              embed_pool(w.model.stack.image, test, c.triggers, c.threads)});
    }
    return w;
}

// ---------------------------------------------------------------------------
// Outputs

class Outputs {
public:
    Outputs(const RunConfig& c, std::string command) : config_(c), command_(std::move(command)) {
        dir_ = c.out;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory '" + dir_.string() + "'");
        json id_source = {{"command", command_}, {"config", result_config(c)}};
        run_id_ = run_id_for(id_source);
    }

    const std::string& run_id() const { return run_id_; }
    fs::path path(const std::string& name) const { return dir_ / name; }

    void record(const std::string& name) {
        const auto bytes = container::read_file(path(name));
        files_.push_back({{"file", name}, {"bytes", bytes.size()}, {"sha256", Sha256().update(bytes.data(), bytes.size()).hex()}});
    }

    void write_json(const std::string& name, const json& j) {
        detail::write_text(path(name), j.dump(2) + "\n");
        record(name);
    }

    json& summary() { return summary_; }

    /// Manifest: effective config, output digests and a content hash over
    /// everything except the timestamp.
    fs::path finish() {
        json m;
        m["tool"] = "bsentinel";
        m["version"] = kToolVersion;
        m["command"] = command_;
        m["run_id"] = run_id_;
        m["config"] = to_json(config_);
        m["outputs"] = files_;
        m["summary"] = summary_;
        m["content_hash"] = sha256_hex(m.dump());
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        m["timestamp"] = stamp;
        const fs::path p = path(command_ + "_manifest.json");
        detail::write_text(p, m.dump(2) + "\n");
        return p;
    }

private:
    const RunConfig& config_;
    std::string command_;
    fs::path dir_;
    std::string run_id_;
    json files_ = json::array();
    json summary_ = json::object();
};

json provenance_counts(const Dataset& d) {
    json j = json::object();
    j["clean"] = count_provenance(d, Provenance::clean());
    for (AttackKind k : kAllAttacks) j[std::string(attack_name(k))] = count_provenance(d, Provenance(k));
    j["total"] = d.size();
    return j;
}

json eval_json(const EvalResult& r) {
    return {{"total", r.total},
            {"accuracy", r.accuracy},
            {"clean_recall", r.clean_recall},
            {"backdoor_recall", r.backdoor_recall},
            {"confusion", {{"clean_as_clean", r.confusion[0][0]},
                           {"clean_as_backdoored", r.confusion[0][1]},
                           {"backdoored_as_clean", r.confusion[1][0]},
                           {"backdoored_as_backdoored", r.confusion[1][1]}}}};
}

void save_cache(Outputs& o, const std::string& name, EmbeddingCache cache, const Vocabulary& vocab) {
    cache.token_dim = vocab.width();
    cache.tokens = token_section(vocab);
    export_embeddings(cache, o.path(name));
    o.record(name);
    std::cout << name << ": " << cache.size() << " embeddings, dim " << cache.dim << "\n";
}

// ---------------------------------------------------------------------------
// Commands

void cmd_forge(const RunConfig& c, Outputs& o) {
    const Dataset train = load_clean(c.dataset, true);
    const Dataset test = load_clean(c.dataset, false);
    const LooPlan plan = LooPlan::make(c.held_out, c.seeds.front());
    const Dataset loo_train = build_loo_training_set(train, plan, c.triggers);
    const Dataset loo_test = build_loo_test_set(test, plan, spec_for(c.triggers, c.held_out));
    if (count_provenance(loo_train, Provenance(c.held_out)) != 0) throw DataError("held-out attack leaked into training set");
    save_dataset(loo_train, o.path("loo_train.bsdc"));
    o.record("loo_train.bsdc");
    save_dataset(loo_test, o.path("loo_test.bsdc"));
    o.record("loo_test.bsdc");
    o.summary()["held_out"] = std::string(attack_name(c.held_out));
    o.summary()["seed"] = c.seeds.front();
    o.summary()["counts"]["loo_train"] = provenance_counts(loo_train);
    o.summary()["counts"]["loo_test"] = provenance_counts(loo_test);
    if (c.poison) {
        const Dataset poisoned =
            poison_dataset(train, spec_for(c.triggers, c.poison->attack), c.poison->rate, c.poison->target, c.seeds.front());
        save_dataset(poisoned, o.path("poisoned.bsdc"));
        o.record("poisoned.bsdc");
        o.summary()["counts"]["poisoned"] = provenance_counts(poisoned);
    }
}

void cmd_embed(const RunConfig& c, Outputs& o) {
    if (c.encoder != "toy") throw ConfigError("embed computes embeddings with the toy encoder; use --encoder toy");
    if (!c.dataset_cache.empty()) {
        const Dataset d = load_dataset(c.dataset_cache);
        const EncoderStack stack = toy_stack(c, d.shape);
        save_cache(o, "embeddings.bsec", precompute_image_embeddings(stack.image, d, c.threads), stack.vocab);
        o.summary()["encoder_sha256"] = encoder_weights_sha256(stack);
        return;
    }
    Workspace w = workspace(c, c.second_dataset ? 2 : 1);
    for (const auto& ds : w.datasets) {
        save_cache(o, ds.name + "_train.bsec", pool_to_cache(ds.train), w.model.stack.vocab);
        save_cache(o, ds.name + "_test.bsec", pool_to_cache(ds.test), w.model.stack.vocab);
    }
    o.summary()["encoder_sha256"] = encoder_weights_sha256(w.model.stack);
}

void cmd_train(const RunConfig& c, Outputs& o) {
    Workspace w = workspace(c, 1);
    const auto& ds = w.datasets.front();
    TrainConfig tc = c.train;
    tc.seed = c.seeds.front();
    const EmbeddingCache train_cache = build_loo_training_cache(ds.train, LooPlan::make(c.held_out, tc.seed));
    const std::string before = encoder_weights_sha256(w.model.stack);
    const FitResult fit_result = fit(train_cache, w.model.stack.text, w.model.stack.vocab, tc);
    if (encoder_weights_sha256(w.model.stack) != before) throw NumericError("encoder weights changed during training");
    save_prefix(fit_result.state, tc, tc.epochs, o.path("prefix.json"));
    o.record("prefix.json");
    json history = json::array();
    for (std::size_t e = 0; e < fit_result.history.size(); ++e) {
        history.push_back({{"epoch", e + 1}, {"mean_loss", fit_result.history[e].mean_loss}, {"accuracy", fit_result.history[e].accuracy}});
        spdlog::debug("epoch {}: loss {:.6f} train accuracy {:.2f}%", e + 1, fit_result.history[e].mean_loss,
                      fit_result.history[e].accuracy);
    }
    o.write_json("train_history.json", {{"run_id", o.run_id()},
                                        {"held_out", std::string(attack_name(c.held_out))},
                                        {"seed", tc.seed},
                                        {"steps", fit_result.state.step},
                                        {"history", history}});
    o.summary()["steps"] = fit_result.state.step;
    o.summary()["final_train_accuracy"] = fit_result.history.back().accuracy;
}

Detector detector_from(const RunConfig& c, const Model& m, const EmbeddingPool& train) {
    if (!c.prefix.empty()) {
        return Detector::build(load_prefix(c.prefix), m.stack.text, m.stack.vocab, c.train.scale);
    }
    TrainConfig tc = c.train;
    tc.seed = c.seeds.front();
    const auto fit_result = fit(build_loo_training_cache(train, LooPlan::make(c.held_out, tc.seed)), m.stack.text, m.stack.vocab, tc);
    return Detector::build(fit_result.state, m.stack.text, m.stack.vocab, c.train.scale);
}

void cmd_eval(const RunConfig& c, Outputs& o) {
    if (c.prefix.empty()) throw ConfigError("eval needs a trained prefix (--prefix)");
    Workspace w = workspace(c, 1);
    const Detector det = detector_from(c, w.model, w.datasets.front().train);
    const EvalResult r = evaluate(det, build_loo_test_cache(w.datasets.front().test, c.held_out));
    json j = eval_json(r);
    j["run_id"] = o.run_id();
    j["held_out"] = std::string(attack_name(c.held_out));
    j["dataset"] = w.datasets.front().name;
    o.write_json("eval_report.json", j);
    o.summary()["accuracy"] = r.accuracy;
    std::cout << "accuracy " << r.accuracy << "%\n";
}

void write_report(Outputs& o, const std::string& stem, ExperimentReport report, const RunConfig& c) {
    report.run_id = o.run_id();
    report.config = result_config(c);
    export_report(report, o.path(stem + ".json"), ReportFormat::json);
    o.record(stem + ".json");
    export_report(report, o.path(stem + ".csv"), ReportFormat::csv);
    o.record(stem + ".csv");
    for (const auto& row : report.rows) {
        std::cout << row.dataset << " " << row.attack << ": " << row.mean << " +- " << row.std << "\n";
        o.summary()["rows"].push_back({{"attack", row.attack}, {"dataset", row.dataset}, {"mean", row.mean}, {"std", row.std}});
    }
}

void cmd_loo(const RunConfig& c, Outputs& o) {
    Workspace w = workspace(c, 1);
    const auto& ds = w.datasets.front();
    write_report(o, "loo_report", run_loo_experiment(ds.train, ds.test, w.model.prompt(), c.train, c.seeds, ds.name, c.attacks), c);
}

void cmd_crossgen(const RunConfig& c, Outputs& o) {
    Workspace w = workspace(c, 2);
    const auto& a = w.datasets[0];
    const auto& b = w.datasets[1];
    write_report(o, "crossgen_report",
                 run_crossgen({a.name, &a.train, &a.test}, {b.name, &b.train, &b.test}, w.model.prompt(), c.train, c.seeds, c.attacks), c);
}

void cmd_ablate(const RunConfig& c, Outputs& o) {
    const std::size_t count = c.second_dataset ? 2 : (c.encoder == "import" && c.import_embeddings.size() == 4 ? 2 : 1);
    Workspace w = workspace(c, count);
    std::vector<NamedPools> named;
    for (const auto& ds : w.datasets) named.push_back({ds.name, &ds.train, &ds.test});
    AblationReport r = run_static_prefix_ablation(named, w.model.prompt(), c.train, c.seeds, c.attacks);
    r.run_id = o.run_id();
    r.config = result_config(c);
    export_report(r, o.path("ablation_report.json"), ReportFormat::json);
    o.record("ablation_report.json");
    export_report(r, o.path("ablation_report.csv"), ReportFormat::csv);
    o.record("ablation_report.csv");
    for (const auto& row : r.rows) {
        std::cout << row.dataset << " " << row.attack << ": learned " << row.learned_mean << " static " << row.static_mean << "\n";
        o.summary()["rows"].push_back({{"attack", row.attack},
                                       {"dataset", row.dataset},
                                       {"learned", row.learned_mean},
                                       {"static", row.static_mean},
                                       {"difference", row.difference}});
    }
}

void cmd_project(const RunConfig& c, Outputs& o) {
    Workspace w = workspace(c, 1);
    const auto& ds = w.datasets.front();
    const Detector det = detector_from(c, w.model, ds.train);
    TsneConfig tc = c.tsne;
    tc.threads = c.threads;
    const EmbeddingCache test = build_loo_test_cache(ds.test, c.held_out);
    const ProjectedPoints pts = project_embeddings(test, c.tsne_include_text ? &det.text() : nullptr, tc, [](const KlCheckpoint& k) {
        spdlog::info("t-SNE iteration {}: KL {:.6f}{}", k.iteration, k.kl, k.exaggerated ? " (exaggerated)" : "");
    });
    export_scatter(pts, o.path("projection.csv"), ScatterFormat::csv);
    o.record("projection.csv");
    export_scatter(pts, o.path("projection.svg"), ScatterFormat::svg);
    o.record("projection.svg");
    json kl = json::array();
    for (const auto& k : pts.kl_history) kl.push_back({{"iteration", k.iteration}, {"kl", k.kl}, {"exaggerated", k.exaggerated}});
    o.write_json("projection_kl.json", {{"run_id", o.run_id()},
                                        {"held_out", std::string(attack_name(c.held_out))},
                                        {"points", pts.size()},
                                        {"final_kl", pts.final_kl},
                                        {"kl_history", kl}});
    o.summary()["points"] = pts.size();
    o.summary()["final_kl"] = pts.final_kl;
}

// ---------------------------------------------------------------------------

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("bsentinel");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("BSENTINEL_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") spdlog::set_level(spdlog::level::err);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else throw ConfigError("BSENTINEL_LOG must be one of error, info, debug (got '" + level + "')");
}

int fail(const std::string& category, const std::string& message, int code) {
    json err = {{"error", {{"category", category}, {"message", message}, {"exit_code", code}}}};
    std::cerr << err.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backdoor image detector via prompt tuning on a frozen dual encoder", "bsentinel"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    using Handler = void (*)(const RunConfig&, Outputs&);
    struct Command {
        const char* name;
        const char* help;
        Handler run;
    };
    const std::vector<Command> commands{
        {"forge", "Build leave-one-out poisoned train/test dataset caches", cmd_forge},
        {"embed", "Compute image embedding caches with the toy encoder", cmd_embed},
        {"train", "Tune the prompt prefix on the leave-one-out training mixture", cmd_train},
        {"eval", "Evaluate a trained prefix on clean + held-out-attack test data", cmd_eval},
        {"loo", "Leave-one-attack-out experiment over all seeds", cmd_loo},
        {"crossgen", "Train on one dataset, test on the other, both directions", cmd_crossgen},
        {"ablate", "Learned vs static prefix comparison", cmd_ablate},
        {"project", "t-SNE projection of test embeddings to CSV and SVG", cmd_project},
    };
    Flags flags;
    std::vector<CLI::App*> subs;
    for (const auto& cmd : commands) {
        subs.push_back(app.add_subcommand(cmd.name, cmd.help));
        add_common_flags(subs.back(), flags);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("config", e.what(), 2);
    }

    try {
        setup_logging();
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (!subs[i]->parsed()) continue;
            const RunConfig config = effective_config(flags);
            Outputs out(config, commands[i].name);
            spdlog::info("{} run {} -> {}", commands[i].name, out.run_id(), config.out);
            commands[i].run(config, out);
            const fs::path manifest = out.finish();
            std::cout << json{{"command", commands[i].name}, {"run_id", out.run_id()}, {"manifest", manifest.string()}}.dump()
                      << std::endl;
        }
        return 0;
    } catch (const Error& e) {
        switch (e.category()) {
            case Error::Category::config: return fail("config", e.what(), 2);
            case Error::Category::data: return fail("data", e.what(), 3);
            case Error::Category::numeric: return fail("numeric", e.what(), 4);
        }
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
    return 1;
}
