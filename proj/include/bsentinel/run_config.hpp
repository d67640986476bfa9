#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "attack_kind.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "prompt_tuner.hpp"
#include "trigger.hpp"
#include "tsne.hpp"

namespace bsentinel {

/// Where the clean images of one dataset come from.
///   synthetic: generated; train_size/test_size/classes/seed apply
///   cifar10:   train/test list CIFAR-10 binary batch files
///   directory: train/test hold one image directory each, with a
///              filename,label CSV in train_labels/test_labels
///   cache:     train/test hold one clean dataset cache (BSDC) each
/// For the file-backed sources a nonzero train_size/test_size keeps only the
/// first samples.
struct DatasetConfig {
    std::string name = "synthetic";
    std::string source = "synthetic";
    std::vector<std::string> train;
    std::vector<std::string> test;
    std::string train_labels;
    std::string test_labels;
    std::size_t train_size = 1000;
    std::size_t test_size = 500;
    std::uint32_t classes = 10;
    std::size_t height = 32;
    std::size_t width = 32;
    std::uint64_t seed = 0;

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct PoisonConfig {
    AttackKind attack = AttackKind::badnets_sq;
    double rate = 0.1;
    std::uint32_t target = 0;

    friend bool operator==(const PoisonConfig&, const PoisonConfig&) = default;
};

struct RunConfig {
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t threads = 1;
    std::string encoder = "toy";
    std::uint64_t encoder_seed = 0;
    double token_std = 0.001;
    TrainConfig train{};
    SpecMap triggers = default_specs();
    DatasetConfig dataset{};
    std::optional<DatasetConfig> second_dataset;
    AttackKind held_out = AttackKind::trojan_wm;
    std::vector<AttackKind> attacks{kAllAttacks.begin(), kAllAttacks.end()};
    std::optional<PoisonConfig> poison;
    std::vector<std::string> import_embeddings;
    std::string prefix;
    std::string dataset_cache;
    TsneConfig tsne{};
    bool tsne_include_text = true;
    std::string out = "out";

    void validate() const;
};

namespace detail {

template <typename F>
void for_each_key(const nlohmann::ordered_json& j, const std::string& where, const std::set<std::string>& allowed, F&& f) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
        try {
            f(key, value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for '" + key + "' in " + where + ": " + e.what());
        }
    }
}

inline DatasetConfig dataset_from_json(const nlohmann::ordered_json& j, const std::string& where) {
    DatasetConfig d;
    for_each_key(j, where,
                 {"name", "source", "train", "test", "train_labels", "test_labels", "train_size", "test_size", "classes",
                  "height", "width", "seed"},
                 [&](const std::string& k, const nlohmann::ordered_json& v) {
                     if (k == "name") d.name = v.get<std::string>();
                     else if (k == "source") d.source = v.get<std::string>();
                     else if (k == "train") d.train = v.get<std::vector<std::string>>();
                     else if (k == "test") d.test = v.get<std::vector<std::string>>();
                     else if (k == "train_labels") d.train_labels = v.get<std::string>();
                     else if (k == "test_labels") d.test_labels = v.get<std::string>();
                     else if (k == "train_size") d.train_size = v.get<std::size_t>();
                     else if (k == "test_size") d.test_size = v.get<std::size_t>();
                     else if (k == "classes") d.classes = v.get<std::uint32_t>();
                     else if (k == "height") d.height = v.get<std::size_t>();
                     else if (k == "width") d.width = v.get<std::size_t>();
                     else if (k == "seed") d.seed = v.get<std::uint64_t>();
                 });
    return d;
}

inline nlohmann::ordered_json dataset_to_json(const DatasetConfig& d) {
    return {{"name", d.name},
            {"source", d.source},
            {"train", d.train},
            {"test", d.test},
            {"train_labels", d.train_labels},
            {"test_labels", d.test_labels},
            {"train_size", d.train_size},
            {"test_size", d.test_size},
            {"classes", d.classes},
            {"height", d.height},
            {"width", d.width},
            {"seed", d.seed}};
}

inline void check_dataset(const DatasetConfig& d, const std::string& where) {
    static const std::set<std::string> sources{"synthetic", "cifar10", "directory", "cache"};
    if (!sources.count(d.source)) throw ConfigError(where + ".source must be one of synthetic, cifar10, directory, cache");
    if (d.name.empty() || d.name.find_first_of(",\"\n") != std::string::npos) {
        throw ConfigError(where + ".name must be non-empty and free of commas, quotes and newlines");
    }
    if (d.classes < 1) throw ConfigError(where + ".classes must be at least 1");
    if (d.height == 0 || d.width == 0) throw ConfigError(where + " image size must be positive");
    if (d.source == "synthetic") {
        if (d.train_size < d.classes || d.test_size < d.classes) {
            throw ConfigError(where + ": synthetic train_size and test_size must be at least the class count");
        }
        return;
    }
    if (d.train.empty() || d.test.empty()) throw ConfigError(where + ": '" + d.source + "' source needs train and test paths");
    if ((d.source == "directory" || d.source == "cache") && (d.train.size() != 1 || d.test.size() != 1)) {
        throw ConfigError(where + ": '" + d.source + "' source takes exactly one train and one test path");
    }
    if (d.source == "directory" && (d.train_labels.empty() || d.test_labels.empty())) {
        throw ConfigError(where + ": directory source needs train_labels and test_labels CSV paths");
    }
    auto require = [&](const std::string& p) {
        if (!std::filesystem::exists(p)) throw ConfigError(where + ": input path '" + p + "' does not exist");
    };
    for (const auto& p : d.train) require(p);
    for (const auto& p : d.test) require(p);
    if (d.source == "directory") {
        require(d.train_labels);
        require(d.test_labels);
    }
}

inline nlohmann::ordered_json tsne_to_json(const TsneConfig& t, bool include_text) {
    return {{"perplexity", t.perplexity},
            {"iterations", t.iterations},
            {"learning_rate", t.learning_rate},
            {"momentum", t.momentum},
            {"final_momentum", t.final_momentum},
            {"momentum_switch", t.momentum_switch},
            {"exaggeration", t.exaggeration},
            {"exaggeration_iters", t.exaggeration_iters},
            {"init_std", t.init_std},
            {"seed", t.seed},
            {"max_points", t.max_points},
            {"include_text", include_text}};
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seeds"] = c.seeds;
    j["threads"] = c.threads;
    j["encoder"] = c.encoder;
    j["encoder_seed"] = c.encoder_seed;
    j["token_std"] = c.token_std;
    j["train"] = c.train;
    j["triggers"] = nlohmann::ordered_json::array();
    for (const auto& [kind, spec] : c.triggers) j["triggers"].push_back(spec);
    j["dataset"] = detail::dataset_to_json(c.dataset);
    j["second_dataset"] = c.second_dataset ? detail::dataset_to_json(*c.second_dataset) : nlohmann::ordered_json(nullptr);
    j["held_out"] = std::string(attack_name(c.held_out));
    j["attacks"] = nlohmann::ordered_json::array();
    for (AttackKind k : c.attacks) j["attacks"].push_back(std::string(attack_name(k)));
    if (c.poison) {
        j["poison"] = {{"attack", std::string(attack_name(c.poison->attack))}, {"rate", c.poison->rate}, {"target", c.poison->target}};
    } else {
        j["poison"] = nullptr;
    }
    j["import_embeddings"] = c.import_embeddings;
    j["prefix"] = c.prefix;
    j["dataset_cache"] = c.dataset_cache;
    j["tsne"] = detail::tsne_to_json(c.tsne, c.tsne_include_text);
    j["out"] = c.out;
    return j;
}

/// Parses a run configuration. Missing keys keep their defaults; unknown keys
/// at any level are rejected. Trigger entries replace the default spec of
/// their kind.
inline RunConfig run_config_from_json(const nlohmann::ordered_json& j) {
    RunConfig c;
    detail::for_each_key(
        j, "config",
        {"seeds", "threads", "encoder", "encoder_seed", "token_std", "train", "triggers", "dataset", "second_dataset",
         "held_out", "attacks", "poison", "import_embeddings", "prefix", "dataset_cache", "tsne", "out"},
        [&](const std::string& k, const nlohmann::ordered_json& v) {
            if (k == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
            else if (k == "threads") c.threads = v.get<std::size_t>();
            else if (k == "encoder") c.encoder = v.get<std::string>();
            else if (k == "encoder_seed") c.encoder_seed = v.get<std::uint64_t>();
            else if (k == "token_std") c.token_std = v.get<double>();
            else if (k == "train") {
                detail::for_each_key(v, "train",
                                     {"scale", "learning_rate", "epochs", "batch_size", "seed", "beta1", "beta2", "adam_eps",
                                      "prefix_length"},
                                     [&](const std::string& tk, const nlohmann::ordered_json& tv) {
                                         if (tk == "scale") c.train.scale = tv.get<double>();
                                         else if (tk == "learning_rate") c.train.learning_rate = tv.get<double>();
                                         else if (tk == "epochs") c.train.epochs = tv.get<std::size_t>();
                                         else if (tk == "batch_size") c.train.batch_size = tv.get<std::size_t>();
                                         else if (tk == "seed") c.train.seed = tv.get<std::uint64_t>();
                                         else if (tk == "beta1") c.train.beta1 = tv.get<double>();
                                         else if (tk == "beta2") c.train.beta2 = tv.get<double>();
                                         else if (tk == "adam_eps") c.train.adam_eps = tv.get<double>();
                                         else if (tk == "prefix_length") c.train.prefix_length = tv.get<std::size_t>();
                                     });
            } else if (k == "triggers") {
                if (!v.is_array()) throw ConfigError("'triggers' must be an array of trigger specs");
                for (const auto& s : v) {
                    TriggerSpec spec = trigger_spec_from_json(s);
                    c.triggers[spec.kind] = spec;
                }
            } else if (k == "dataset") c.dataset = detail::dataset_from_json(v, "dataset");
            else if (k == "second_dataset") {
                if (v.is_null()) c.second_dataset.reset();
                else c.second_dataset = detail::dataset_from_json(v, "second_dataset");
            } else if (k == "held_out") c.held_out = parse_attack(v.get<std::string>());
            else if (k == "attacks") {
                c.attacks.clear();
                for (const auto& a : v) c.attacks.push_back(parse_attack(a.get<std::string>()));
            } else if (k == "poison") {
                if (v.is_null()) {
                    c.poison.reset();
                    return;
                }
                PoisonConfig p;
                detail::for_each_key(v, "poison", {"attack", "rate", "target"},
                                     [&](const std::string& pk, const nlohmann::ordered_json& pv) {
                                         if (pk == "attack") p.attack = parse_attack(pv.get<std::string>());
                                         else if (pk == "rate") p.rate = pv.get<double>();
                                         else if (pk == "target") p.target = pv.get<std::uint32_t>();
                                     });
                c.poison = p;
            } else if (k == "import_embeddings") c.import_embeddings = v.get<std::vector<std::string>>();
            else if (k == "prefix") c.prefix = v.get<std::string>();
            else if (k == "dataset_cache") c.dataset_cache = v.get<std::string>();
            else if (k == "tsne") {
                detail::for_each_key(v, "tsne",
                                     {"perplexity", "iterations", "learning_rate", "momentum", "final_momentum",
                                      "momentum_switch", "exaggeration", "exaggeration_iters", "init_std", "seed",
                                      "max_points", "include_text"},
                                     [&](const std::string& tk, const nlohmann::ordered_json& tv) {
                                         auto& t = c.tsne;
                                         if (tk == "perplexity") t.perplexity = tv.get<double>();
                                         else if (tk == "iterations") t.iterations = tv.get<std::size_t>();
                                         else if (tk == "learning_rate") t.learning_rate = tv.get<double>();
                                         else if (tk == "momentum") t.momentum = tv.get<double>();
                                         else if (tk == "final_momentum") t.final_momentum = tv.get<double>();
                                         else if (tk == "momentum_switch") t.momentum_switch = tv.get<std::size_t>();
                                         else if (tk == "exaggeration") t.exaggeration = tv.get<double>();
                                         else if (tk == "exaggeration_iters") t.exaggeration_iters = tv.get<std::size_t>();
                                         else if (tk == "init_std") t.init_std = tv.get<double>();
                                         else if (tk == "seed") t.seed = tv.get<std::uint64_t>();
                                         else if (tk == "max_points") t.max_points = tv.get<std::size_t>();
                                         else if (tk == "include_text") c.tsne_include_text = tv.get<bool>();
                                     });
            } else if (k == "out") c.out = v.get<std::string>();
        });
    return c;
}

inline void RunConfig::validate() const {
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (encoder != "toy" && encoder != "import") throw ConfigError("encoder must be 'toy' or 'import'");
    if (!(token_std > 0.0)) throw ConfigError("token_std must be positive");
    train.validate();
    for (const auto& [kind, spec] : triggers) {
        spec.validate();
        realize_trigger(spec, ImageShape{3, dataset.height, dataset.width});
    }
    if (attacks.empty()) throw ConfigError("'attacks' must list at least one attack");
    detail::check_dataset(dataset, "dataset");
    if (second_dataset) {
        detail::check_dataset(*second_dataset, "second_dataset");
        if (second_dataset->name == dataset.name) throw ConfigError("second_dataset needs a different name");
    }
    if (poison) {
        if (!(poison->rate > 0.0 && poison->rate <= 1.0)) throw ConfigError("poison.rate must be in (0, 1]");
        if (poison->target >= dataset.classes) throw ConfigError("poison.target out of range");
    }
    for (const auto& p : import_embeddings) {
        if (!std::filesystem::exists(p)) throw ConfigError("input path '" + p + "' does not exist");
    }
    if (!prefix.empty() && !std::filesystem::exists(prefix)) throw ConfigError("input path '" + prefix + "' does not exist");
    if (!dataset_cache.empty() && !std::filesystem::exists(dataset_cache)) {
        throw ConfigError("input path '" + dataset_cache + "' does not exist");
    }
    tsne.validate();
    if (out.empty()) throw ConfigError("output directory must be set");
}

}  // namespace bsentinel
