#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "batching.hpp"
#include "embedding_cache.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace bsentinel {

/// Class order is fixed: index 0 is clean, index 1 is backdoored.
inline const std::vector<std::string>& class_words() {
    static const std::vector<std::string> words{"clean", "backdoored"};
    return words;
}

inline const std::vector<std::string>& prefix_init_words() {
    static const std::vector<std::string> words{"a", "photo", "of"};
    return words;
}

struct TrainConfig {
    double scale = 100.0;
    double learning_rate = 1e-5;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t prefix_length = 3;

    void validate() const {
        if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("scale must be positive");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("Adam eps must be positive");
        if (prefix_length < 1) throw ConfigError("prefix length must be at least 1");
    }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
    j = nlohmann::ordered_json{{"scale", c.scale},         {"learning_rate", c.learning_rate},
                               {"epochs", c.epochs},       {"batch_size", c.batch_size},
                               {"seed", c.seed},           {"beta1", c.beta1},
                               {"beta2", c.beta2},         {"adam_eps", c.adam_eps},
                               {"prefix_length", c.prefix_length}};
}

/// The learnable prompt rows plus their Adam moments. This is the only state
/// that training changes.
struct PrefixState {
    Tensor<float> prefix;
    Tensor<float> adam_m;
    Tensor<float> adam_v;
    std::uint64_t step = 0;

    std::size_t length() const { return prefix.rows(); }
    std::size_t width() const { return prefix.cols(); }

    friend bool operator==(const PrefixState&, const PrefixState&) = default;
};

/// Prefix rows copied from the embeddings of "a photo of". Longer prefixes
/// repeat the phrase.
inline PrefixState init_prefix(const Vocabulary& vocab, std::size_t length = 3) {
    if (length == 0) throw ConfigError("prefix length must be at least 1");
    const auto& words = prefix_init_words();
    std::vector<std::string> seq;
    for (std::size_t i = 0; i < length; ++i) seq.push_back(words[i % words.size()]);
    PrefixState s;
    s.prefix = embed_tokens<float>(vocab, seq);
    s.adam_m = Tensor<float>::zeros(s.prefix.shape());
    s.adam_v = Tensor<float>::zeros(s.prefix.shape());
    return s;
}

/// Word-embedding rows of the class words, 2 x d_e.
template <typename T = float>
Tensor<T> class_word_rows(const Vocabulary& vocab) {
    return embed_tokens<T>(vocab, class_words());
}

/// Unit-norm class text embeddings T (2 x d_joint) on the tape:
/// row k is f_t([prefix; E(word_k)]) divided by its norm.
template <typename T>
Var<T> class_text_embeddings(const Var<T>& prefix, const TextEncoder<T>& encoder, const Tensor<T>& class_rows) {
    Tape<T>& tape = prefix.tape();
    if (prefix.value().rank() != 2 || prefix.value().cols() != encoder.config.width) {
        throw ShapeError("prefix " + shape_string(prefix.shape()) + " does not match encoder width " +
                         std::to_string(encoder.config.width));
    }
    if (class_rows.rank() != 2 || class_rows.cols() != encoder.config.width) {
        throw ShapeError("class word rows " + shape_string(class_rows.shape()) + " do not match encoder width");
    }
    std::vector<Var<T>> rows;
    for (std::size_t k = 0; k < class_rows.rows(); ++k) {
        auto r = class_rows.row(k);
        Var<T> word = tape.constant(Tensor<T>({1, class_rows.cols()}, std::vector<T>(r.begin(), r.end())));
        Var<T> seq = concat_rows<T>({prefix, word});
        rows.push_back(l2_normalize(encoder.encode(seq)));
    }
    return concat_rows(rows);
}

/// Evaluates T for a fixed prefix without recording gradients.
inline Tensor<float> class_text_embeddings(const PrefixState& state, const TextEncoder<float>& encoder,
                                           const Vocabulary& vocab) {
    Tape<float> tape;
    return class_text_embeddings(tape.constant(state.prefix), encoder, class_word_rows<float>(vocab)).value();
}

/// s[j][k] = scale * <I_j, T_k>.
template <typename T>
Var<T> compute_logits(const Var<T>& images, const Var<T>& text, T scale_factor) {
    if (images.value().cols() != text.value().cols()) {
        throw ShapeError("image embeddings " + shape_string(images.shape()) + " and text embeddings " +
                         shape_string(text.shape()) + " differ in dimension");
    }
    return scale(matmul(images, transpose(text)), scale_factor);
}

template <typename T>
Var<T> training_loss(const Var<T>& logits, const std::vector<std::size_t>& labels) {
    for (std::size_t l : labels) {
        if (l > 1) throw ConfigError("detection labels must be 0 (clean) or 1 (backdoored)");
    }
    return cross_entropy_from_logits(logits, labels);
}

/// One Adam update with bias correction, applied to the prefix rows only.
inline PrefixState adam_step(PrefixState state, const Tensor<float>& grads, const TrainConfig& config) {
    if (grads.shape() != state.prefix.shape()) {
        throw ShapeError("gradient " + shape_string(grads.shape()) + " does not match prefix " +
                         shape_string(state.prefix.shape()));
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const double g = grads[i];
        const double m = config.beta1 * state.adam_m[i] + (1.0 - config.beta1) * g;
        const double v = config.beta2 * state.adam_v[i] + (1.0 - config.beta2) * g * g;
        state.adam_m[i] = static_cast<float>(m);
        state.adam_v[i] = static_cast<float>(v);
        const double mhat = m / c1;
        const double vhat = v / c2;
        state.prefix[i] = static_cast<float>(state.prefix[i] - config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps));
    }
    return state;
}

struct EpochStats {
    double mean_loss = 0.0;
    /// Training accuracy (%) of the predictions made before each step.
    double accuracy = 0.0;
};

struct FitResult {
    PrefixState state;
    std::vector<EpochStats> history;
};

/// Gathers image embeddings and detection labels of a cache as dense arrays.
inline std::pair<Tensor<float>, std::vector<std::size_t>> cache_matrix(const EmbeddingCache& cache) {
    std::vector<float> data;
    data.reserve(cache.size() * cache.dim);
    std::vector<std::size_t> labels;
    for (const auto& r : cache.records) {
        data.insert(data.end(), r.vector.begin(), r.vector.end());
        labels.push_back(static_cast<std::size_t>(r.detection));
    }
    return {Tensor<float>({cache.size(), cache.dim}, std::move(data)), std::move(labels)};
}

/// Prompt tuning. Each step recomputes T from the current prefix, scores the
/// batch of cached image embeddings, backpropagates the cross-entropy into the
/// prefix and applies Adam. Encoder weights never change.
inline FitResult fit(const EmbeddingCache& train, const TextEncoder<float>& encoder, const Vocabulary& vocab,
                     const TrainConfig& config, const PrefixState* start = nullptr) {
    config.validate();
    if (train.empty()) throw DataError("fit: empty training set");
    if (train.dim != encoder.config.joint_dim) {
        throw ShapeError("training embeddings have dimension " + std::to_string(train.dim) +
                         " but the text encoder projects to " + std::to_string(encoder.config.joint_dim));
    }
    auto [images, labels] = cache_matrix(train);
    const Tensor<float> class_rows = class_word_rows<float>(vocab);
    const std::size_t d = train.dim;

    FitResult result;
    result.state = start ? *start : init_prefix(vocab, config.prefix_length);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (const auto& batch : make_batches(train.size(), config.batch_size, config.seed, epoch)) {
            std::vector<float> rows;
            rows.reserve(batch.size() * d);
            std::vector<std::size_t> batch_labels;
            for (std::size_t idx : batch) {
                auto r = images.row(idx);
                rows.insert(rows.end(), r.begin(), r.end());
                batch_labels.push_back(labels[idx]);
            }
            Tape<float> tape;
            Var<float> prefix = tape.parameter(result.state.prefix);
            Var<float> text = class_text_embeddings(prefix, encoder, class_rows);
            Var<float> img = tape.constant(Tensor<float>({batch.size(), d}, std::move(rows)));
            Var<float> logits = compute_logits(img, text, static_cast<float>(config.scale));
            Var<float> loss = training_loss(logits, batch_labels);
            const float lv = loss.value().item();
            if (!std::isfinite(lv)) throw NumericError("training loss is not finite at step " + std::to_string(result.state.step));
            const Gradients<float> grads = tape.backward(loss);
            const Tensor<float>& g = grads.of(prefix);
            if (!g.all_finite()) throw NumericError("prefix gradient is not finite");
            for (std::size_t j = 0; j < batch.size(); ++j) {
                const std::size_t pred = logits.value()(j, 1) > logits.value()(j, 0) ? 1 : 0;
                if (pred == batch_labels[j]) ++correct;
            }
            loss_sum += static_cast<double>(lv) * static_cast<double>(batch.size());
            result.state = adam_step(std::move(result.state), g, config);
        }
        result.history.push_back({loss_sum / static_cast<double>(train.size()),
                                  100.0 * static_cast<double>(correct) / static_cast<double>(train.size())});
    }
    return result;
}

// ---------------------------------------------------------------------------
// Prefix serialization: JSON header plus hex payloads. Each float is widened
// to double and written as the 16 hex digits of its bit pattern, so a
// round trip is exact.

namespace detail {

inline std::string to_hex64(const Tensor<float>& t) {
    std::string out;
    out.reserve(t.size() * 16);
    char buf[17];
    for (float v : t.data()) {
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(static_cast<double>(v))));
        out += buf;
    }
    return out;
}

inline Tensor<float> from_hex64(const std::string& hex, Shape shape) {
    const std::size_t n = shape_size(shape);
    if (hex.size() != n * 16) throw DataError("prefix payload has " + std::to_string(hex.size()) + " hex digits, expected " + std::to_string(n * 16));
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (std::size_t k = 0; k < 16; ++k) {
            const char ch = hex[i * 16 + k];
            int nib;
            if (ch >= '0' && ch <= '9') nib = ch - '0';
            else if (ch >= 'a' && ch <= 'f') nib = ch - 'a' + 10;
            else if (ch >= 'A' && ch <= 'F') nib = ch - 'A' + 10;
            else throw DataError("prefix payload contains a non-hex character");
            bits = (bits << 4) | static_cast<std::uint64_t>(nib);
        }
        data[i] = static_cast<float>(std::bit_cast<double>(bits));
    }
    return Tensor<float>(std::move(shape), std::move(data));
}

}  // namespace detail

inline nlohmann::ordered_json prefix_to_json(const PrefixState& state, const TrainConfig& config,
                                             std::size_t epochs_run) {
    nlohmann::ordered_json j;
    j["format"] = "bsentinel-prefix";
    j["version"] = 1;
    j["rows"] = state.length();
    j["width"] = state.width();
    j["step"] = state.step;
    j["seed"] = config.seed;
    j["epochs"] = epochs_run;
    j["config"] = config;
    j["prefix"] = detail::to_hex64(state.prefix);
    j["adam_m"] = detail::to_hex64(state.adam_m);
    j["adam_v"] = detail::to_hex64(state.adam_v);
    return j;
}

inline PrefixState prefix_from_json(const nlohmann::ordered_json& j) {
    try {
        if (j.at("format").get<std::string>() != "bsentinel-prefix") throw DataError("not a prefix file");
        if (j.at("version").get<int>() != 1) throw DataError("unsupported prefix file version");
        const auto rows = j.at("rows").get<std::size_t>();
        const auto width = j.at("width").get<std::size_t>();
        if (rows == 0 || width == 0) throw DataError("prefix dimensions must be positive");
        PrefixState s;
        s.prefix = detail::from_hex64(j.at("prefix").get<std::string>(), {rows, width});
        s.adam_m = detail::from_hex64(j.at("adam_m").get<std::string>(), {rows, width});
        s.adam_v = detail::from_hex64(j.at("adam_v").get<std::string>(), {rows, width});
        s.step = j.at("step").get<std::uint64_t>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed prefix file: ") + e.what());
    }
}

inline void save_prefix(const PrefixState& state, const TrainConfig& config, std::size_t epochs_run,
                        const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << prefix_to_json(state, config, epochs_run).dump(2) << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline PrefixState load_prefix(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
    return prefix_from_json(j);
}

}  // namespace bsentinel
