#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bsentinel {

/// Word-embedding table E(.) mapping tokens to rows of a V x d_e matrix.
class Vocabulary {
public:
    Vocabulary() = default;

    Vocabulary(std::vector<std::string> tokens, Tensor<float> table) : tokens_(std::move(tokens)), table_(std::move(table)) {
        if (table_.rank() != 2 || table_.rows() != tokens_.size()) {
            throw ShapeError("vocabulary table " + shape_string(table_.shape()) + " does not match " +
                             std::to_string(tokens_.size()) + " tokens");
        }
        if (!table_.all_finite()) throw NumericError("vocabulary table contains non-finite values");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!ids_.emplace(tokens_[i], i).second) throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }

    std::size_t width() const { return table_.cols(); }
    std::size_t size() const noexcept { return tokens_.size(); }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    const Tensor<float>& table() const noexcept { return table_; }

    std::size_t id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw ConfigError("unknown token '" + token + "'");
        return it->second;
    }

    std::vector<float> row(const std::string& token) const {
        auto r = table_.row(id(token));
        return {r.begin(), r.end()};
    }

private:
    std::vector<std::string> tokens_;
    Tensor<float> table_;
    std::map<std::string, std::size_t> ids_;
};

/// Looks up the embedding rows for a token sequence.
template <typename T = float>
Tensor<T> embed_tokens(const Vocabulary& vocab, const std::vector<std::string>& words) {
    if (words.empty()) throw ShapeError("embed_tokens: empty token sequence");
    const std::size_t d = vocab.width();
    std::vector<T> data;
    data.reserve(words.size() * d);
    for (const auto& w : words) {
        auto r = vocab.table().row(vocab.id(w));
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor<T>({words.size(), d}, std::move(data));
}

struct TextEncoderConfig {
    std::size_t width = 64;  // d_e
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t ff_width = 128;
    std::size_t joint_dim = 64;
    std::size_t max_tokens = 16;
};

struct ImageEncoderConfig {
    ImageShape input{};
    std::size_t patch = 4;
    std::size_t hidden = 32;
    std::size_t joint_dim = 64;
};

struct EncoderConfig {
    TextEncoderConfig text{};
    ImageEncoderConfig image{};
    /// Standard deviation of the word-embedding table entries.
    double token_std = 0.001;

    void validate() const {
        if (text.width == 0 || text.heads == 0 || text.layers == 0 || text.ff_width == 0 || text.joint_dim == 0 ||
            text.max_tokens == 0) {
            throw ConfigError("text encoder dimensions must be positive");
        }
        if (text.width % text.heads != 0) {
            throw ConfigError("heads (" + std::to_string(text.heads) + ") must divide width (" +
                              std::to_string(text.width) + ")");
        }
        if (image.patch == 0 || image.hidden == 0 || image.joint_dim == 0 || image.input.size() == 0) {
            throw ConfigError("image encoder dimensions must be positive");
        }
        if (image.input.height % image.patch != 0 || image.input.width % image.patch != 0) {
            throw ConfigError("patch size must divide the image height and width");
        }
        if (image.joint_dim != text.joint_dim) throw ConfigError("image and text joint dimensions differ");
        if (!(token_std > 0.0)) throw ConfigError("token_std must be positive");
    }
};

/// Frozen pre-norm transformer f_t(.). Token embeddings go in, a single
/// unnormalized joint-space vector comes out (final layer norm, mean pooling
/// over positions, linear projection).
template <typename T = float>
class TextEncoder {
public:
    struct Layer {
        Tensor<T> ln1_gamma, ln1_beta;
        Tensor<T> wq, wk, wv, wo, bo;
        Tensor<T> ln2_gamma, ln2_beta;
        Tensor<T> w1, b1, w2, b2;
    };

    TextEncoderConfig config;
    Tensor<T> positional;
    std::vector<Layer> layers;
    Tensor<T> lnf_gamma, lnf_beta;
    Tensor<T> projection;

    /// Visits every weight in a fixed order (used for hashing and casting).
    template <typename Self, typename Fn>
    static void visit(Self& self, Fn&& fn) {
        fn("positional", self.positional);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            fn(p + "ln1_gamma", l.ln1_gamma);
            fn(p + "ln1_beta", l.ln1_beta);
            fn(p + "wq", l.wq);
            fn(p + "wk", l.wk);
            fn(p + "wv", l.wv);
            fn(p + "wo", l.wo);
            fn(p + "bo", l.bo);
            fn(p + "ln2_gamma", l.ln2_gamma);
            fn(p + "ln2_beta", l.ln2_beta);
            fn(p + "w1", l.w1);
            fn(p + "b1", l.b1);
            fn(p + "w2", l.w2);
            fn(p + "b2", l.b2);
        }
        fn("lnf_gamma", self.lnf_gamma);
        fn("lnf_beta", self.lnf_beta);
        fn("projection", self.projection);
    }

    template <typename Fn>
    void for_each_weight(Fn&& fn) const {
        visit(*this, std::forward<Fn>(fn));
    }

    template <typename U>
    TextEncoder<U> cast() const {
        TextEncoder<U> out;
        out.config = config;
        out.layers.resize(layers.size());
        std::vector<const Tensor<T>*> src;
        visit(*this, [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
        std::size_t i = 0;
        TextEncoder<U>::visit(out, [&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
        return out;
    }

    /// f_t on a tape. `tokens` is n x d_e and may require gradients; the
    /// encoder weights enter as constants.
    Var<T> encode(const Var<T>& tokens) const {
        Tape<T>& tape = tokens.tape();
        const Tensor<T>& tv = tokens.value();
        if (tv.rank() != 2 || tv.cols() != config.width) {
            throw ShapeError("text encoder expects n x " + std::to_string(config.width) + " token embeddings, got " +
                             shape_string(tv.shape()));
        }
        const std::size_t n = tv.rows();
        if (n > config.max_tokens) {
            throw ShapeError("sequence of " + std::to_string(n) + " tokens exceeds the context of " +
                             std::to_string(config.max_tokens));
        }
        const T eps = T(1e-5);
        auto c = [&](const Tensor<T>& t) { return tape.constant(t); };

        std::vector<T> pos(positional.data().begin(), positional.data().begin() + n * config.width);
        Var<T> x = add(tokens, c(Tensor<T>({n, config.width}, std::move(pos))));

        const std::size_t head_width = config.width / config.heads;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_width));
        for (const Layer& l : layers) {
            Var<T> h = layer_norm(x, c(l.ln1_gamma), c(l.ln1_beta), eps);
            Var<T> q = matmul(h, c(l.wq));
            Var<T> k = matmul(h, c(l.wk));
            Var<T> v = matmul(h, c(l.wv));
            std::vector<Var<T>> heads;
            for (std::size_t hd = 0; hd < config.heads; ++hd) {
                const std::size_t b = hd * head_width, e = b + head_width;
                Var<T> qh = slice_cols(q, b, e);
                Var<T> kh = slice_cols(k, b, e);
                Var<T> vh = slice_cols(v, b, e);
                Var<T> att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
                heads.push_back(matmul(att, vh));
            }
            Var<T> merged = heads.size() == 1 ? heads[0] : concat_cols(heads);
            x = add(x, add_bias(matmul(merged, c(l.wo)), c(l.bo)));

            Var<T> h2 = layer_norm(x, c(l.ln2_gamma), c(l.ln2_beta), eps);
            Var<T> ff = gelu(add_bias(matmul(h2, c(l.w1)), c(l.b1)));
            x = add(x, add_bias(matmul(ff, c(l.w2)), c(l.b2)));
        }
        x = layer_norm(x, c(lnf_gamma), c(lnf_beta), eps);
        Var<T> pooled = mean_rows(x);
        return reshape(matmul(pooled, c(projection)), {config.joint_dim});
    }

    /// Forward pass without gradient bookkeeping.
    Tensor<T> encode(const Tensor<T>& tokens) const {
        if (tokens.rank() == 2 && tokens.rows() == 0) throw ShapeError("text encoder needs at least one token");
        Tape<T> tape;
        return encode(tape.constant(tokens)).value();
    }
};

/// Frozen patch-MLP image encoder f_I(.): non-overlapping patches go through a
/// shared two-layer ReLU MLP, the patch features are concatenated in raster
/// order and projected to the joint space.
class ImageEncoder {
public:
    ImageEncoderConfig config;
    Tensor<float> w1, b1, w2, b2, projection;

    std::size_t patch_dim() const { return config.input.channels * config.patch * config.patch; }
    std::size_t patch_count() const {
        return (config.input.height / config.patch) * (config.input.width / config.patch);
    }

    template <typename Fn>
    void for_each_weight(Fn&& fn) const {
        fn("w1", w1);
        fn("b1", b1);
        fn("w2", w2);
        fn("b2", b2);
        fn("projection", projection);
    }

    Tensor<float> patchify(const ImageTensor& x) const {
        if (!(x.shape() == config.input) || x.size() != config.input.size()) {
            throw ShapeError("image encoder expects " + config.input.str() + ", got " + x.shape().str());
        }
        const std::size_t p = config.patch;
        const std::size_t gh = config.input.height / p, gw = config.input.width / p;
        Tensor<float> patches = Tensor<float>::zeros({gh * gw, patch_dim()});
        for (std::size_t py = 0; py < gh; ++py)
            for (std::size_t px = 0; px < gw; ++px) {
                auto row = patches.row(py * gw + px);
                std::size_t k = 0;
                for (std::size_t c = 0; c < config.input.channels; ++c)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx) row[k++] = x.at(c, py * p + dy, px * p + dx);
            }
        return patches;
    }

    Tensor<float> encode(const ImageTensor& x) const {
        Tensor<float> h = kernels::relu(kernels::add_bias(kernels::matmul(patchify(x), w1), b1));
        h = kernels::relu(kernels::add_bias(kernels::matmul(h, w2), b2));
        Tensor<float> flat = h.reshaped({1, h.size()});
        return kernels::matmul(flat, projection).reshaped({config.joint_dim});
    }
};

struct EncoderStack {
    Vocabulary vocab;
    TextEncoder<float> text;
    ImageEncoder image;
};

/// Tokens always present in a toy vocabulary.
inline const std::vector<std::string>& toy_tokens() {
    static const std::vector<std::string> tokens{"a", "photo", "of", "clean", "backdoored",
                                                 "an", "image", "the", "picture"};
    return tokens;
}

namespace detail {

inline Tensor<float> gaussian(Rng& rng, Shape shape, double std) {
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = static_cast<float>(rng.normal() * std);
    return Tensor<float>(std::move(shape), std::move(data));
}

inline Tensor<float> dense(Rng& rng, std::size_t in, std::size_t out) {
    return gaussian(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace detail

/// Seeded toy vision-language pair. Matrices use N(0, 1/fan_in), layer norms
/// start at identity, and the word-embedding table uses N(0, token_std^2).
inline EncoderStack build_toy_encoders(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderStack stack;
    const auto& tc = config.text;
    const std::size_t d = tc.width;

    Rng vocab_rng(derive_seed(seed, 1));
    stack.vocab = Vocabulary(toy_tokens(), detail::gaussian(vocab_rng, {toy_tokens().size(), d}, config.token_std));

    Rng rng(derive_seed(seed, 2));
    TextEncoder<float>& te = stack.text;
    te.config = tc;
    te.positional = detail::gaussian(rng, {tc.max_tokens, d}, config.token_std * 0.5);
    for (std::size_t i = 0; i < tc.layers; ++i) {
        typename TextEncoder<float>::Layer l;
        l.ln1_gamma = Tensor<float>::full({d}, 1.0f);
        l.ln1_beta = Tensor<float>::zeros({d});
        l.wq = detail::dense(rng, d, d);
        l.wk = detail::dense(rng, d, d);
        l.wv = detail::dense(rng, d, d);
        l.wo = detail::dense(rng, d, d);
        l.bo = Tensor<float>::zeros({d});
        l.ln2_gamma = Tensor<float>::full({d}, 1.0f);
        l.ln2_beta = Tensor<float>::zeros({d});
        l.w1 = detail::dense(rng, d, tc.ff_width);
        l.b1 = Tensor<float>::zeros({tc.ff_width});
        l.w2 = detail::dense(rng, tc.ff_width, d);
        l.b2 = Tensor<float>::zeros({d});
        te.layers.push_back(std::move(l));
    }
    te.lnf_gamma = Tensor<float>::full({d}, 1.0f);
    te.lnf_beta = Tensor<float>::zeros({d});
    te.projection = detail::dense(rng, d, tc.joint_dim);

    Rng img_rng(derive_seed(seed, 3));
    ImageEncoder& ie = stack.image;
    ie.config = config.image;
    ie.w1 = detail::dense(img_rng, ie.patch_dim(), ie.config.hidden);
    ie.b1 = detail::gaussian(img_rng, {ie.config.hidden}, 0.1);
    ie.w2 = detail::dense(img_rng, ie.config.hidden, ie.config.hidden);
    ie.b2 = detail::gaussian(img_rng, {ie.config.hidden}, 0.1);
    ie.projection = detail::dense(img_rng, ie.patch_count() * ie.config.hidden, ie.config.joint_dim);
    return stack;
}

}  // namespace bsentinel
