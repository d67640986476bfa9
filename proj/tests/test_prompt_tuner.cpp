#include <gtest/gtest.h>

#include <cmath>

#include "bsentinel/hash.hpp"
#include "bsentinel/pipeline.hpp"
#include "bsentinel/prompt_tuner.hpp"

using namespace bsentinel;

namespace {

const EncoderStack& stack() {
    static const EncoderStack s = build_toy_encoders(EncoderConfig{}, 0);
    return s;
}

double accuracy_with(const Tensor<float>& text, const EmbeddingCache& c) {
    std::size_t ok = 0;
    for (const auto& r : c.records) {
        double a = 0, b = 0;
        for (std::size_t k = 0; k < c.dim; ++k) {
            a += r.vector[k] * text(0, k);
            b += r.vector[k] * text(1, k);
        }
        ok += (b > a) == (r.detection == DetectionLabel::backdoored);
    }
    return 100.0 * static_cast<double>(ok) / static_cast<double>(c.size());
}

}  // namespace

TEST(InitPrefix, CopiesPhraseRows) {
    auto s = init_prefix(stack().vocab);
    EXPECT_EQ(s.length(), 3u);
    auto r0 = s.prefix.row(0);
    EXPECT_EQ(std::vector<float>(r0.begin(), r0.end()), stack().vocab.row("a"));
    auto r2 = s.prefix.row(2);
    EXPECT_EQ(std::vector<float>(r2.begin(), r2.end()), stack().vocab.row("of"));
    for (float v : s.adam_m.data()) EXPECT_EQ(v, 0.0f);
    for (float v : s.adam_v.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(s.step, 0u);
}

TEST(InitPrefix, MissingWordRejected) {
    Vocabulary v({"a", "of", "clean", "backdoored"}, Tensor<float>::zeros({4, 8}));
    EXPECT_THROW(init_prefix(v), ConfigError);
}

TEST(ClassText, UnitNormAndPrefixSensitive) {
    auto s = init_prefix(stack().vocab);
    auto t = class_text_embeddings(s, stack().text, stack().vocab);
    ASSERT_EQ(t.shape(), (Shape{2, 64}));
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(kernels::l2_norm<float>(t.row(k)), 1.0, 1e-6);
    s.prefix[5] += 0.01f;
    EXPECT_NE(class_text_embeddings(s, stack().text, stack().vocab), t);
}

TEST(ClassText, PrefixGradientMatchesFiniteDifferences) {
    auto enc = stack().text.cast<double>();
    const auto rows = class_word_rows<double>(stack().vocab);
    Rng rng(2);
    for (std::size_t entry : {0u, 63u, 64u, 127u}) {
        auto f = [&](Tape<double>&, const Var<double>& prefix) {
            auto t = class_text_embeddings(prefix, enc, rows);
            return reshape(slice_cols(reshape(t, {1, 128}), entry, entry + 1), {});
        };
        auto p = init_prefix(stack().vocab).prefix.cast<double>();
        EXPECT_LE(grad_check<double>(f, p, 1e-7), 1e-4) << "entry " << entry;
    }
}

TEST(Logits, HandExamples) {
    Tape<double> tape;
    auto t = tape.constant(Tensor<double>::matrix(2, 2, {0.6, 0.8, -0.8, 0.6}));
    auto same = compute_logits(tape.constant(Tensor<double>::matrix(1, 2, {0.6, 0.8})), t, 100.0);
    EXPECT_NEAR(same.value()(0, 0), 100.0, 1e-3);
    EXPECT_NEAR(same.value()(0, 1), 0.0, 1e-4);
    auto hand = compute_logits(tape.constant(Tensor<double>::matrix(1, 2, {1, 0})), t, 1.0);
    EXPECT_NEAR(hand.value()(0, 0), 0.6, 1e-12);
    EXPECT_THROW(compute_logits(tape.constant(Tensor<double>::matrix(1, 3, {1, 0, 0})), t, 1.0), ShapeError);
}

TEST(Loss, ClosedForms) {
    Tape<double> tape;
    auto zeros = tape.constant(Tensor<double>::zeros({4, 2}));
    EXPECT_NEAR(training_loss(zeros, {0, 1, 1, 0}).value().item(), std::log(2.0), 1e-12);
    auto sep = tape.constant(Tensor<double>::matrix(2, 2, {100, -100, 100, -100}));
    EXPECT_NEAR(training_loss(sep, {0, 0}).value().item(), 0.0, 1e-12);
    EXPECT_NEAR(training_loss(sep, {1, 1}).value().item(), 200.0, 1e-9);
    EXPECT_THROW(training_loss(sep, {0, 2}), ConfigError);
}

TEST(Adam, ZeroGradientLeavesPrefix) {
    auto s = init_prefix(stack().vocab);
    auto next = adam_step(s, Tensor<float>::zeros(s.prefix.shape()), TrainConfig{});
    EXPECT_EQ(next.prefix, s.prefix);
    EXPECT_EQ(next.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
    TrainConfig cfg;
    auto s = init_prefix(stack().vocab);
    Rng rng(4);
    Tensor<float> g = Tensor<float>::zeros(s.prefix.shape());
    for (auto& v : g.data()) v = static_cast<float>(rng.normal());
    auto up = adam_step(s, g, cfg);
    Tensor<float> neg = g;
    for (auto& v : neg.data()) v = -v;
    auto down = adam_step(s, neg, cfg);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double expected = -cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.adam_eps);
        const double delta = static_cast<double>(up.prefix[i]) - s.prefix[i];
        EXPECT_NEAR(delta, expected, 1e-9);
        EXPECT_NEAR(static_cast<double>(down.prefix[i]) - s.prefix[i], -delta, 1e-9);
    }
    EXPECT_THROW(adam_step(s, Tensor<float>::zeros({2, 64}), cfg), ShapeError);
}

TEST(Fit, SeparableTaskLearnsAndIsDeterministic) {
    auto u = random_unit_vector(64, 100);
    auto train = separable_cache(u, 1000, 0.1, 200);
    TrainConfig cfg;
    auto a = fit(train, stack().text, stack().vocab, cfg);
    ASSERT_EQ(a.history.size(), cfg.epochs);
    EXPECT_LT(a.history.back().mean_loss, a.history.front().mean_loss);
    EXPECT_LE(a.state.step, 200u);
    EXPECT_GE(accuracy_with(class_text_embeddings(a.state, stack().text, stack().vocab), train), 99.0);

    auto b = fit(train, stack().text, stack().vocab, cfg);
    EXPECT_EQ(a.state, b.state);
}

TEST(Fit, EncoderWeightsUnchanged) {
    auto before = encoder_weights_sha256(stack());
    TrainConfig cfg;
    cfg.epochs = 2;
    fit(separable_cache(random_unit_vector(64, 1), 100, 0.1, 2), stack().text, stack().vocab, cfg);
    EXPECT_EQ(encoder_weights_sha256(stack()), before);
}

TEST(Fit, Preconditions) {
    EmbeddingCache empty;
    empty.dim = 64;
    EXPECT_THROW(fit(empty, stack().text, stack().vocab, TrainConfig{}), DataError);
    auto wrong = separable_cache(random_unit_vector(32, 1), 10, 0.1, 2);
    EXPECT_THROW(fit(wrong, stack().text, stack().vocab, TrainConfig{}), ShapeError);
    TrainConfig bad;
    bad.learning_rate = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.epochs = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.scale = -1;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Fit, NonFiniteEmbeddingsAreNumericFailures) {
    auto c = separable_cache(random_unit_vector(64, 1), 10, 0.1, 2);
    c.records[3].vector[0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(fit(c, stack().text, stack().vocab, TrainConfig{}), NumericError);
}

TEST(PrefixFile, RoundTripBitExact) {
    auto train = separable_cache(random_unit_vector(64, 3), 50, 0.1, 4);
    TrainConfig cfg;
    cfg.epochs = 1;
    auto res = fit(train, stack().text, stack().vocab, cfg);
    auto path = std::filesystem::temp_directory_path() / "bsentinel_prefix_roundtrip.json";
    save_prefix(res.state, cfg, 1, path);
    auto back = load_prefix(path);
    EXPECT_EQ(back, res.state);
    for (std::size_t i = 0; i < back.prefix.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint32_t>(back.prefix[i]), std::bit_cast<std::uint32_t>(res.state.prefix[i]));
}
