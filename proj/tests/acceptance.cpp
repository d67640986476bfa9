// Acceptance checks. One PASS/FAIL/SKIP line per criterion; exit status is
// nonzero when any criterion fails.

#include <nlohmann/json.hpp>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bsentinel/dataset.hpp"
#include "bsentinel/detector.hpp"
#include "bsentinel/embedding_cache.hpp"
#include "bsentinel/hash.hpp"
#include "bsentinel/pipeline.hpp"
#include "bsentinel/prompt_tuner.hpp"
#include "bsentinel/trigger.hpp"
#include "bsentinel/tsne.hpp"

using namespace bsentinel;
namespace fs = std::filesystem;

namespace tol {
constexpr double trigger_seconds = 5.0;
constexpr double l2_slack = 1e-5;
constexpr double gradient_rel_error = 1e-3;
constexpr double gradient_step = 1e-6;
constexpr double gradient_denominator_floor = 1e-8;
constexpr double gradient_seconds = 60.0;
constexpr double separable_accuracy = 99.0;
constexpr std::uint64_t separable_steps = 200;
constexpr double separable_seconds = 120.0;
constexpr double affinity_sum = 1e-6;
constexpr double row_perplexity = 1e-3;
constexpr double kl_increase = 1e-3;
constexpr double import_points = 5.0;
constexpr double trojan_wm_target = 96.10;
constexpr double average_target = 86.20;
constexpr double crossgen_trojan_wm_target = 76.54;
}  // namespace tol

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

void skip(int id, const std::string& name, const std::string& detail) {
    std::printf("SKIP [%d] %s: %s\n", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

/// Runs a check, turning an unexpected exception into a FAIL line.
void guarded(int id, const std::string& name, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(id, name, false, std::string("exception: ") + e.what());
    }
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const EncoderStack& toy() {
    static const EncoderStack s = build_toy_encoders(EncoderConfig{}, 0);
    return s;
}

double accuracy_of(const Detector& det, const EmbeddingCache& c) { return evaluate(det, c).accuracy; }

// ---------------------------------------------------------------------------

void trigger_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    std::vector<ImageTensor> images;
    for (int i = 0; i < 100; ++i) {
        ImageTensor img(ImageShape{3, 32, 32});
        for (auto& p : img.pixels()) p = static_cast<float>(rng.uniform());
        images.push_back(std::move(img));
    }
    std::size_t violations = 0, max_l0 = 0;
    double max_l2 = 0.0;
    std::string first;
    for (AttackKind kind : kAllAttacks) {
        const TriggerSpec spec = TriggerSpec::defaults(kind, 17);
        const TriggerRealization r = realize_trigger(spec, ImageShape{3, 32, 32});
        for (const auto& x : images) {
            const ImageTensor y = apply_trigger(x, r);
            std::set<std::size_t> changed_positions;
            double l2 = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const float m = r.mask[i];
                bool ok = true;
                if (m == 0.0f) {
                    ok = std::bit_cast<std::uint32_t>(y[i]) == std::bit_cast<std::uint32_t>(x[i]);
                } else if (has_binary_mask(kind)) {
                    ok = y[i] == std::clamp(r.pattern[i], 0.0f, 1.0f);
                } else {
                    ok = y[i] == std::clamp((1.0f - m) * x[i] + m * r.pattern[i], 0.0f, 1.0f);
                }
                if (!ok && first.empty()) first = std::string(attack_name(kind)) + " at " + std::to_string(i);
                violations += !ok;
                if (y[i] != x[i]) changed_positions.insert(i % (32 * 32));
                l2 += (static_cast<double>(y[i]) - x[i]) * (static_cast<double>(y[i]) - x[i]);
            }
            if (kind == AttackKind::l0_inv) {
                max_l0 = std::max(max_l0, changed_positions.size());
                if (changed_positions.size() > spec.sparsity) ++violations;
            }
            if (kind == AttackKind::l2_inv) {
                max_l2 = std::max(max_l2, std::sqrt(l2));
                if (std::sqrt(l2) > spec.epsilon + tol::l2_slack) ++violations;
            }
        }
    }
    const double secs = seconds_since(t0);
    report(1, "trigger exactness", violations == 0 && secs < tol::trigger_seconds,
           std::to_string(violations) + " violations over 6x100 images" + (first.empty() ? "" : " (first: " + first + ")") +
               ", L0Inv max changed pixels " + std::to_string(max_l0) + ", L2Inv max delta norm " + fmt("%.6f", max_l2) +
               ", " + fmt("%.2f", secs) + " s");
}

void gradient_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    const TextEncoder<double> enc = toy().text.cast<double>();
    const Tensor<double> class_rows = class_word_rows<double>(toy().vocab);
    const auto u = random_unit_vector(64, 31);
    const EmbeddingCache pool = separable_cache(u, 200, 0.1, 32);
    double worst = 0.0;
    for (std::uint64_t batch_seed = 0; batch_seed < 5; ++batch_seed) {
        Rng rng(derive_seed(41, batch_seed));
        std::vector<double> rows;
        std::vector<std::size_t> labels;
        for (std::size_t idx : rng.sample_without_replacement(pool.size(), 8)) {
            rows.insert(rows.end(), pool.records[idx].vector.begin(), pool.records[idx].vector.end());
            labels.push_back(pool.records[idx].detection == DetectionLabel::backdoored ? 1 : 0);
        }
        const Tensor<double> batch({8, 64}, std::move(rows));
        // evaluate away from the exact init point as well
        Tensor<double> at = init_prefix(toy().vocab).prefix.cast<double>();
        for (std::size_t i = 0; i < at.size(); ++i) at[i] += 1e-4 * rng.normal();

        auto loss_at = [&](Tape<double>& tape, const Var<double>& prefix) {
            Var<double> text = class_text_embeddings(prefix, enc, class_rows);
            return training_loss(compute_logits(tape.constant(batch), text, 100.0), labels);
        };
        Tensor<double> analytic;
        {
            Tape<double> tape;
            Var<double> p = tape.parameter(at);
            analytic = tape.backward(loss_at(tape, p)).of(p);
        }
        Tensor<double> probe = at;
        for (std::size_t i = 0; i < at.size(); ++i) {
            const double orig = probe[i];
            auto value = [&](double v) {
                probe[i] = v;
                Tape<double> tape;
                return loss_at(tape, tape.constant(probe)).value().item();
            };
            const double numeric = (value(orig + tol::gradient_step) - value(orig - tol::gradient_step)) / (2 * tol::gradient_step);
            probe[i] = orig;
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), tol::gradient_denominator_floor});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    const double secs = seconds_since(t0);
    report(2, "prefix gradient vs central differences", worst <= tol::gradient_rel_error && secs < tol::gradient_seconds,
           "max relative error " + fmt("%.3e", worst) + " over 5 batches of 8 (64-bit), " + fmt("%.2f", secs) + " s");
}

struct SeparableRun {
    FitResult fit;
    double train_accuracy = 0.0;
    double heldout_accuracy = 0.0;
    double static_accuracy = 0.0;
    std::string sha_before, sha_after;
    double seconds = 0.0;
};

SeparableRun separable_run() {
    const auto t0 = std::chrono::steady_clock::now();
    SeparableRun r;
    const auto u = random_unit_vector(64, 100);
    const EmbeddingCache train = separable_cache(u, 1000, 0.1, 200);
    const EmbeddingCache heldout = separable_cache(u, 1000, 0.1, 300);
    r.sha_before = encoder_weights_sha256(toy());
    r.fit = fit(train, toy().text, toy().vocab, TrainConfig{});
    r.sha_after = encoder_weights_sha256(toy());
    const TrainConfig defaults;
    const Detector learned = Detector::build(r.fit.state, toy().text, toy().vocab, defaults.scale);
    r.train_accuracy = accuracy_of(learned, train);
    r.heldout_accuracy = accuracy_of(learned, heldout);
    r.static_accuracy = accuracy_of(Detector::build(init_prefix(toy().vocab), toy().text, toy().vocab, defaults.scale), heldout);
    r.seconds = seconds_since(t0);
    return r;
}

void loo_construction() {
    std::string detail;
    bool ok = true;
    for (std::size_t n : {1000u, 1003u}) {
        const Dataset clean = generate_synthetic_dataset(n, 10, ImageShape{3, 8, 8}, 5);
        for (AttackKind held : kAllAttacks) {
            const LooPlan plan = LooPlan::make(held, 9);
            const Dataset t = build_loo_training_set(clean, plan, default_specs());
            const std::size_t n_clean = count_provenance(t, Provenance::clean());
            ok &= n_clean == n && t.size() == 2 * n;
            ok &= count_provenance(t, Provenance(held)) == 0;
            std::size_t rank = 0;
            for (AttackKind k : kAllAttacks) {
                if (k == held) continue;
                const std::size_t expected = n / 5 + (rank < n % 5 ? 1 : 0);
                ok &= count_provenance(t, Provenance(k)) == expected;
                ++rank;
            }
            const Dataset test = build_loo_test_set(clean, plan, spec_for(default_specs(), held));
            ok &= count_provenance(test, Provenance::clean()) == n && count_provenance(test, Provenance(held)) == n;
        }
        detail += "N=" + std::to_string(n) + " per-attack " + std::to_string(n / 5) + "+" + std::to_string(n % 5) + " ";
    }
    report(4, "balanced LOO construction", ok, detail + "for all six held-out kinds, contamination 0");
}

void scale_invariance() {
    Rng rng(7);
    const Tensor<float> text = Detector::build(init_prefix(toy().vocab), toy().text, toy().vocab, 1.0).text();
    std::size_t disagreements = 0, backdoored = 0;
    const Detector d1(text, 1.0), d100(text, 100.0), d1000(text, 1000.0);
    for (int i = 0; i < 1000; ++i) {
        std::vector<float> v = random_unit_vector(64, rng.next());
        const auto p = d1.predict(v);
        backdoored += p == DetectionLabel::backdoored;
        disagreements += (p != d100.predict(v)) + (p != d1000.predict(v));
    }
    report(7, "argmax scale invariance", disagreements == 0,
           std::to_string(disagreements) + " disagreements over 1000 embeddings (" + std::to_string(backdoored) +
               " predicted backdoored)");
}

void cli_determinism() {
    const fs::path dir = fs::temp_directory_path() / "bsentinel_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const nlohmann::json config = {{"seeds", {0, 1}},
                                   {"dataset", {{"train_size", 200}, {"test_size", 100}, {"height", 16}, {"width", 16}}},
                                   {"train", {{"epochs", 2}}}};
    std::ofstream(dir / "config.json") << config.dump(2);
    int codes[2];
    for (int run = 0; run < 2; ++run) {
        const std::string cmd = std::string(BSENTINEL_CLI_PATH) + " loo --config " + (dir / "config.json").string() + " --out " +
                                (dir / ("run" + std::to_string(run))).string() + " --threads " + std::to_string(run + 1) +
                                " > /dev/null 2>&1";
        codes[run] = std::system(cmd.c_str());
    }
    bool same = codes[0] == 0 && codes[1] == 0;
    std::string detail = "exit codes " + std::to_string(codes[0]) + "/" + std::to_string(codes[1]);
    for (const char* f : {"loo_report.json", "loo_report.csv"}) {
        const std::string a = slurp(dir / "run0" / f), b = slurp(dir / "run1" / f);
        same &= !a.empty() && a == b;
        detail += std::string(", ") + f + (a == b && !a.empty() ? " identical (" + std::to_string(a.size()) + " bytes)" : " differs");
    }
    report(8, "loo determinism", same, detail);
}

void tsne_properties() {
    Rng rng(12);
    Tensor<double> x = Tensor<double>::zeros({200, 16});
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t k = 0; k < 16; ++k) x(i, k) = (k == i % 5 ? 4.0 : 0.0) + rng.normal();
    const TsneConfig config;
    const Affinities a = pairwise_affinities(x, config.perplexity);
    double total = 0.0, asym = 0.0, perp_err = 0.0;
    for (std::size_t i = 0; i < a.n; ++i) {
        for (std::size_t j = 0; j < a.n; ++j) {
            total += a(i, j);
            asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
        }
        perp_err = std::max(perp_err, std::abs(row_perplexity(&a.conditional[i * a.n], a.n) - config.perplexity));
    }
    const ProjectedPoints pts = project(x, config);
    double worst_rise = -1e300;
    for (std::size_t i = 1; i < pts.kl_history.size(); ++i) {
        if (pts.kl_history[i - 1].iteration < config.exaggeration_iters) continue;
        worst_rise = std::max(worst_rise, pts.kl_history[i].kl - pts.kl_history[i - 1].kl);
    }
    const bool ok = asym == 0.0 && std::abs(total - 1.0) <= tol::affinity_sum && perp_err <= tol::row_perplexity &&
                    worst_rise <= tol::kl_increase;
    report(9, "t-SNE properties", ok,
           "max asymmetry " + fmt("%.1e", asym) + ", |sum-1| " + fmt("%.1e", std::abs(total - 1.0)) + ", max perplexity error " +
               fmt("%.1e", perp_err) + ", largest post-exaggeration KL rise " + fmt("%.2e", worst_rise) + ", final KL " +
               fmt("%.4f", pts.final_kl));
}

void format_round_trips(const SeparableRun& sep) {
    const fs::path dir = fs::temp_directory_path() / "bsentinel_acceptance_formats";
    fs::remove_all(dir);
    fs::create_directories(dir);

    EmbeddingCache cache = separable_cache(random_unit_vector(64, 8), 50, 0.1, 9, AttackKind::l2_inv);
    cache.token_dim = toy().vocab.width();
    cache.tokens = token_section(toy().vocab);
    export_embeddings(cache, dir / "cache.bsec");
    const ImportResult back = import_embeddings(dir / "cache.bsec", 64);
    const bool cache_ok = back.cache == cache && back.renormalized == 0;

    save_prefix(sep.fit.state, TrainConfig{}, TrainConfig{}.epochs, dir / "prefix.json");
    const PrefixState p = load_prefix(dir / "prefix.json");
    bool prefix_ok = p == sep.fit.state && p.prefix.size() == sep.fit.state.prefix.size();
    for (std::size_t i = 0; prefix_ok && i < p.prefix.size(); ++i) {
        prefix_ok = std::bit_cast<std::uint32_t>(p.prefix[i]) == std::bit_cast<std::uint32_t>(sep.fit.state.prefix[i]);
    }

    std::vector<std::uint8_t> bytes;
    for (std::uint8_t r = 0; r < 3; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(r * 4 + 1));
        for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>((i * 7 + r * 31) % 256));
    }
    {
        std::ofstream out(dir / "three.bin", std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    const Dataset d = load_cifar10_binary(dir / "three.bin");
    bool cifar_ok = d.size() == 3;
    for (std::size_t r = 0; cifar_ok && r < 3; ++r) {
        cifar_ok &= d.samples[r].class_label == r * 4 + 1;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x) {
                    const std::size_t i = c * 1024 + y * 32 + x;
                    cifar_ok &= d.samples[r].image.at(c, y, x) == static_cast<float>((i * 7 + r * 31) % 256) / 255.0f;
                }
    }
    report(10, "file-format round trips", cache_ok && prefix_ok && cifar_ok,
           std::string("embedding cache ") + (cache_ok ? "bit-exact" : "MISMATCH") + ", prefix " + (prefix_ok ? "bit-exact" : "MISMATCH") +
               ", CIFAR-10 3-record file " + (cifar_ok ? "parsed to known pixels" : "MISMATCH"));
}

/// Real-CLIP import checks. Paths come from BSENTINEL_CIFAR10_TRAIN /
/// BSENTINEL_CIFAR10_TEST and, for cross-generalization,
/// BSENTINEL_GTSRB_TRAIN / BSENTINEL_GTSRB_TEST.
void import_contingent() {
    const char* ct = std::getenv("BSENTINEL_CIFAR10_TRAIN");
    const char* cs = std::getenv("BSENTINEL_CIFAR10_TEST");
    const std::string name = "real-CLIP import targets";
    if (!ct || !cs || !fs::exists(ct) || !fs::exists(cs)) {
        skip(11, name, "no import files (set BSENTINEL_CIFAR10_TRAIN and BSENTINEL_CIFAR10_TEST)");
        return;
    }
    const EmbeddingCache train = import_embeddings(ct).cache;
    const EmbeddingCache test = import_embeddings(cs).cache;
    const Vocabulary vocab = vocabulary_from_cache(train);
    EncoderConfig ec;
    ec.text.width = vocab.width();
    ec.text.heads = vocab.width() % 2 == 0 ? 2 : 1;
    ec.text.ff_width = 2 * vocab.width();
    ec.text.joint_dim = ec.image.joint_dim = train.dim;
    const EncoderStack stack = build_toy_encoders(ec, 0);
    const PromptModel model{&stack.text, &vocab};
    const EmbeddingPool tp = make_pool(train), sp = make_pool(test);
    const std::vector<std::uint64_t> seeds{0, 1, 2};
    const ExperimentReport loo = run_loo_experiment(tp, sp, model, TrainConfig{}, seeds, "cifar10");
    double avg = 0.0, wm = 0.0;
    for (const auto& row : loo.rows) {
        avg += row.mean / static_cast<double>(loo.rows.size());
        if (row.attack == attack_name(AttackKind::trojan_wm)) wm = row.mean;
    }
    bool ok = std::abs(wm - tol::trojan_wm_target) <= tol::import_points && std::abs(avg - tol::average_target) <= tol::import_points;
    std::string detail = "TrojanWM " + fmt("%.2f", wm) + " (target 96.10), average " + fmt("%.2f", avg) + " (target 86.20)";
    const char* gt = std::getenv("BSENTINEL_GTSRB_TRAIN");
    const char* gs = std::getenv("BSENTINEL_GTSRB_TEST");
    if (gt && gs && fs::exists(gt) && fs::exists(gs)) {
        const EmbeddingPool gtp = make_pool(import_embeddings(gt).cache), gsp = make_pool(import_embeddings(gs).cache);
        const ExperimentReport cg =
            run_crossgen({"cifar10", &tp, &sp}, {"gtsrb", &gtp, &gsp}, model, TrainConfig{}, seeds, {AttackKind::trojan_wm});
        const double cwm = cg.rows.front().mean;
        ok &= std::abs(cwm - tol::crossgen_trojan_wm_target) <= tol::import_points;
        detail += ", cross-gen cifar10->gtsrb TrojanWM " + fmt("%.2f", cwm) + " (target 76.54)";
    } else {
        detail += ", cross-gen skipped (no GTSRB import files)";
    }
    report(11, name, ok, detail);
}

}  // namespace

int main() {
    guarded(1, "trigger exactness", trigger_exactness);
    guarded(2, "prefix gradient vs central differences", gradient_correctness);

    SeparableRun sep;
    bool have_sep = false;
    guarded(5, "synthetic separability", [&] {
        sep = separable_run();
        have_sep = true;
    });
    if (have_sep) {
        report(3, "frozen encoder weights", sep.sha_before == sep.sha_after,
               "SHA-256 " + sep.sha_before.substr(0, 16) + "... before and " + sep.sha_after.substr(0, 16) + "... after a " +
                   std::to_string(sep.fit.state.step) + "-step fit");
    }
    guarded(4, "balanced LOO construction", loo_construction);
    if (have_sep) {
        report(5, "synthetic separability",
               sep.train_accuracy >= tol::separable_accuracy && sep.heldout_accuracy >= tol::separable_accuracy &&
                   sep.fit.state.step <= tol::separable_steps && sep.seconds < tol::separable_seconds,
               "train " + fmt("%.2f", sep.train_accuracy) + "%, held-out " + fmt("%.2f", sep.heldout_accuracy) + "% after " +
                   std::to_string(sep.fit.state.step) + " steps, " + fmt("%.1f", sep.seconds) + " s");
        report(6, "ablation direction", sep.heldout_accuracy >= sep.static_accuracy,
               "learned " + fmt("%.2f", sep.heldout_accuracy) + "% vs static " + fmt("%.2f", sep.static_accuracy) + "%");
    }
    guarded(7, "argmax scale invariance", scale_invariance);
    guarded(8, "loo determinism", cli_determinism);
    guarded(9, "t-SNE properties", tsne_properties);
    if (have_sep) {
        guarded(10, "file-format round trips", [&] { format_round_trips(sep); });
    } else {
        for (int id : {3, 6, 10}) report(id, "depends on the separable fit", false, "fit did not complete");
    }
    guarded(11, "real-CLIP import targets", import_contingent);

    std::printf("%s: %d criterion failure(s)\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
    return failures == 0 ? 0 : 1;
}
