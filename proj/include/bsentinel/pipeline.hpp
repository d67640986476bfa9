#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "dataset.hpp"
#include "embedding_cache.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace bsentinel {

/// Encodes and L2-normalizes every image. f_I is frozen, so the result can be
/// reused for every epoch and every experiment on the same images. Work is
/// split over `threads` workers; output order follows sample order.
inline EmbeddingCache precompute_image_embeddings(const ImageEncoder& encoder, const Dataset& data,
                                                  std::size_t threads = 1) {
    EmbeddingCache cache;
    cache.dim = encoder.config.joint_dim;
    cache.records.resize(data.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Sample& s = data.samples[i];
            Tensor<float> v = encoder.encode(s.image);
            const float norm = kernels::l2_norm<float>(v.data());
            if (!(norm > 1e-12f) || !std::isfinite(norm)) {
                throw NumericError("image " + std::to_string(s.id) + " encodes to a zero or non-finite vector");
            }
            EmbeddingRecord& r = cache.records[i];
            r.id = s.id;
            r.provenance = s.provenance;
            r.detection = s.detection;
            r.vector.assign(v.data().begin(), v.data().end());
            for (float& x : r.vector) x /= norm;
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, data.size()));
    if (threads <= 1) {
        work(0, data.size());
        return cache;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (data.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                work(std::min(data.size(), t * chunk), std::min(data.size(), (t + 1) * chunk));
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return cache;
}

/// Clean embeddings plus, for each attack, the embedding of the backdoored
/// version of every clean image, aligned by position.
struct EmbeddingPool {
    std::size_t dim = 0;
    std::vector<EmbeddingRecord> clean;
    std::map<AttackKind, std::vector<EmbeddingRecord>> attacked;

    const std::vector<EmbeddingRecord>& of(AttackKind kind) const {
        auto it = attacked.find(kind);
        if (it == attacked.end()) {
            throw DataError(std::string("embedding pool has no records for attack ") + std::string(attack_name(kind)));
        }
        return it->second;
    }
};

/// Groups a tagged cache by provenance. Backdoored records are matched to
/// clean ones by id; an attack that covers only part of the clean ids is an error.
inline EmbeddingPool make_pool(const EmbeddingCache& cache) {
    EmbeddingPool pool;
    pool.dim = cache.dim;
    std::unordered_map<std::uint64_t, std::size_t> position;
    for (const auto& r : cache.records) {
        if (r.provenance.is_clean()) {
            if (!position.emplace(r.id, pool.clean.size()).second) throw DataError("duplicate clean id " + std::to_string(r.id));
            pool.clean.push_back(r);
        }
    }
    std::map<AttackKind, std::vector<const EmbeddingRecord*>> slots;
    for (const auto& r : cache.records) {
        if (r.provenance.is_clean()) continue;
        const AttackKind kind = *r.provenance.attack();
        auto& v = slots[kind];
        if (v.empty()) v.assign(pool.clean.size(), nullptr);
        auto it = position.find(r.id);
        if (it == position.end()) {
            throw DataError(std::string(attack_name(kind)) + " record " + std::to_string(r.id) + " has no clean counterpart");
        }
        if (v[it->second]) throw DataError("duplicate " + std::string(attack_name(kind)) + " record " + std::to_string(r.id));
        v[it->second] = &r;
    }
    for (auto& [kind, v] : slots) {
        std::vector<EmbeddingRecord> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i]) {
                throw DataError(std::string(attack_name(kind)) + " records do not cover clean id " +
                                std::to_string(pool.clean[i].id));
            }
            out.push_back(*v[i]);
        }
        pool.attacked.emplace(kind, std::move(out));
    }
    return pool;
}

inline EmbeddingCache pool_to_cache(const EmbeddingPool& pool) {
    EmbeddingCache c;
    c.dim = pool.dim;
    c.records = pool.clean;
    for (const auto& [kind, recs] : pool.attacked) c.records.insert(c.records.end(), recs.begin(), recs.end());
    return c;
}

/// Embeds a clean dataset and its six backdoored versions.
inline EmbeddingPool embed_pool(const ImageEncoder& encoder, const Dataset& clean, const SpecMap& specs,
                                std::size_t threads = 1) {
    EmbeddingPool pool;
    pool.dim = encoder.config.joint_dim;
    pool.clean = precompute_image_embeddings(encoder, clean, threads).records;
    for (AttackKind kind : kAllAttacks) {
        pool.attacked[kind] = precompute_image_embeddings(encoder, backdoor_all(clean, spec_for(specs, kind)), threads).records;
    }
    return pool;
}

/// Embedding-level counterpart of build_loo_training_set: identical selection,
/// read from precomputed embeddings instead of re-encoding images.
inline EmbeddingCache build_loo_training_cache(const EmbeddingPool& pool, const LooPlan& plan) {
    EmbeddingCache out;
    out.dim = pool.dim;
    out.records = pool.clean;
    for (const auto& [kind, indices] : loo_selection(pool.clean.size(), plan)) {
        const auto& recs = pool.of(kind);
        for (std::size_t idx : indices) out.records.push_back(recs[idx]);
    }
    return out;
}

inline EmbeddingCache build_loo_test_cache(const EmbeddingPool& pool, AttackKind held_out) {
    EmbeddingCache out;
    out.dim = pool.dim;
    out.records = pool.clean;
    const auto& recs = pool.of(held_out);
    out.records.insert(out.records.end(), recs.begin(), recs.end());
    return out;
}

inline std::size_t count_provenance(const EmbeddingCache& c, Provenance p) {
    return static_cast<std::size_t>(
        std::count_if(c.records.begin(), c.records.end(), [p](const EmbeddingRecord& r) { return r.provenance == p; }));
}

inline std::vector<float> random_unit_vector(std::size_t dim, std::uint64_t seed) {
    if (dim == 0) throw ConfigError("dimension must be positive");
    Rng rng(seed);
    std::vector<float> u(dim);
    double ss = 0.0;
    for (float& x : u) {
        x = static_cast<float>(rng.normal());
        ss += static_cast<double>(x) * x;
    }
    for (float& x : u) x = static_cast<float>(x / std::sqrt(ss));
    return u;
}

/// Two-cluster embedding cache: `per_class` clean vectors around +u and
/// `per_class` backdoored vectors around -u, each coordinate perturbed by
/// N(0, sigma^2) and then re-normalized. Backdoored records carry `tag`.
inline EmbeddingCache separable_cache(const std::vector<float>& u, std::size_t per_class, double sigma, std::uint64_t seed,
                                      AttackKind tag = AttackKind::badnets_sq) {
    if (per_class == 0) throw ConfigError("per_class must be positive");
    if (!(sigma >= 0.0)) throw ConfigError("sigma must be non-negative");
    Rng rng(seed);
    EmbeddingCache c;
    c.dim = u.size();
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        const bool bd = i >= per_class;
        std::vector<float> v(u.size());
        double ss = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) {
            v[k] = static_cast<float>((bd ? -u[k] : u[k]) + sigma * rng.normal());
            ss += static_cast<double>(v[k]) * v[k];
        }
        for (float& x : v) x = static_cast<float>(x / std::sqrt(ss));
        c.records.push_back({i, bd ? Provenance(tag) : Provenance::clean(), bd ? DetectionLabel::backdoored : DetectionLabel::clean,
                             std::move(v)});
    }
    return c;
}

/// Token-embedding section carrying the prompt words of a vocabulary.
inline std::vector<EmbeddingRecord> token_section(const Vocabulary& vocab) {
    std::vector<EmbeddingRecord> out;
    const auto& words = cache_token_words();
    for (std::size_t i = 0; i < words.size(); ++i) {
        out.push_back(EmbeddingRecord{i, Provenance::clean(), DetectionLabel::clean, vocab.row(words[i])});
    }
    return out;
}

/// Vocabulary recovered from a cache's token section (import mode).
inline Vocabulary vocabulary_from_cache(const EmbeddingCache& cache) {
    const auto& words = cache_token_words();
    if (cache.tokens.empty()) throw DataError("embedding cache has no token-embedding section");
    std::vector<float> table(words.size() * cache.token_dim);
    std::vector<bool> seen(words.size(), false);
    for (const auto& r : cache.tokens) {
        if (r.id >= words.size()) throw DataError("token record id " + std::to_string(r.id) + " is not a known prompt word");
        std::copy(r.vector.begin(), r.vector.end(), table.begin() + static_cast<std::ptrdiff_t>(r.id * cache.token_dim));
        seen[r.id] = true;
    }
    for (std::size_t i = 0; i < words.size(); ++i)
        if (!seen[i]) throw DataError("token section lacks the embedding of '" + words[i] + "'");
    return Vocabulary(words, Tensor<float>({words.size(), cache.token_dim}, std::move(table)));
}

}  // namespace bsentinel
