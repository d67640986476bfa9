#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attack_kind.hpp"
#include "container.hpp"
#include "errors.hpp"

namespace bsentinel {

struct EmbeddingRecord {
    std::uint64_t id = 0;
    Provenance provenance{};
    DetectionLabel detection = DetectionLabel::clean;
    std::vector<float> vector;

    friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

/// Token order of the token-embedding section: record id i is the i-th word.
inline const std::vector<std::string>& cache_token_words() {
    static const std::vector<std::string> words{"a", "photo", "of", "clean", "backdoored"};
    return words;
}

/// Joint-space image embeddings (unit norm) plus an optional section of raw
/// word embeddings used to initialize and encode prompts in import mode.
struct EmbeddingCache {
    std::size_t dim = 0;
    std::vector<EmbeddingRecord> records;
    std::size_t token_dim = 0;
    std::vector<EmbeddingRecord> tokens;

    std::size_t size() const noexcept { return records.size(); }
    bool empty() const noexcept { return records.empty(); }

    friend bool operator==(const EmbeddingCache&, const EmbeddingCache&) = default;
};

struct ImportResult {
    EmbeddingCache cache;
    /// Image vectors whose norm was off by more than 1e-3 and got rescaled.
    std::size_t renormalized = 0;
};

namespace bsec {

inline constexpr char kMagic[] = "BSEC";
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kImageSection = 0;
inline constexpr std::uint8_t kTokenSection = 1;
inline constexpr double kRenormTolerance = 1e-3;

inline void write_section(container::Writer& w, std::uint8_t tag, std::size_t dim,
                          const std::vector<EmbeddingRecord>& records) {
    w.u8(tag);
    w.u32(static_cast<std::uint32_t>(dim));
    w.u64(records.size());
    for (const auto& r : records) {
        if (r.vector.size() != dim) {
            throw ShapeError("embedding record " + std::to_string(r.id) + " has " + std::to_string(r.vector.size()) +
                             " values, section dim is " + std::to_string(dim));
        }
        w.u64(r.id);
        w.u8(r.provenance.code());
        w.u8(static_cast<std::uint8_t>(r.detection));
        w.f32s(r.vector);
    }
}

inline std::vector<std::uint8_t> encode(const EmbeddingCache& cache) {
    container::Writer w;
    w.magic("BSEC");
    w.u32(kVersion);
    w.u32(cache.tokens.empty() ? 1 : 2);
    write_section(w, kImageSection, cache.dim, cache.records);
    if (!cache.tokens.empty()) write_section(w, kTokenSection, cache.token_dim, cache.tokens);
    w.seal();
    return w.buffer();
}

inline ImportResult decode(std::span<const std::uint8_t> bytes, const std::string& what) {
    container::Reader head(bytes, what);
    head.expect_magic("BSEC");
    const std::uint32_t version = head.u32();
    if (version != kVersion) throw DataError(what + ": unsupported format version " + std::to_string(version));
    auto body = container::verify_crc(bytes, what);

    container::Reader r(body, what);
    r.expect_magic("BSEC");
    r.u32();
    const std::uint32_t sections = r.u32();
    ImportResult out;
    bool seen_image = false, seen_token = false;
    for (std::uint32_t s = 0; s < sections; ++s) {
        const std::uint8_t tag = r.u8();
        if (tag != kImageSection && tag != kTokenSection) throw DataError(what + ": unknown section tag " + std::to_string(tag));
        bool& seen = tag == kImageSection ? seen_image : seen_token;
        if (seen) throw DataError(what + ": duplicate section tag " + std::to_string(tag));
        seen = true;
        const std::uint32_t dim = r.u32();
        const std::uint64_t count = r.u64();
        const std::size_t record_bytes = 10 + std::size_t{dim} * 4;
        if (record_bytes == 0 || count > r.remaining() / record_bytes) throw DataError(what + ": truncated section");
        if (count > 0 && dim == 0) throw DataError(what + ": records in a zero-dimension section");
        std::vector<EmbeddingRecord> records(count);
        for (auto& rec : records) {
            rec.id = r.u64();
            rec.provenance = Provenance::from_code(r.u8());
            const std::uint8_t det = r.u8();
            if (det > 1) throw DataError(what + ": invalid detection label " + std::to_string(det));
            rec.detection = static_cast<DetectionLabel>(det);
            rec.vector.resize(dim);
            r.f32s(rec.vector);
            if (tag == kImageSection) {
                double sq = 0.0;
                for (float v : rec.vector) sq += static_cast<double>(v) * v;
                const double norm = std::sqrt(sq);
                if (!std::isfinite(norm) || norm <= 1e-12) throw DataError(what + ": zero or non-finite embedding");
                if (std::abs(norm - 1.0) > kRenormTolerance) {
                    for (float& v : rec.vector) v = static_cast<float>(v / norm);
                    ++out.renormalized;
                }
            }
        }
        if (tag == kImageSection) {
            out.cache.dim = dim;
            out.cache.records = std::move(records);
        } else {
            out.cache.token_dim = dim;
            out.cache.tokens = std::move(records);
        }
    }
    if (r.remaining() != 0) throw DataError(what + ": trailing bytes after last section");
    return out;
}

}  // namespace bsec

inline void export_embeddings(const EmbeddingCache& cache, const std::filesystem::path& path) {
    container::Writer w;
    auto bytes = bsec::encode(cache);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline ImportResult import_embeddings(const std::filesystem::path& path) {
    auto bytes = container::read_file(path);
    return bsec::decode(bytes, path.string());
}

/// Optionally checks that the cache has the expected joint dimension.
inline ImportResult import_embeddings(const std::filesystem::path& path, std::size_t expected_dim) {
    ImportResult r = import_embeddings(path);
    if (r.cache.dim != expected_dim && !r.cache.empty()) {
        throw DataError(path.string() + ": embedding dimension " + std::to_string(r.cache.dim) + ", expected " +
                        std::to_string(expected_dim));
    }
    return r;
}

}  // namespace bsentinel
