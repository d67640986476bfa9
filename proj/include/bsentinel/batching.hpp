#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace bsentinel {

/// Index batches for one epoch: a seeded permutation of [0, n) cut into
/// chunks of `batch_size`, keeping the final short chunk. The order depends
/// only on (seed, epoch).
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                          std::size_t epoch) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    Rng rng(derive_seed(seed, 0x5EED0000ULL + epoch));
    std::vector<std::size_t> order = rng.permutation(n);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace bsentinel
