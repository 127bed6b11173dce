#pragma once

#include <cstdint>
#include <string_view>

#include "lfusion/tensor.hpp"

namespace lfusion {

// Counter-based random stream. Each output word is a pure function of
// (root_seed, stream_id, counter), so streams can be split freely and
// replayed on any platform. Test vectors live in tests/data/rng_vectors.csv.
struct RngStream {
    std::uint64_t root_seed = 0;
    std::uint64_t stream_id = 0;
    std::uint64_t counter = 0;

    RngStream() = default;
    RngStream(std::uint64_t root, std::uint64_t stream)
        : root_seed(root), stream_id(stream) {}
};

// SplitMix64 finalizer.
std::uint64_t rng_mix64(std::uint64_t x);

// Raw word at the stream's current counter; advances the counter.
std::uint64_t rng_next_u64(RngStream& s);

// Word at an explicit counter without touching stream state.
std::uint64_t rng_word_at(const RngStream& s, std::uint64_t counter);

// Uniform in (0, 1), 53-bit resolution.
double rng_uniform(RngStream& s);

// Standard normal via inverse CDF on a uniform counter draw.
double rng_normal(RngStream& s);

// Inverse standard normal CDF (Wichura AS241 rational approximation).
double normal_inverse_cdf(double p);

Tensor rng_standard_normal(RngStream& s, const std::vector<std::size_t>& shape);
Tensor rng_uniform01(RngStream& s, const std::vector<std::size_t>& shape);

// Independent substream: stream_id = hash(purpose, index) under the same root.
RngStream derive_stream(std::uint64_t root_seed, std::string_view purpose,
                        std::uint64_t index = 0);

}  // namespace lfusion
