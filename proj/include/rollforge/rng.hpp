#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "rollforge/types.hpp"

namespace rollforge {

// Noise streams are keyed by a tuple of integers (seed, frame, level, ...)
// so that any draw can be regenerated independently of call order.
class KeyedNoise {
public:
    explicit KeyedNoise(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::mt19937_64 engine(std::initializer_list<std::int64_t> key) const;
    Vec normal(int dim, std::initializer_list<std::int64_t> key) const;

private:
    std::uint64_t seed_;
};

Vec standard_normal(std::mt19937_64& rng, int dim);

}  // namespace rollforge
