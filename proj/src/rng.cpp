#include "rollforge/rng.hpp"

#include <vector>

namespace rollforge {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::mt19937_64 KeyedNoise::engine(std::initializer_list<std::int64_t> key) const {
    std::uint64_t h = splitmix64(seed_);
    for (std::int64_t k : key) h = splitmix64(h ^ static_cast<std::uint64_t>(k));
    return std::mt19937_64(h);
}

Vec KeyedNoise::normal(int dim, std::initializer_list<std::int64_t> key) const {
    auto rng = engine(key);
    return standard_normal(rng, dim);
}

Vec standard_normal(std::mt19937_64& rng, int dim) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Vec out(dim);
    for (int i = 0; i < dim; ++i) out[i] = dist(rng);
    return out;
}

}  // namespace rollforge
