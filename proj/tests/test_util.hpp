#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "rollforge/denoiser.hpp"
#include "rollforge/rng.hpp"

namespace rollforge::test {

inline RowMat random_rowmat(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    RowMat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

// Fills every tensor, the zero-initialized heads included, so gradients reach all layers.
inline void randomize(ParameterSet& params, std::uint64_t seed, double scale = 0.15) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : params.params()) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
    }
}

inline DenoiserConfig small_config() {
    DenoiserConfig c;
    c.dim_model = 16;
    c.num_layers = 2;
    c.num_heads = 2;
    c.mlp_hidden = 24;
    return c;
}

inline std::vector<Vec> random_frames(std::mt19937_64& rng, int count, int dim) {
    std::vector<Vec> out;
    for (int i = 0; i < count; ++i) out.push_back(standard_normal(rng, dim));
    return out;
}

}  // namespace rollforge::test
