#pragma once

#include <vector>

#include "rollforge/types.hpp"

namespace rollforge {

inline constexpr double kMaxLevel = 1000.0;

// Time-step shift t' = (k t / 1000) / (1 + (k - 1) t / 1000) * 1000.
double shift_timestep(double t, double k);

// [1000 * 1/T, 1000 * 2/T, ..., 1000].
std::vector<double> uniform_schedule(int num_steps);

// Network preconditioning constants. Only c_in and c_out enter the
// computation; c_skip is carried for checkpoint compatibility because the
// data prediction is obtained by inverting the flow, not by skipping noise.
struct Preconditioning {
    double c_skip = 1.0;
    double c_in = 1.0;
    double c_out = 1.0;
};

/// Few-step flow-matching schedule.
///
/// Level 0 is clean data and level 1000 is pure noise; a frame at level t is
/// x_t = (1 - sigma(t)) x + sigma(t) eps with sigma(t) = t'(k, t) / 1000.
/// Levels t_1..t_T are stored ascending; t_0 = 0 is implicit.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int num_steps = 5, double shift = 5.0);
    NoiseSchedule(std::vector<double> levels, double shift);

    int num_steps() const { return static_cast<int>(levels_.size()); }
    double shift() const { return shift_; }
    const std::vector<double>& levels() const { return levels_; }

    // t_j for j in [0, T]; level(0) == 0.
    double level(int j) const;

    double sigma(double t) const;
    // c_noise(t) = t', the shifted level fed to the level embedding.
    double noise_input(double t) const { return sigma(t) * kMaxLevel; }

    Vec forward_diffuse(const Vec& x, double t, const Vec& noise) const;
    // x_hat = x_t - sigma(t) * v under the velocity target v = eps - x.
    Vec data_prediction(const Vec& x_t, const Vec& v, double t) const;
    // Marginal score implied by a posterior-mean estimate x_hat at level t.
    Vec posterior_score(const Vec& z, const Vec& x_hat, double t) const;

private:
    double shift_;
    std::vector<double> levels_;
};

double sigma(double t, double shift);

}  // namespace rollforge
