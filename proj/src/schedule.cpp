#include "rollforge/schedule.hpp"

#include <cmath>
#include <string>

#include "rollforge/errors.hpp"

namespace rollforge {
namespace {

void check_level(double t) {
    if (!(t >= 0.0 && t <= kMaxLevel)) {
        throw DomainError("noise level " + std::to_string(t) + " outside [0, 1000]");
    }
}

void check_same_size(const Vec& a, const Vec& b, const char* what) {
    if (a.size() != b.size()) {
        throw DomainError(std::string(what) + ": dimension mismatch " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
    }
}

}  // namespace

double shift_timestep(double t, double k) {
    check_level(t);
    if (!(k > 0.0)) throw DomainError("shift factor must be positive");
    if (t == 0.0 || t == kMaxLevel) return t;
    const double u = t / kMaxLevel;
    return (k * u) / (1.0 + (k - 1.0) * u) * kMaxLevel;
}

double sigma(double t, double shift) { return shift_timestep(t, shift) / kMaxLevel; }

std::vector<double> uniform_schedule(int num_steps) {
    if (num_steps < 1) throw DomainError("schedule needs at least one step");
    std::vector<double> levels(static_cast<size_t>(num_steps));
    for (int i = 1; i <= num_steps; ++i) {
        levels[static_cast<size_t>(i - 1)] = kMaxLevel * i / num_steps;
    }
    levels.back() = kMaxLevel;
    return levels;
}

NoiseSchedule::NoiseSchedule(int num_steps, double shift)
    : NoiseSchedule(uniform_schedule(num_steps), shift) {}

NoiseSchedule::NoiseSchedule(std::vector<double> levels, double shift)
    : shift_(shift), levels_(std::move(levels)) {
    if (!(shift_ > 0.0)) throw DomainError("shift factor must be positive");
    if (levels_.empty()) throw DomainError("schedule needs at least one level");
    double prev = 0.0;
    for (double t : levels_) {
        if (!(t > prev) || t > kMaxLevel) throw DomainError("schedule levels must ascend in (0, 1000]");
        prev = t;
    }
    if (levels_.back() != kMaxLevel) throw DomainError("last schedule level must be 1000");
}

double NoiseSchedule::level(int j) const {
    if (j < 0 || j > num_steps()) throw DomainError("level index out of range");
    return j == 0 ? 0.0 : levels_[static_cast<size_t>(j - 1)];
}

double NoiseSchedule::sigma(double t) const { return rollforge::sigma(t, shift_); }

Vec NoiseSchedule::forward_diffuse(const Vec& x, double t, const Vec& noise) const {
    check_same_size(x, noise, "forward_diffuse");
    const double s = sigma(t);
    if (s == 0.0) return x;
    if (s == 1.0) return noise;
    return (1.0 - s) * x + s * noise;
}

Vec NoiseSchedule::data_prediction(const Vec& x_t, const Vec& v, double t) const {
    check_same_size(x_t, v, "data_prediction");
    return x_t - sigma(t) * v;
}

Vec NoiseSchedule::posterior_score(const Vec& z, const Vec& x_hat, double t) const {
    check_same_size(z, x_hat, "posterior_score");
    const double s = sigma(t);
    if (s == 0.0) throw SingularLevelError("score undefined at level 0");
    return -(z - (1.0 - s) * x_hat) / (s * s);
}

}  // namespace rollforge
