#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rollforge/schedule.hpp"
#include "rollforge/types.hpp"

namespace rollforge {

// Linear-Gaussian dynamics x_{i+1} = A x_i + w, w ~ N(0, Q), x_1 ~ N(0, Sigma0).
struct Regime {
    int label = 0;
    double rotation_angle = 0.0;
    double contraction = 0.0;
    Mat A;
    Mat Q;
    Mat sigma0;
    Mat sigma_inf;

    int dim() const { return static_cast<int>(A.rows()); }
};

// A is block diagonal with 2x2 rotations by `rotation_angle`, scaled by
// `contraction`. Q = process_noise * I and Sigma0 = SigmaInf.
Regime make_regime(int label, int dim, double rotation_angle, double contraction,
                   double process_noise = 0.05);

// Solves S = A S A^T + Q by fixed-point iteration.
Mat solve_lyapunov(const Mat& A, const Mat& Q, double tol = 1e-10);
double lyapunov_residual(const Regime& regime);
double spectral_radius(const Mat& A);

struct WorldConfig {
    int dim = 8;
    double contraction = 0.95;
    double process_noise = 0.05;
    std::vector<double> rotation_angles;  // one regime per angle

    static WorldConfig defaults();
};

class World {
public:
    explicit World(const WorldConfig& config = WorldConfig::defaults());

    int dim() const { return config_.dim; }
    int num_regimes() const { return static_cast<int>(regimes_.size()); }
    const Regime& regime(int label) const;
    const WorldConfig& config() const { return config_; }

private:
    WorldConfig config_;
    std::vector<Regime> regimes_;
};

std::vector<Vec> sample_sequence(const Regime& regime, int num_frames, std::uint64_t seed);

/// Exact joint law of N consecutive frames, flattened frame-major.
///
/// Besides the Cholesky factor of the covariance, the eigendecomposition is
/// cached so the diffused covariance a^2 C + b^2 I can be inverted at any
/// continuous level in O((ND)^2).
class JointGaussian {
public:
    JointGaussian(Vec mean, Mat cov);

    const Vec& mean() const { return mean_; }
    const Mat& cov() const { return cov_; }
    const Mat& chol() const { return chol_; }
    int size() const { return static_cast<int>(mean_.size()); }

    // Score of N(a mean, a^2 C + b^2 I) at z.
    Vec diffused_score(const Vec& z, double a, double b) const;
    double diffused_log_density(const Vec& z, double a, double b) const;

private:
    Vec mean_;
    Mat cov_;
    Mat chol_;
    Vec eigenvalues_;
    Mat eigenvectors_;
};

inline constexpr int kDefaultJointCap = 512;

JointGaussian joint_gaussian(const Regime& regime, int num_frames, int cap = kDefaultJointCap);

Vec analytic_data_score(const Vec& z, double t, const JointGaussian& joint,
                        const NoiseSchedule& schedule);

struct StationaryReference {
    Vec mean;
    Mat cov;
};
StationaryReference stationary_frechet_reference(const Regime& regime);

void to_json(nlohmann::json& j, const WorldConfig& config);
void from_json(const nlohmann::json& j, WorldConfig& config);

}  // namespace rollforge
