#include "rollforge/world.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include <nlohmann/json.hpp>

#include "rollforge/errors.hpp"
#include "rollforge/rng.hpp"

namespace rollforge {

Mat solve_lyapunov(const Mat& A, const Mat& Q, double tol) {
    Mat S = Q;
    for (int iter = 0; iter < 1000000; ++iter) {
        Mat next = A * S * A.transpose() + Q;
        const double change = (next - S).cwiseAbs().maxCoeff();
        S = std::move(next);
        if (change <= tol) break;
    }
    return 0.5 * (S + S.transpose());
}

double spectral_radius(const Mat& A) {
    if (A.size() == 0) return 0.0;
    Eigen::EigenSolver<Mat> es(A, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

double lyapunov_residual(const Regime& r) {
    return (r.A * r.sigma_inf * r.A.transpose() + r.Q - r.sigma_inf).cwiseAbs().maxCoeff();
}

Regime make_regime(int label, int dim, double rotation_angle, double contraction,
                   double process_noise) {
    if (dim <= 0 || dim % 2 != 0) throw DomainError("regime dimension must be positive and even");
    if (label < 0) throw DomainError("regime label must be non-negative");
    if (contraction >= 1.0) throw InstabilityError("contraction must be < 1 for a stable regime");
    if (contraction < 0.0) throw DomainError("contraction must be non-negative");
    if (process_noise < 0.0) throw DomainError("process noise must be non-negative");

    Regime r;
    r.label = label;
    r.rotation_angle = rotation_angle;
    r.contraction = contraction;
    r.A = Mat::Zero(dim, dim);
    const double c = std::cos(rotation_angle);
    const double s = std::sin(rotation_angle);
    for (int b = 0; b < dim; b += 2) {
        r.A(b, b) = contraction * c;
        r.A(b, b + 1) = -contraction * s;
        r.A(b + 1, b) = contraction * s;
        r.A(b + 1, b + 1) = contraction * c;
    }
    r.Q = process_noise * Mat::Identity(dim, dim);
    r.sigma_inf = solve_lyapunov(r.A, r.Q);
    r.sigma0 = r.sigma_inf;
    return r;
}

WorldConfig WorldConfig::defaults() {
    WorldConfig c;
    constexpr double pi = std::numbers::pi;
    c.rotation_angles = {0.0, pi / 12.0, pi / 8.0, pi / 6.0};
    return c;
}

World::World(const WorldConfig& config) : config_(config) {
    if (config_.rotation_angles.empty()) throw DomainError("world needs at least one regime");
    for (size_t i = 0; i < config_.rotation_angles.size(); ++i) {
        regimes_.push_back(make_regime(static_cast<int>(i), config_.dim, config_.rotation_angles[i],
                                       config_.contraction, config_.process_noise));
    }
}

const Regime& World::regime(int label) const {
    if (label < 0 || label >= num_regimes()) {
        throw DomainError("unknown regime label " + std::to_string(label));
    }
    return regimes_[static_cast<size_t>(label)];
}

std::vector<Vec> sample_sequence(const Regime& regime, int num_frames, std::uint64_t seed) {
    if (num_frames < 1) throw DomainError("sequence length must be >= 1");
    const int d = regime.dim();
    std::mt19937_64 rng(seed);
    const Eigen::LDLT<Mat> ldlt0(regime.sigma0);
    const Eigen::LDLT<Mat> ldltq(regime.Q);
    // LDLT tolerates the singular Q = 0 case; factor = P^T L sqrt(D).
    auto factor = [](const Eigen::LDLT<Mat>& f) {
        const Vec dsq = f.vectorD().cwiseMax(0.0).cwiseSqrt();
        Mat L = f.matrixL();
        return Mat(f.transpositionsP().transpose() * (L * dsq.asDiagonal()));
    };
    const Mat f0 = factor(ldlt0);
    const Mat fq = factor(ldltq);

    std::vector<Vec> seq;
    seq.reserve(static_cast<size_t>(num_frames));
    seq.push_back(f0 * standard_normal(rng, d));
    for (int i = 1; i < num_frames; ++i) {
        seq.push_back(regime.A * seq.back() + fq * standard_normal(rng, d));
    }
    return seq;
}

JointGaussian::JointGaussian(Vec mean, Mat cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    if (cov_.rows() != cov_.cols() || cov_.rows() != mean_.size()) {
        throw DomainError("joint gaussian shape mismatch");
    }
    if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
        throw DomainError("joint covariance is not symmetric");
    }
    Eigen::LLT<Mat> llt(cov_);
    if (llt.info() != Eigen::Success) throw DomainError("joint covariance is not positive definite");
    chol_ = llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Mat> es(cov_);
    eigenvalues_ = es.eigenvalues();
    eigenvectors_ = es.eigenvectors();
}

Vec JointGaussian::diffused_score(const Vec& z, double a, double b) const {
    if (z.size() != mean_.size()) throw DomainError("score input dimension mismatch");
    const Vec centered = z - a * mean_;
    const Vec inv = (a * a * eigenvalues_.array() + b * b).inverse().matrix();
    return -(eigenvectors_ * (inv.asDiagonal() * (eigenvectors_.transpose() * centered)));
}

double JointGaussian::diffused_log_density(const Vec& z, double a, double b) const {
    const Mat cov = a * a * cov_ + b * b * Mat::Identity(size(), size());
    Eigen::LLT<Mat> llt(cov);
    const Vec centered = z - a * mean_;
    const Vec w = llt.matrixL().solve(centered);
    const double logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
    return -0.5 * (w.squaredNorm() + logdet + size() * std::log(2.0 * std::numbers::pi));
}

JointGaussian joint_gaussian(const Regime& regime, int num_frames, int cap) {
    const int d = regime.dim();
    if (num_frames < 1) throw DomainError("joint gaussian needs at least one frame");
    if (num_frames * d > cap) {
        throw ResourceError("joint gaussian of " + std::to_string(num_frames * d) +
                            " dims exceeds cap " + std::to_string(cap));
    }
    const int n = num_frames * d;
    Mat cov = Mat::Zero(n, n);
    std::vector<Mat> marginal{regime.sigma0};
    for (int i = 1; i < num_frames; ++i) {
        marginal.push_back(regime.A * marginal.back() * regime.A.transpose() + regime.Q);
    }
    for (int j = 0; j < num_frames; ++j) {
        Mat block = marginal[static_cast<size_t>(j)];
        for (int i = j; i < num_frames; ++i) {
            cov.block(i * d, j * d, d, d) = block;
            cov.block(j * d, i * d, d, d) = block.transpose();
            block = regime.A * block;
        }
    }
    cov = 0.5 * (cov + cov.transpose());
    return JointGaussian(Vec::Zero(n), std::move(cov));
}

Vec analytic_data_score(const Vec& z, double t, const JointGaussian& joint,
                        const NoiseSchedule& schedule) {
    const double s = schedule.sigma(t);
    if (s == 0.0) throw SingularLevelError("data score undefined at level 0");
    return joint.diffused_score(z, 1.0 - s, s);
}

StationaryReference stationary_frechet_reference(const Regime& regime) {
    return {Vec::Zero(regime.dim()), regime.sigma_inf};
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = {{"dim", c.dim},
         {"contraction", c.contraction},
         {"process_noise", c.process_noise},
         {"rotation_angles", c.rotation_angles}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
    c = WorldConfig::defaults();
    c.dim = j.value("dim", c.dim);
    c.contraction = j.value("contraction", c.contraction);
    c.process_noise = j.value("process_noise", c.process_noise);
    if (j.contains("rotation_angles")) c.rotation_angles = j.at("rotation_angles").get<std::vector<double>>();
}

}  // namespace rollforge
