#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "rollforge/errors.hpp"
#include "rollforge/rng.hpp"
#include "rollforge/training.hpp"
#include "rollforge/world.hpp"

using namespace rollforge;

namespace {

Mat empirical_cov(const std::vector<Vec>& xs) {
    const int d = static_cast<int>(xs.front().size());
    Vec mean = Vec::Zero(d);
    for (const auto& x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    Mat cov = Mat::Zero(d, d);
    for (const auto& x : xs) cov += (x - mean) * (x - mean).transpose();
    return cov / static_cast<double>(xs.size() - 1);
}

}  // namespace

TEST_CASE("make_regime closed forms") {
    const Regime memoryless = make_regime(0, 2, 0.0, 0.0);
    CHECK(memoryless.A.norm() == 0.0);
    CHECK((memoryless.sigma_inf - memoryless.Q).norm() < 1e-14);

    const Regime scalar = make_regime(0, 2, 0.0, 0.9, 1.0);
    CHECK((scalar.sigma_inf - Mat::Identity(2, 2) / (1.0 - 0.81)).norm() < 1e-8);
    CHECK(scalar.sigma_inf(0, 0) == doctest::Approx(5.263157894736842));

    const Regime r = make_regime(1, 8, std::numbers::pi / 8, 0.95, 0.05);
    CHECK(spectral_radius(r.A) < 1.0);
    CHECK(spectral_radius(r.A) == doctest::Approx(0.95));
    CHECK(lyapunov_residual(r) <= 1e-8);

    CHECK_THROWS_AS(make_regime(0, 8, 0.0, 1.0), InstabilityError);
    CHECK_THROWS_AS(make_regime(0, 7, 0.0, 0.5), DomainError);
}

TEST_CASE("default world") {
    const World w;
    CHECK(w.dim() == 8);
    CHECK(w.num_regimes() == 4);
    for (int l = 0; l < 4; ++l) {
        CHECK(lyapunov_residual(w.regime(l)) <= 1e-8);
        CHECK((w.regime(l).sigma0 - w.regime(l).sigma_inf).norm() == 0.0);
        // Rotation leaves the isotropic fixed point unchanged: q / (1 - rho^2) per dim.
        CHECK(w.regime(l).sigma_inf.trace() == doctest::Approx(8 * 0.05 / (1 - 0.95 * 0.95)).epsilon(1e-8));
    }
    CHECK((w.regime(0).A - w.regime(1).A).norm() > 0.1);
    CHECK_THROWS_AS(w.regime(4), DomainError);
}

TEST_CASE("sample_sequence statistics") {
    const World w;
    const Regime& r = w.regime(2);
    SUBCASE("first-frame covariance over many seeds") {
        std::vector<Vec> firsts;
        for (std::uint64_t s = 0; s < 100000; ++s) firsts.push_back(sample_sequence(r, 1, s).front());
        const Mat c = empirical_cov(firsts);
        CHECK((c - r.sigma0).cwiseAbs().maxCoeff() < 0.05 * r.sigma0.diagonal().maxCoeff());
    }
    SUBCASE("memoryless regime has no lag-1 correlation") {
        const Regime m = make_regime(0, 2, 0.0, 0.0);
        const auto seq = sample_sequence(m, 100000, 4);
        Mat lag = Mat::Zero(2, 2);
        for (size_t i = 0; i + 1 < seq.size(); ++i) lag += seq[i + 1] * seq[i].transpose();
        lag /= static_cast<double>(seq.size() - 1);
        CHECK(lag.cwiseAbs().maxCoeff() < 0.05 * m.Q(0, 0));
    }
    SUBCASE("determinism") {
        const auto a = sample_sequence(r, 50, 9);
        const auto b = sample_sequence(r, 50, 9);
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
        CHECK(sample_sequence(r, 5, 10)[4] != a[4]);
    }
    SUBCASE("long-run marginal approaches the stationary law") {
        const Regime from_zero = [&] {
            Regime q = r;
            q.sigma0 = 0.01 * Mat::Identity(8, 8);
            return q;
        }();
        const auto seq = sample_sequence(from_zero, 10000, 5);
        const std::vector<Vec> tail(seq.begin() + 200, seq.end());
        const double err_tail = (empirical_cov(tail) - r.sigma_inf).norm();
        CHECK(err_tail < 0.15 * r.sigma_inf.norm());
        CHECK(err_tail < (empirical_cov(std::vector<Vec>(seq.begin(), seq.begin() + 30)) - r.sigma_inf).norm());
    }
    CHECK_THROWS_AS(sample_sequence(r, 0, 1), DomainError);
}

TEST_CASE("joint_gaussian structure") {
    const World w;
    const Regime& r = w.regime(1);
    CHECK((joint_gaussian(r, 1).cov() - r.sigma0).norm() < 1e-14);

    const Regime m = make_regime(0, 2, 0.0, 0.0);
    const auto jm = joint_gaussian(m, 2);
    CHECK(jm.cov().block(0, 2, 2, 2).norm() == 0.0);
    CHECK((jm.cov().block(2, 2, 2, 2) - m.Q).norm() < 1e-14);

    const auto j21 = joint_gaussian(r, 21);
    CHECK(j21.size() == 168);
    CHECK((j21.cov() - j21.cov().transpose()).norm() < 1e-12);
    CHECK_THROWS_AS(joint_gaussian(r, 65), ResourceError);

    SUBCASE("Monte-Carlo covariance, N = 3, D = 2") {
        const Regime g = make_regime(3, 2, 0.4, 0.8, 0.3);
        const auto jg = joint_gaussian(g, 3);
        std::vector<Vec> flat;
        for (std::uint64_t s = 0; s < 100000; ++s) {
            const auto seq = sample_sequence(g, 3, 1000 + s);
            Vec f(6);
            for (int i = 0; i < 3; ++i) f.segment(2 * i, 2) = seq[static_cast<size_t>(i)];
            flat.push_back(f);
        }
        const Mat c = empirical_cov(flat);
        const double scale = jg.cov().diagonal().maxCoeff();
        CHECK((c - jg.cov()).cwiseAbs().maxCoeff() < 0.05 * scale);
    }
}

TEST_CASE("analytic_data_score") {
    const World w;
    const NoiseSchedule sched;
    SUBCASE("scalar closed form") {
        const JointGaussian jg(Vec::Zero(1), Mat::Identity(1, 1));
        const double t_half = 1000.0 / 6.0;
        Vec z(1);
        z << 0.7;
        CHECK(analytic_data_score(z, t_half, jg, sched)[0] == doctest::Approx(-1.4));
    }
    SUBCASE("vanishes at the mode") {
        const auto jg = joint_gaussian(w.regime(0), 3);
        CHECK(analytic_data_score(Vec::Zero(24), 300.0, jg, sched).norm() == 0.0);
        CHECK_THROWS_AS(analytic_data_score(Vec::Zero(24), 0.0, jg, sched), SingularLevelError);
    }
    SUBCASE("finite-difference log-density gradient") {
        std::mt19937_64 rng(17);
        std::uniform_real_distribution<double> level(5.0, 1000.0);
        for (int c = 0; c < 100; ++c) {
            const int label = c % 4;
            const int n = 1 + c % 4;
            const auto jg = joint_gaussian(w.regime(label), n);
            const double t = level(rng);
            const double s = sched.sigma(t);
            const Vec x = flatten_frames(sample_sequence(w.regime(label), n, 50 + c));
            const Vec z = (1 - s) * x + s * standard_normal(rng, jg.size());
            const Vec score = analytic_data_score(z, t, jg, sched);
            Vec fd(jg.size());
            const double h = 1e-4;
            for (int i = 0; i < jg.size(); ++i) {
                Vec p = z, m = z;
                p[i] += h;
                m[i] -= h;
                fd[i] = (jg.diffused_log_density(p, 1 - s, s) - jg.diffused_log_density(m, 1 - s, s)) / (2 * h);
            }
            CHECK((score - fd).norm() <= 1e-5 * score.norm());
        }
    }
}

TEST_CASE("stationary reference") {
    const Regime m = make_regime(0, 2, 0.0, 0.0);
    const auto ref = stationary_frechet_reference(m);
    CHECK(ref.mean.norm() == 0.0);
    CHECK((ref.cov - m.Q).norm() < 1e-14);
}
