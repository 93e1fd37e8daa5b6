#include <algorithm>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "rollforge/errors.hpp"
#include "rollforge/metrics.hpp"
#include "test_util.hpp"

using namespace rollforge;
using namespace rollforge::test;

namespace {

Mat scalar(double v) { return Mat::Constant(1, 1, v); }
Vec scalar_vec(double v) { return Vec::Constant(1, v); }

Vec vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

Mat random_psd(std::mt19937_64& rng, int d) {
    const Mat a = random_rowmat(rng, d, d, 1.0);
    return a * a.transpose() + 0.1 * Mat::Identity(d, d);
}

}  // namespace

TEST_CASE("Frechet distance closed forms") {
    CHECK(frechet_gaussian(scalar_vec(0), scalar(1), scalar_vec(0), scalar(1)) == doctest::Approx(0.0));
    CHECK(frechet_gaussian(scalar_vec(0), scalar(1), scalar_vec(1), scalar(1)) == doctest::Approx(1.0));
    CHECK(frechet_gaussian(scalar_vec(0), scalar(1), scalar_vec(0), scalar(4)) == doctest::Approx(1.0));
    // commuting diagonal case: sum of (s1 - s2)^2
    Vec m = Vec::Zero(3);
    Mat a = vec({1, 4, 9}).asDiagonal();
    Mat b = vec({4, 4, 1}).asDiagonal();
    CHECK(frechet_gaussian(m, a, m, b) == doctest::Approx(1.0 + 0.0 + 4.0));
}

TEST_CASE("Frechet distance properties") {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 50; ++k) {
        const int d = 1 + k % 8;
        const Mat c1 = random_psd(rng, d), c2 = random_psd(rng, d);
        const Vec m1 = random_rowmat(rng, d, 1, 1.0), m2 = random_rowmat(rng, d, 1, 1.0);
        const double ab = frechet_gaussian(m1, c1, m2, c2);
        const double ba = frechet_gaussian(m2, c2, m1, c1);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-8));
        CHECK(ab > 0.0);
        CHECK(frechet_gaussian(m1, c1, m1, c1) < 1e-8 * c1.trace());
    }
    Mat bad = Mat::Identity(2, 2);
    bad(1, 1) = -1.0;
    CHECK_THROWS_AS(frechet_gaussian(Vec::Zero(2), bad, Vec::Zero(2), Mat::Identity(2, 2)), DomainError);
    Mat skew = Mat::Identity(2, 2);
    skew(0, 1) = 0.5;
    CHECK_THROWS_AS(frechet_gaussian(Vec::Zero(2), skew, Vec::Zero(2), Mat::Identity(2, 2)), DomainError);
    CHECK_THROWS_AS(frechet_gaussian(Vec::Zero(2), Mat::Identity(2, 2), Vec::Zero(3), Mat::Identity(3, 3)),
                    DomainError);
}

TEST_CASE("Gaussian fit") {
    std::vector<Vec> xs{vec({0, 0}), vec({2, 0}), vec({0, 2}), vec({2, 2})};
    const GaussianFit raw = fit_gaussian(xs, 0.0);
    CHECK(raw.mean.isApprox(vec({1, 1})));
    CHECK(raw.cov(0, 0) == doctest::Approx(4.0 / 3.0));
    CHECK(raw.cov(0, 1) == doctest::Approx(0.0));
    std::vector<Vec> ys{vec({0, 0}), vec({1, 1}), vec({2, 2})};
    const GaussianFit shrunk = fit_gaussian(ys, 0.25);
    CHECK(shrunk.cov(0, 0) == doctest::Approx(1.0));
    CHECK(shrunk.cov(0, 1) == doctest::Approx(0.75));
    CHECK_THROWS_AS(fit_gaussian(std::vector<Vec>{vec({0, 0})}), ContractError);
    CHECK_THROWS_AS(fit_gaussian(ys, 1.5), DomainError);
}

TEST_CASE("true-world rollouts show no drift") {
    // Each batch pools 10 seeds; the bound is a sampling-noise bound, so it is
    // asserted as a pass rate, and the signed change must average to zero.
    const World world;
    const int batches = 40;
    int passed = 0;
    double sum = 0.0, sq = 0.0;
    for (int b = 0; b < batches; ++b) {
        const int label = b % 4;
        std::vector<std::vector<Vec>> rollouts;
        for (int s = 0; s < 10; ++s) rollouts.push_back(sample_sequence(world.regime(label), 4096, 900 + 10 * b + s));
        const DriftReport r = pooled_drift_report(rollouts, world.regime(label), 256);
        passed += r.delta_drift < 0.05 * r.fd_first + 0.02;
        const double signed_change = r.fd_last - r.fd_first;
        sum += signed_change;
        sq += signed_change * signed_change;
        CHECK(r.delta_drift == std::abs(r.fd_last - r.fd_first));
        CHECK(r.flicker < 0.01);
        CHECK(r.segments.size() == 2);
        CHECK(r.segments[1].start == 4096 - 256);
    }
    const double mean = sum / batches;
    const double se = std::sqrt((sq / batches - mean * mean) / batches);
    INFO("pass rate " << passed << "/" << batches << " signed mean " << mean << " se " << se);
    CHECK(passed >= 28);
    CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("injected mean drift grows with rollout length") {
    const World world;
    const Regime& reg = world.regime(0);
    double prev = -1.0;
    for (long m : {512L, 1024L, 2048L}) {
        auto xs = sample_sequence(reg, static_cast<int>(m), 17);
        for (long f = 0; f < m; ++f) xs[static_cast<size_t>(f)].array() += 0.01 * static_cast<double>(f);
        const double d = drift_report(xs, reg, 256).delta_drift;
        CHECK(d > prev);
        prev = d;
    }
}

TEST_CASE("degenerate rollouts") {
    const World world;
    const Regime& reg = world.regime(0);
    const std::vector<Vec> constant(600, Vec::Constant(8, 3.0));
    const DriftReport r = drift_report(constant, reg, 256);
    CHECK(r.flicker == 0.0);
    CHECK(r.fd_first > 50.0);
    CHECK(r.delta_drift == 0.0);
    CHECK_THROWS_AS(drift_report(constant, reg, 400), ContractError);
    CHECK_THROWS_AS(drift_report(constant, reg, 1), ContractError);
    const std::vector<std::vector<Vec>> uneven{constant, std::vector<Vec>(700, Vec::Zero(8))};
    CHECK_THROWS_AS(pooled_drift_report(uneven, reg, 256), ContractError);
    CHECK_THROWS_AS(pooled_drift_report(std::vector<std::vector<Vec>>{}, reg, 256), ContractError);
}

TEST_CASE("flicker of the true dynamics") {
    const World world;
    const auto xs = sample_sequence(world.regime(2), 20000, 4);
    // innovation excess averages to zero
    CHECK(std::abs(flicker(xs, world.regime(2))) < 0.02);
    std::vector<Vec> noisy = xs;
    std::mt19937_64 rng(1);
    for (auto& x : noisy) x += random_rowmat(rng, 8, 1, 0.3);
    CHECK(flicker(noisy, world.regime(2)) > 0.5);
}

TEST_CASE("latency bench") {
    Denoiser m(small_config(), 1);
    randomize(m.params(), 2, 0.1);
    const StreamingEngine e(m, EngineConfig{CacheConfig{1, 1, 5}});
    const PerfReport roll = latency_bench(e, StreamMode::rolling, 8, 64);
    const PerfReport sf = latency_bench(e, StreamMode::sf, 8, 64);
    CHECK(roll.mode == "rolling");
    CHECK(roll.denoise_passes_per_frame == 1.0);
    CHECK(roll.kv_passes_per_frame == 1.0);
    CHECK(roll.warmup_passes == 4);
    CHECK(sf.denoise_passes_per_frame == 5.0);
    CHECK(sf.warmup_passes == 0);
    CHECK(roll.frames == 64);
    CHECK(roll.steady_fps > 0.0);
    CHECK(roll.steady_latency_s > 0.0);
    CHECK_THROWS_AS(latency_bench(e, StreamMode::rolling, 8, 10), DomainError);
    CHECK_THROWS_AS(latency_bench(e, StreamMode::rolling, -1, 64), DomainError);
    CHECK(stream_mode_from_string("sf") == StreamMode::sf);
    CHECK_THROWS_AS(stream_mode_from_string("other"), DomainError);

    const nlohmann::json j = roll;
    for (const char* key : {"mode", "steady_fps", "steady_latency_s", "warmup_passes", "frames",
                            "denoise_passes_per_frame", "kv_passes_per_frame"}) {
        CHECK(j.contains(key));
    }
}

TEST_CASE("drift report JSON") {
    DriftReport r;
    r.fd_first = 1.5;
    r.fd_last = 2.0;
    r.delta_drift = 0.5;
    r.segments = {{0, 4}, {6, 4}};
    const nlohmann::json j = r;
    CHECK(j.at("delta_drift") == 0.5);
    CHECK(j.at("segments").at(1).at("start") == 6);
    CHECK(j.at("flicker") == 0.0);
}
