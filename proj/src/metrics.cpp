#include "rollforge/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "rollforge/errors.hpp"

namespace rollforge {

namespace {

Mat psd_sqrt(const Mat& c, const char* what) {
    if (c.rows() != c.cols()) throw DomainError(std::string(what) + " is not square");
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
        throw DomainError(std::string(what) + " is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (c + c.transpose()));
    if (es.eigenvalues().minCoeff() < -1e-9 * scale) {
        throw DomainError(std::string(what) + " is not positive semi-definite");
    }
    const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const Vec& mu1, const Mat& cov1, const Vec& mu2, const Mat& cov2) {
    const auto d = mu1.size();
    if (mu2.size() != d || cov1.rows() != d || cov2.rows() != d) throw DomainError("Gaussian dimension mismatch");
    const Mat r1 = psd_sqrt(cov1, "first covariance");
    psd_sqrt(cov2, "second covariance");
    const Mat inner = r1 * cov2 * r1;
    const Mat cross = psd_sqrt(0.5 * (inner + inner.transpose()), "cross term");
    const double fd = (mu1 - mu2).squaredNorm() + (cov1 + cov2 - 2.0 * cross).trace();
    return std::max(0.0, fd);
}

GaussianFit fit_gaussian(std::span<const Vec> frames, double shrinkage) {
    if (frames.size() < 2) throw ContractError("covariance fit needs at least two frames");
    if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw DomainError("shrinkage must lie in [0, 1]");
    const auto d = frames.front().size();
    GaussianFit fit;
    fit.mean = Vec::Zero(d);
    for (const auto& x : frames) fit.mean += x;
    fit.mean /= static_cast<double>(frames.size());
    Mat s = Mat::Zero(d, d);
    for (const auto& x : frames) {
        const Vec c = x - fit.mean;
        s.noalias() += c * c.transpose();
    }
    s /= static_cast<double>(frames.size() - 1);
    fit.cov = (1.0 - shrinkage) * s;
    fit.cov.diagonal() += shrinkage * s.diagonal();
    return fit;
}

double flicker(std::span<const Vec> rollout, const Regime& regime) {
    if (rollout.size() < 2) return 0.0;
    double sum = 0.0;
    for (size_t i = 0; i + 1 < rollout.size(); ++i) sum += (rollout[i + 1] - regime.A * rollout[i]).squaredNorm();
    return std::max(0.0, sum / static_cast<double>(rollout.size() - 1) - regime.Q.trace());
}

namespace {

DriftReport compare(const GaussianFit& first, const GaussianFit& last, const Regime& regime) {
    const StationaryReference ref = stationary_frechet_reference(regime);
    DriftReport r;
    r.fd_first = frechet_gaussian(first.mean, first.cov, ref.mean, ref.cov);
    r.fd_last = frechet_gaussian(last.mean, last.cov, ref.mean, ref.cov);
    r.delta_drift = std::abs(r.fd_last - r.fd_first);
    return r;
}

void check_length(long m, long seg_len) {
    if (seg_len < 2) throw ContractError("segment length must be at least 2");
    if (m < 2 * seg_len) throw ContractError("rollout shorter than two segments");
}

}  // namespace

DriftReport drift_report(std::span<const Vec> rollout, const Regime& regime, long seg_len, double shrinkage) {
    const auto m = static_cast<long>(rollout.size());
    check_length(m, seg_len);
    const auto n = static_cast<size_t>(seg_len);
    DriftReport r = compare(fit_gaussian(rollout.first(n), shrinkage), fit_gaussian(rollout.last(n), shrinkage), regime);
    r.flicker = flicker(rollout, regime);
    r.segments = {{0, seg_len}, {m - seg_len, seg_len}};
    return r;
}

DriftReport pooled_drift_report(std::span<const std::vector<Vec>> rollouts, const Regime& regime, long seg_len,
                                double shrinkage) {
    if (rollouts.empty()) throw ContractError("no rollouts to pool");
    const auto m = static_cast<long>(rollouts.front().size());
    std::vector<Vec> first;
    std::vector<Vec> last;
    double flick = 0.0;
    for (const auto& r : rollouts) {
        if (static_cast<long>(r.size()) != m) throw ContractError("pooled rollouts must share a length");
        check_length(m, seg_len);
        first.insert(first.end(), r.begin(), r.begin() + seg_len);
        last.insert(last.end(), r.end() - seg_len, r.end());
        flick += flicker(r, regime);
    }
    DriftReport rep = compare(fit_gaussian(first, shrinkage), fit_gaussian(last, shrinkage), regime);
    rep.flicker = flick / static_cast<double>(rollouts.size());
    rep.segments = {{0, seg_len}, {m - seg_len, seg_len}};
    return rep;
}

const char* to_string(StreamMode mode) { return mode == StreamMode::rolling ? "rolling" : "sf"; }

StreamMode stream_mode_from_string(const std::string& name) {
    if (name == "rolling") return StreamMode::rolling;
    if (name == "sf") return StreamMode::sf;
    throw DomainError("unknown stream mode '" + name + "'");
}

PerfReport latency_bench(const StreamingEngine& engine, StreamMode mode, long warm_frames, long measure_frames,
                         int condition, std::uint64_t seed) {
    if (measure_frames < 64) throw DomainError("latency bench needs at least 64 measured frames");
    if (warm_frames < 0) throw DomainError("warm_frames must be non-negative");
    using clock = std::chrono::steady_clock;
    StreamState state;
    if (mode == StreamMode::rolling) {
        state = engine.start(condition, seed);
    } else {
        state = engine.begin(condition, seed);
        state.phase = StreamPhase::steady;
    }
    PerfReport rep;
    rep.mode = to_string(mode);
    rep.warmup_passes = state.denoise_passes;
    const auto step = [&] { return mode == StreamMode::rolling ? engine.roll_step(state) : engine.sf_step(state); };
    for (long k = 0; k < warm_frames; ++k) step();
    const long passes0 = state.denoise_passes;
    const long kv0 = state.kv_passes;
    std::vector<double> lat;
    lat.reserve(static_cast<size_t>(measure_frames));
    const auto start = clock::now();
    for (long k = 0; k < measure_frames; ++k) {
        const auto t0 = clock::now();
        step();
        lat.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    const double total = std::chrono::duration<double>(clock::now() - start).count();
    std::nth_element(lat.begin(), lat.begin() + static_cast<long>(lat.size() / 2), lat.end());
    rep.steady_latency_s = lat[lat.size() / 2];
    rep.steady_fps = static_cast<double>(measure_frames) / total;
    rep.frames = measure_frames;
    rep.denoise_passes_per_frame = static_cast<double>(state.denoise_passes - passes0) / static_cast<double>(measure_frames);
    rep.kv_passes_per_frame = static_cast<double>(state.kv_passes - kv0) / static_cast<double>(measure_frames);
    return rep;
}

void to_json(nlohmann::json& j, const Segment& s) { j = {{"start", s.start}, {"length", s.length}}; }

void to_json(nlohmann::json& j, const DriftReport& r) {
    j = {{"fd_first", r.fd_first},
         {"fd_last", r.fd_last},
         {"delta_drift", r.delta_drift},
         {"flicker", r.flicker},
         {"segments", r.segments}};
}

void to_json(nlohmann::json& j, const PerfReport& r) {
    j = {{"mode", r.mode},
         {"steady_fps", r.steady_fps},
         {"steady_latency_s", r.steady_latency_s},
         {"warmup_passes", r.warmup_passes},
         {"frames", r.frames},
         {"denoise_passes_per_frame", r.denoise_passes_per_frame},
         {"kv_passes_per_frame", r.kv_passes_per_frame}};
}

}  // namespace rollforge
