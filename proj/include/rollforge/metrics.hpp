#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rollforge/engine.hpp"
#include "rollforge/world.hpp"

namespace rollforge {

inline constexpr double kDefaultShrinkage = 0.05;

// Squared 2-Wasserstein distance between two Gaussians.
double frechet_gaussian(const Vec& mu1, const Mat& cov1, const Vec& mu2, const Mat& cov2);

struct GaussianFit {
    Vec mean;
    Mat cov;
};

// Sample mean and covariance, shrunk toward the diagonal by `shrinkage`.
GaussianFit fit_gaussian(std::span<const Vec> frames, double shrinkage = kDefaultShrinkage);

struct Segment {
    long start = 0;  // 0-based frame offset
    long length = 0;
};

struct DriftReport {
    double fd_first = 0.0;
    double fd_last = 0.0;
    double delta_drift = 0.0;
    double flicker = 0.0;
    std::vector<Segment> segments;
};

// Compares the first and last `seg_len` frames with the stationary law.
DriftReport drift_report(std::span<const Vec> rollout, const Regime& regime, long seg_len,
                         double shrinkage = kDefaultShrinkage);

// Same, but first segments of all rollouts are pooled into one fit and
// likewise for last segments.
DriftReport pooled_drift_report(std::span<const std::vector<Vec>> rollouts, const Regime& regime,
                                long seg_len, double shrinkage = kDefaultShrinkage);

// mean |x_{i+1} - A x_i|^2 - tr(Q), clipped at 0.
double flicker(std::span<const Vec> rollout, const Regime& regime);

enum class StreamMode { rolling, sf };
const char* to_string(StreamMode mode);
StreamMode stream_mode_from_string(const std::string& name);

struct PerfReport {
    std::string mode;
    double steady_fps = 0.0;
    double steady_latency_s = 0.0;  // median per-frame latency
    long warmup_passes = 0;
    long frames = 0;
    double denoise_passes_per_frame = 0.0;
    double kv_passes_per_frame = 0.0;
};

// Runs warm_frames unmeasured frames, then times measure_frames frames one by one.
PerfReport latency_bench(const StreamingEngine& engine, StreamMode mode, long warm_frames,
                         long measure_frames, int condition = 0, std::uint64_t seed = 0);

void to_json(nlohmann::json& j, const Segment& s);
void to_json(nlohmann::json& j, const DriftReport& r);
void to_json(nlohmann::json& j, const PerfReport& r);

}  // namespace rollforge
