#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "rollforge/denoiser.hpp"
#include "rollforge/kvcache.hpp"
#include "rollforge/rng.hpp"

namespace rollforge {

struct EngineConfig {
    CacheConfig cache;
    SinkPlacement placement = SinkPlacement::rebased;
    // Subtract a common offset so the leftmost attended position is 0.
    bool rebase_positions = true;
};

enum class StreamPhase { warmup, steady };

struct WindowFrame {
    Vec x;
    int level_index = 0;  // index into t_0..t_T
    long frame_index = 0;
};

struct StreamState {
    std::deque<WindowFrame> window;
    KvCache cache;
    int condition = 0;
    std::uint64_t seed = 0;
    long frames_emitted = 0;
    StreamPhase phase = StreamPhase::warmup;
    long denoise_passes = 0;
    long kv_passes = 0;

    long window_start() const { return frames_emitted + 1; }
};

// Optional hooks into every denoising pass, used by training to record
// selected windows. `window_start` may be <= 0 for warm-up passes whose
// window extends before the first frame.
struct WindowObserver {
    std::function<Tape*(long window_start, int first_level_index)> tape_for;
    // Exact inputs of the pass, after position rebasing; called only when a tape was requested.
    std::function<void(std::span<const Vec> frames, std::span<const double> levels,
                       std::span<const CacheSlot> cache, std::span<const long> positions, int label)>
        on_input;
    std::function<void(long window_start, std::span<const long> frame_indices,
                       std::span<const int> level_indices, const std::vector<Vec>& clean,
                       Tape* tape)>
        on_output;
};

// (frame_index, label): switch the condition before the frame is emitted.
using ConditionScript = std::vector<std::pair<long, int>>;

/// Streaming generation with a rolling denoising window.
///
/// The window holds T frames at levels t_1..t_T ascending with frame index.
/// Every roll runs one joint denoising pass, emits the lowest-noise frame,
/// caches its KV state from a clean pass, re-noises the remaining
/// predictions one level down and appends a fresh noise frame.
class StreamingEngine {
public:
    StreamingEngine(const Denoiser& model, EngineConfig config);

    const EngineConfig& config() const { return config_; }
    const Denoiser& model() const { return model_; }
    int num_steps() const { return model_.schedule().num_steps(); }

    StreamState begin(int condition, std::uint64_t seed) const;
    // FIFO ramp: T - 1 joint passes bring frames 1..T-1 to levels t_1..t_{T-1}.
    void warmup(StreamState& state, const WindowObserver* observer = nullptr) const;
    StreamState start(int condition, std::uint64_t seed) const;

    Vec roll_step(StreamState& state, const WindowObserver* observer = nullptr) const;

    // Frame-by-frame denoising of the next frame from t_T down to
    // t_{exit_level}; the last prediction is emitted and cached.
    Vec sf_step(StreamState& state, int exit_level = 1, const WindowObserver* observer = nullptr) const;

    void switch_condition(StreamState& state, int label) const;

    std::vector<Vec> generate(long num_frames, int condition, std::uint64_t seed,
                              const ConditionScript& script = {}) const;
    std::vector<Vec> sf_generate(long num_frames, int condition, std::uint64_t seed,
                                 const ConditionScript& script = {}) const;

private:
    std::vector<Vec> run_window(StreamState& state, long window_start,
                                const WindowObserver* observer) const;
    void append_kv(StreamState& state, const Vec& clean) const;
    Vec noise(const StreamState& state, long frame_index, int level_index) const;
    void validate_label(int label) const;

    const Denoiser& model_;
    EngineConfig config_;
};

}  // namespace rollforge
