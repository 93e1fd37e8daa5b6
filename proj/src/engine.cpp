#include "rollforge/engine.hpp"

#include <string>

#include "rollforge/errors.hpp"

namespace rollforge {

StreamingEngine::StreamingEngine(const Denoiser& model, EngineConfig config)
    : model_(model), config_(config) {
    config_.cache.validate();
    if (config_.cache.window_frames != num_steps()) {
        throw DomainError("window length " + std::to_string(config_.cache.window_frames) +
                          " must equal the number of denoising steps " + std::to_string(num_steps()));
    }
}

void StreamingEngine::validate_label(int label) const {
    if (label < 0 || label >= model_.config().num_regimes) {
        throw DomainError("unknown condition label " + std::to_string(label));
    }
}

StreamState StreamingEngine::begin(int condition, std::uint64_t seed) const {
    validate_label(condition);
    StreamState s;
    s.cache = KvCache(config_.cache);
    s.condition = condition;
    s.seed = seed;
    return s;
}

Vec StreamingEngine::noise(const StreamState& state, long frame_index, int level_index) const {
    return KeyedNoise(state.seed).normal(model_.config().frame_dim, {frame_index, level_index});
}

std::vector<Vec> StreamingEngine::run_window(StreamState& state, long window_start,
                                             const WindowObserver* observer) const {
    const auto& sched = model_.schedule();
    const size_t w = state.window.size();
    std::vector<Vec> frames(w);
    std::vector<double> levels(w);
    std::vector<int> level_idx(w);
    std::vector<long> frame_idx(w);
    std::vector<long> positions(w);
    for (size_t k = 0; k < w; ++k) {
        const auto& f = state.window[k];
        frames[k] = f.x;
        level_idx[k] = f.level_index;
        levels[k] = sched.level(f.level_index);
        frame_idx[k] = f.frame_index;
        positions[k] = f.frame_index;
    }
    // While the window still contains frame 1 the cache is empty by construction.
    std::vector<CacheSlot> slots = state.cache.view(frame_idx.front(), config_.placement);
    if (config_.rebase_positions) rebase_positions(slots, positions);
    Tape* tape = (observer != nullptr && observer->tape_for) ? observer->tape_for(window_start, level_idx.front()) : nullptr;
    if (tape != nullptr && observer->on_input) observer->on_input(frames, levels, slots, positions, state.condition);
    std::vector<Vec> clean =
        model_.denoise_window(frames, levels, slots, positions, state.condition, tape);
    ++state.denoise_passes;
    if (observer != nullptr && observer->on_output) {
        observer->on_output(window_start, frame_idx, level_idx, clean, tape);
    }
    return clean;
}

void StreamingEngine::append_kv(StreamState& state, const Vec& clean) const {
    const long frame_index = state.cache.next_frame_index();
    std::vector<CacheSlot> slots = state.cache.temporal_view(frame_index);
    std::vector<long> pos{frame_index};
    if (config_.rebase_positions) rebase_positions(slots, pos);
    state.cache.append(model_.encode_kv(clean, slots, pos.front(), frame_index, state.condition));
    ++state.kv_passes;
}

void StreamingEngine::warmup(StreamState& state, const WindowObserver* observer) const {
    if (state.phase != StreamPhase::warmup || state.frames_emitted != 0) {
        throw StateError("warm-up already completed");
    }
    const int T = num_steps();
    const auto& sched = model_.schedule();
    for (int s = 1; s <= T - 1; ++s) {
        state.window.push_back({noise(state, s, T), T, s});
        for (size_t k = 0; k < state.window.size(); ++k) {
            state.window[k].level_index = T - s + static_cast<int>(k) + 1;
        }
        const std::vector<Vec> clean = run_window(state, s - T + 1, observer);
        for (size_t k = 0; k < state.window.size(); ++k) {
            auto& f = state.window[k];
            const int next = f.level_index - 1;
            f.x = sched.forward_diffuse(clean[k], sched.level(next), noise(state, f.frame_index, next));
            f.level_index = next;
        }
    }
    state.phase = StreamPhase::steady;
}

StreamState StreamingEngine::start(int condition, std::uint64_t seed) const {
    StreamState s = begin(condition, seed);
    warmup(s);
    return s;
}

Vec StreamingEngine::roll_step(StreamState& state, const WindowObserver* observer) const {
    if (state.phase != StreamPhase::steady) throw StateError("roll_step called before warm-up completed");
    const int T = num_steps();
    const auto& sched = model_.schedule();
    const long i = state.window_start();
    const long fresh = i + T - 1;
    state.window.push_back({noise(state, fresh, T), T, fresh});
    for (int m = 0; m < T; ++m) {
        if (state.window[static_cast<size_t>(m)].level_index != m + 1 ||
            state.window[static_cast<size_t>(m)].frame_index != i + m) {
            throw StateError("rolling window lost its level ladder");
        }
    }
    const std::vector<Vec> clean = run_window(state, i, observer);
    Vec emitted = clean.front();
    append_kv(state, emitted);
    state.window.pop_front();
    for (int m = 1; m < T; ++m) {
        auto& f = state.window[static_cast<size_t>(m - 1)];
        f.x = sched.forward_diffuse(clean[static_cast<size_t>(m)], sched.level(m),
                                    noise(state, f.frame_index, m));
        f.level_index = m;
    }
    ++state.frames_emitted;
    return emitted;
}

Vec StreamingEngine::sf_step(StreamState& state, int exit_level, const WindowObserver* observer) const {
    const int T = num_steps();
    if (exit_level < 1 || exit_level > T) throw DomainError("exit level must lie in [1, T]");
    if (!state.window.empty()) throw StateError("frame-by-frame step on a rolling stream");
    const auto& sched = model_.schedule();
    const long i = state.window_start();
    state.window.push_back({noise(state, i, T), T, i});
    Vec clean;
    for (int j = T; j >= exit_level; --j) {
        state.window.front().level_index = j;
        clean = run_window(state, i, observer).front();
        if (j > exit_level) {
            state.window.front().x = sched.forward_diffuse(clean, sched.level(j - 1), noise(state, i, j - 1));
        }
    }
    state.window.clear();
    append_kv(state, clean);
    ++state.frames_emitted;
    state.phase = StreamPhase::steady;
    return clean;
}

void StreamingEngine::switch_condition(StreamState& state, int label) const {
    if (state.phase != StreamPhase::steady) throw StateError("condition switch requires a steady stream");
    validate_label(label);
    state.condition = label;
}

namespace {

void apply_script(const StreamingEngine& engine, StreamState& state, const ConditionScript& script) {
    const long next = state.frames_emitted + 1;
    for (const auto& [frame, label] : script) {
        if (frame == next) engine.switch_condition(state, label);
    }
}

}  // namespace

std::vector<Vec> StreamingEngine::generate(long num_frames, int condition, std::uint64_t seed,
                                           const ConditionScript& script) const {
    StreamState s = start(condition, seed);
    std::vector<Vec> out;
    out.reserve(static_cast<size_t>(num_frames));
    for (long n = 0; n < num_frames; ++n) {
        apply_script(*this, s, script);
        out.push_back(roll_step(s));
    }
    return out;
}

std::vector<Vec> StreamingEngine::sf_generate(long num_frames, int condition, std::uint64_t seed,
                                              const ConditionScript& script) const {
    StreamState s = begin(condition, seed);
    s.phase = StreamPhase::steady;
    std::vector<Vec> out;
    out.reserve(static_cast<size_t>(num_frames));
    for (long n = 0; n < num_frames; ++n) {
        apply_script(*this, s, script);
        out.push_back(sf_step(s));
    }
    return out;
}

}  // namespace rollforge
