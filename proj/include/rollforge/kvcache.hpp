#pragma once

#include <deque>
#include <vector>

#include "rollforge/denoiser.hpp"

namespace rollforge {

// Sizes are in frames (one toy frame per chunk).
struct CacheConfig {
    int global_frames = 1;    // attention-sink frames kept forever
    int temporal_frames = 1;  // most recent emitted frames
    int window_frames = 5;    // rolling denoising window, equals the step count

    int bidirectional_frames() const { return global_frames + temporal_frames + window_frames; }
    void validate() const;
};

// Where the sink entries are placed relative to a window starting at i.
enum class SinkPlacement {
    rebased,    // i - L_tem - L_glo .. i - L_tem - 1, directly before the temporal context
    fixed,      // 0 .. L_glo - 1, never moved
    overlap,    // i - L_glo .. i - 1, on top of the temporal context
    in_window,  // i .. i + L_glo - 1, inside the denoising window
    beyond,     // i + T .. i + T + L_glo - 1, after the denoising window
};

const char* to_string(SinkPlacement placement);
SinkPlacement sink_placement_from_string(const std::string& name);

// Positions the given placement assigns to `num_sink` sink frames.
std::vector<long> sink_positions(const CacheConfig& config, SinkPlacement placement, long window_start,
                                 int num_sink);

/// Attention-sink KV cache for one stream.
///
/// Frames 1..L_glo are pinned as the global context; later frames pass
/// through a FIFO of at most L_tem entries. Memory is bounded by
/// L_glo + L_tem entries regardless of stream length.
class KvCache {
public:
    explicit KvCache(const CacheConfig& config = {});

    const CacheConfig& config() const { return config_; }
    long next_frame_index() const { return next_frame_index_; }
    const std::deque<KvEntry>& sink() const { return sink_; }
    const std::deque<KvEntry>& temporal() const { return temporal_; }
    size_t size() const { return sink_.size() + temporal_.size(); }

    void append(KvEntry entry);

    // Slots for a window starting at `window_start` (must equal next_frame_index):
    // sink entries first, then temporal entries at i - L_tem .. i - 1.
    std::vector<CacheSlot> view(long window_start,
                                SinkPlacement placement = SinkPlacement::rebased) const;
    // Temporal entries only, positioned directly before `position`.
    std::vector<CacheSlot> temporal_view(long position) const;

private:
    CacheConfig config_;
    std::deque<KvEntry> sink_;
    std::deque<KvEntry> temporal_;
    long next_frame_index_ = 1;
};

// Shifts every slot and window position by the same offset so the leftmost
// position is 0. Returns the offset subtracted.
long rebase_positions(std::vector<CacheSlot>& slots, std::vector<long>& window_positions);

}  // namespace rollforge
