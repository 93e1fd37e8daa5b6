#include "rollforge/kvcache.hpp"

#include <algorithm>
#include <string>

#include "rollforge/errors.hpp"

namespace rollforge {

void CacheConfig::validate() const {
    if (global_frames < 0 || temporal_frames < 0) throw DomainError("cache sizes must be non-negative");
    if (window_frames < 1) throw DomainError("window must hold at least one frame");
}

const char* to_string(SinkPlacement placement) {
    switch (placement) {
        case SinkPlacement::rebased: return "rebased";
        case SinkPlacement::fixed: return "fixed";
        case SinkPlacement::overlap: return "overlap";
        case SinkPlacement::in_window: return "in_window";
        case SinkPlacement::beyond: return "beyond";
    }
    return "unknown";
}

SinkPlacement sink_placement_from_string(const std::string& name) {
    for (auto p : {SinkPlacement::rebased, SinkPlacement::fixed, SinkPlacement::overlap,
                   SinkPlacement::in_window, SinkPlacement::beyond}) {
        if (name == to_string(p)) return p;
    }
    throw DomainError("unknown sink placement '" + name + "'");
}

std::vector<long> sink_positions(const CacheConfig& config, SinkPlacement placement, long window_start,
                                 int num_sink) {
    const long i = window_start;
    long first = 0;
    switch (placement) {
        case SinkPlacement::rebased: first = i - config.temporal_frames - config.global_frames; break;
        case SinkPlacement::fixed: first = 0; break;
        case SinkPlacement::overlap: first = i - config.global_frames; break;
        case SinkPlacement::in_window: first = i; break;
        case SinkPlacement::beyond: first = i + config.window_frames; break;
    }
    std::vector<long> out(static_cast<size_t>(num_sink));
    for (int s = 0; s < num_sink; ++s) out[static_cast<size_t>(s)] = first + s;
    return out;
}

KvCache::KvCache(const CacheConfig& config) : config_(config) { config_.validate(); }

void KvCache::append(KvEntry entry) {
    if (entry.frame_index != next_frame_index_) {
        throw ContractError("cache append out of order: got frame " + std::to_string(entry.frame_index) +
                            ", expected " + std::to_string(next_frame_index_));
    }
    ++next_frame_index_;
    if (entry.frame_index <= config_.global_frames) {
        sink_.push_back(std::move(entry));
        return;
    }
    if (config_.temporal_frames == 0) return;
    if (static_cast<int>(temporal_.size()) == config_.temporal_frames) temporal_.pop_front();
    temporal_.push_back(std::move(entry));
}

std::vector<CacheSlot> KvCache::view(long window_start, SinkPlacement placement) const {
    if (window_start != next_frame_index_) {
        throw ContractError("cache view requested for window " + std::to_string(window_start) +
                            " but next frame is " + std::to_string(next_frame_index_));
    }
    std::vector<CacheSlot> slots;
    slots.reserve(size());
    const auto sink_pos = sink_positions(config_, placement, window_start, static_cast<int>(sink_.size()));
    for (size_t s = 0; s < sink_.size(); ++s) slots.push_back({&sink_[s], sink_pos[s], true});
    for (const auto& e : temporal_) slots.push_back({&e, e.frame_index, false});
    return slots;
}

std::vector<CacheSlot> KvCache::temporal_view(long position) const {
    std::vector<CacheSlot> slots;
    slots.reserve(temporal_.size());
    const long first = position - static_cast<long>(temporal_.size());
    long k = 0;
    for (const auto& e : temporal_) slots.push_back({&e, first + k++, false});
    return slots;
}

long rebase_positions(std::vector<CacheSlot>& slots, std::vector<long>& window_positions) {
    long lo = window_positions.empty() ? 0 : window_positions.front();
    for (long p : window_positions) lo = std::min(lo, p);
    for (const auto& s : slots) lo = std::min(lo, s.position);
    for (auto& s : slots) s.position -= lo;
    for (auto& p : window_positions) p -= lo;
    return lo;
}

}  // namespace rollforge
