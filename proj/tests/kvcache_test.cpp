#include <random>

#include "doctest.h"
#include "rollforge/errors.hpp"
#include "rollforge/kvcache.hpp"
#include "test_util.hpp"

using namespace rollforge;
using namespace rollforge::test;

namespace {

KvEntry entry(long index) {
    KvEntry e;
    e.frame_index = index;
    return e;
}

KvEntry filled(long index, const KvEntry& like) {
    KvEntry e = like;
    e.frame_index = index;
    return e;
}

std::vector<long> indices(const std::deque<KvEntry>& d) {
    std::vector<long> out;
    for (const auto& e : d) out.push_back(e.frame_index);
    return out;
}

std::vector<long> positions(const std::vector<CacheSlot>& slots) {
    std::vector<long> out;
    for (const auto& s : slots) out.push_back(s.position);
    return out;
}

}  // namespace

TEST_CASE("append and eviction") {
    KvCache c(CacheConfig{1, 1, 5});
    c.append(entry(1));
    CHECK(indices(c.sink()) == std::vector<long>{1});
    CHECK(c.temporal().empty());
    for (long i = 2; i <= 4; ++i) c.append(entry(i));
    CHECK(indices(c.temporal()) == std::vector<long>{4});
    c.append(entry(5));
    CHECK(indices(c.sink()) == std::vector<long>{1});
    CHECK(indices(c.temporal()) == std::vector<long>{5});
    CHECK(c.next_frame_index() == 6);
    CHECK_THROWS_AS(c.append(entry(7)), ContractError);
    CHECK_THROWS_AS(c.append(entry(5)), ContractError);

    KvCache fifo(CacheConfig{2, 3, 5});
    for (long i = 1; i <= 9; ++i) fifo.append(entry(i));
    CHECK(indices(fifo.sink()) == std::vector<long>{1, 2});
    CHECK(indices(fifo.temporal()) == std::vector<long>{7, 8, 9});
}

TEST_CASE("memory stays bounded over long streams") {
    for (auto cfg : {CacheConfig{1, 1, 5}, CacheConfig{3, 3, 5}, CacheConfig{0, 2, 5}, CacheConfig{2, 0, 5}}) {
        KvCache c(cfg);
        size_t peak = 0;
        bool sink_ok = true;
        for (long i = 1; i <= 100000; ++i) {
            c.append(entry(i));
            peak = std::max(peak, c.size());
            sink_ok = sink_ok && c.sink().size() <= static_cast<size_t>(cfg.global_frames);
        }
        CHECK(sink_ok);
        CHECK(peak <= static_cast<size_t>(cfg.global_frames + cfg.temporal_frames));
        if (cfg.temporal_frames > 0) CHECK(c.temporal().back().frame_index == 100000);
        // consecutive, ending at next - 1
        long expect = 100000 - static_cast<long>(c.temporal().size()) + 1;
        for (const auto& e : c.temporal()) CHECK(e.frame_index == expect++);
        for (long k = 1; k <= static_cast<long>(c.sink().size()); ++k) CHECK(c.sink()[k - 1].frame_index == k);
    }
}

TEST_CASE("view positions") {
    KvCache c(CacheConfig{3, 3, 5});
    CHECK(c.view(1).empty());
    for (long i = 1; i <= 99; ++i) c.append(entry(i));
    const auto v = c.view(100);
    CHECK(positions(v) == std::vector<long>{94, 95, 96, 97, 98, 99});
    CHECK(v[0].sink);
    CHECK_FALSE(v[3].sink);
    CHECK_THROWS_AS(c.view(101), ContractError);

    KvCache d(CacheConfig{1, 1, 5});
    for (long i = 1; i <= 500; ++i) {
        if (i > 2) {
            const auto w = d.view(i);
            CHECK(i - w.front().position == 2);  // L_tem + 1
        }
        d.append(entry(i));
    }
}

TEST_CASE("placement options") {
    const CacheConfig cfg{3, 3, 5};
    CHECK(sink_positions(cfg, SinkPlacement::fixed, 1000, 3) == std::vector<long>{0, 1, 2});
    CHECK(sink_positions(cfg, SinkPlacement::overlap, 10, 3) == std::vector<long>{7, 8, 9});
    CHECK(sink_positions(cfg, SinkPlacement::in_window, 10, 3) == std::vector<long>{10, 11, 12});
    CHECK(sink_positions(cfg, SinkPlacement::beyond, 10, 3) == std::vector<long>{15, 16, 17});
    for (long i : {10L, 1000L, 123456L}) {
        const auto p = sink_positions(cfg, SinkPlacement::rebased, i, 3);
        CHECK(i + cfg.window_frames - 1 - p.front() == cfg.bidirectional_frames() - 1);
    }
    const long fixed_offset = 1000 + cfg.window_frames - 1 - 0;
    CHECK(fixed_offset > DenoiserConfig{}.max_relative_position);
    for (auto p : {SinkPlacement::rebased, SinkPlacement::fixed, SinkPlacement::overlap, SinkPlacement::in_window,
                   SinkPlacement::beyond}) {
        CHECK(sink_placement_from_string(to_string(p)) == p);
    }
    CHECK_THROWS_AS(sink_placement_from_string("nowhere"), DomainError);
}

TEST_CASE("rebase subtracts a common offset") {
    KvEntry a = entry(1), b = entry(2);
    std::vector<CacheSlot> slots{{&a, 40, true}, {&b, 41, false}};
    std::vector<long> win{42, 43};
    CHECK(rebase_positions(slots, win) == 40);
    CHECK(positions(slots) == std::vector<long>{0, 1});
    CHECK(win == std::vector<long>{2, 3});
}

TEST_CASE("rebased outputs do not depend on stream position") {
    const DenoiserConfig mc = small_config();
    Denoiser model(mc, 1);
    randomize(model.params(), 21);
    std::mt19937_64 rng(22);
    KvEntry sink_content, temporal_content;
    for (int l = 0; l < mc.num_layers; ++l) {
        sink_content.keys_pre_rope.push_back(standard_normal(rng, mc.dim_model));
        sink_content.values.push_back(standard_normal(rng, mc.dim_model));
        temporal_content.keys_pre_rope.push_back(standard_normal(rng, mc.dim_model));
        temporal_content.values.push_back(standard_normal(rng, mc.dim_model));
    }
    const auto frames = random_frames(rng, 5, mc.frame_dim);
    const double levels[] = {200, 400, 600, 800, 1000};

    auto run = [&](long start, bool rebase) {
        KvCache c(CacheConfig{1, 1, 5});
        c.append(filled(1, sink_content));
        for (long i = 2; i < start; ++i) c.append(filled(i, temporal_content));
        auto slots = c.view(start);
        std::vector<long> pos;
        for (long k = 0; k < 5; ++k) pos.push_back(start + k);
        if (rebase) rebase_positions(slots, pos);
        return model.denoise_window(frames, levels, slots, pos, 0);
    };
    const auto a = run(100, true);
    const auto b = run(100000, true);
    double worst = 0.0;
    for (int k = 0; k < 5; ++k) worst = std::max(worst, (a[k] - b[k]).cwiseAbs().maxCoeff());
    CHECK(worst <= 1e-6);
    // RoPE is relative, so even unrebased positions agree up to rounding of large angles.
    const auto c = run(100000, false);
    for (int k = 0; k < 5; ++k) CHECK((a[k] - c[k]).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("no sink is a sliding window") {
    KvCache c(CacheConfig{0, 2, 5});
    for (long i = 1; i <= 50; ++i) {
        const auto v = c.view(i);
        CHECK(v.size() == static_cast<size_t>(std::min<long>(i - 1, 2)));
        for (size_t k = 0; k < v.size(); ++k) {
            CHECK_FALSE(v[k].sink);
            CHECK(v[k].entry->frame_index == i - static_cast<long>(v.size()) + static_cast<long>(k));
        }
        c.append(entry(i));
    }
    CHECK(c.sink().empty());
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS(KvCache(CacheConfig{-1, 1, 5}), DomainError);
    CHECK_THROWS_AS(KvCache(CacheConfig{1, 1, 0}), DomainError);
    CHECK(CacheConfig{3, 3, 15}.bidirectional_frames() == 21);
}
