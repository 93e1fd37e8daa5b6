#include <filesystem>
#include <random>

#include "doctest.h"
#include "rollforge/checkpoint.hpp"
#include "rollforge/denoiser.hpp"
#include "rollforge/errors.hpp"
#include "test_util.hpp"

using namespace rollforge;
using namespace rollforge::test;

namespace {

KvEntry random_entry(std::mt19937_64& rng, const DenoiserConfig& c, long index) {
    KvEntry e;
    e.frame_index = index;
    for (int l = 0; l < c.num_layers; ++l) {
        e.keys_pre_rope.push_back(standard_normal(rng, c.dim_model));
        e.values.push_back(standard_normal(rng, c.dim_model));
    }
    return e;
}

struct Fixture {
    DenoiserConfig config = small_config();
    Denoiser model{config, 1};
    std::vector<KvEntry> entries;
    ForwardRequest request;
    RowMat adjoint;

    explicit Fixture(WindowMask mode = WindowMask::bidirectional) {
        randomize(model.params(), 2);
        std::mt19937_64 rng(3);
        for (long i = 1; i <= 3; ++i) entries.push_back(random_entry(rng, config, i));
        request.cache = {{&entries[0], 0, true}, {&entries[1], 1, false}, {&entries[2], 2, false}};
        const double levels[] = {200, 400, 600, 800};
        for (int i = 0; i < 4; ++i) {
            request.tokens.push_back({standard_normal(rng, config.frame_dim), levels[i], i % 2, 3 + i});
        }
        request.mask = window_mask(3, 4, mode);
        request.mask(1, 0) = false;  // exercise a masked cache key
        adjoint = random_rowmat(rng, 4, config.frame_dim);
    }

    double loss(bool clean) const {
        const auto out = model.forward(request);
        return ((clean ? out.clean : out.velocity).array() * adjoint.array()).sum();
    }
};

// Relative error of reverse-mode against central differences over sampled entries of every tensor.
void check_gradients(Fixture& f, bool clean) {
    Tape tape;
    f.model.forward(f.request, &tape);
    ParameterSet grads = f.model.params().zeros_like();
    if (clean) {
        f.model.backward_clean(tape, f.adjoint, grads);
    } else {
        f.model.backward(tape, f.adjoint, grads);
    }
    std::mt19937_64 rng(99);
    const double h = 1e-5;
    for (size_t p = 0; p < f.model.params().size(); ++p) {
        Mat& w = f.model.params()[p];
        std::uniform_int_distribution<Eigen::Index> pick(0, w.size() - 1);
        double num = 0, den = 0;
        for (int s = 0; s < 10; ++s) {
            const Eigen::Index i = pick(rng);
            const double keep = w.data()[i];
            w.data()[i] = keep + h;
            const double lp = f.loss(clean);
            w.data()[i] = keep - h;
            const double lm = f.loss(clean);
            w.data()[i] = keep;
            const double fd = (lp - lm) / (2 * h);
            num += std::pow(fd - grads[p].data()[i], 2);
            den += fd * fd;
        }
        INFO(f.model.params().params()[p].name);
        CHECK(std::sqrt(num) <= 1e-3 * std::sqrt(den) + 1e-10);
    }
}

}  // namespace

TEST_CASE("config validation") {
    DenoiserConfig c;
    c.validate();
    c.dim_model = 66;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = DenoiserConfig{};
    c.num_layers = 0;
    CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("reverse pass matches finite differences on every tensor") {
    SUBCASE("velocity adjoint, bidirectional window") {
        Fixture f;
        check_gradients(f, false);
    }
    SUBCASE("clean adjoint, causal window") {
        Fixture f(WindowMask::causal);
        check_gradients(f, true);
    }
}

TEST_CASE("gradient edge cases") {
    Fixture f;
    Tape tape;
    ParameterSet grads = f.model.params().zeros_like();
    CHECK_THROWS_AS(f.model.backward(tape, f.adjoint, grads), ContractError);
    f.model.forward(f.request, &tape);
    f.model.backward(tape, RowMat::Zero(4, f.config.frame_dim), grads);
    CHECK(grads.squared_norm() == 0.0);
    // d/d(output bias) of the summed velocity is the token count per output.
    f.model.backward(tape, RowMat::Ones(4, f.config.frame_dim), grads);
    const Mat& db = grads[grads.size() - 1];
    REQUIRE(f.model.params().params().back().name == "output.bias");
    CHECK((db - Mat::Constant(f.config.frame_dim, 1, 4.0)).norm() < 1e-12);
}

TEST_CASE("untrained network is the identity on x_t") {
    const Denoiser model(DenoiserConfig{}, 5);
    std::mt19937_64 rng(6);
    const auto frames = random_frames(rng, 5, 8);
    const double levels[] = {200, 400, 600, 800, 1000};
    const long pos[] = {0, 1, 2, 3, 4};
    const auto clean = model.denoise_window(frames, levels, {}, pos, 0);
    for (int i = 0; i < 5; ++i) CHECK(clean[i] == frames[i]);
    const auto fake = model.fake_score_x0(frames, 300.0, 1);
    for (int i = 0; i < 5; ++i) CHECK(fake[i] == frames[i]);
}

TEST_CASE("denoise_window contracts") {
    DenoiserConfig c = small_config();
    Denoiser model(c, 1);
    randomize(model.params(), 7);
    std::mt19937_64 rng(8);
    const auto frames = random_frames(rng, 5, c.frame_dim);
    const double levels[] = {200, 400, 600, 800, 1000};
    const long pos[] = {3, 4, 5, 6, 7};

    SUBCASE("empty cache is valid") { CHECK(model.denoise_window(frames, levels, {}, pos, 0).size() == 5); }
    SUBCASE("precondition errors") {
        const double bad_levels[] = {200, 400, 400, 800, 1000};
        CHECK_THROWS_AS(model.denoise_window(frames, bad_levels, {}, pos, 0), ContractError);
        const long gap[] = {3, 4, 6, 7, 8};
        CHECK_THROWS_AS(model.denoise_window(frames, levels, {}, gap, 0), ContractError);
        const KvEntry e = random_entry(rng, c, 1);
        const CacheSlot late[] = {{&e, 3, false}};
        CHECK_THROWS_AS(model.denoise_window(frames, levels, late, pos, 0), ContractError);
        CHECK_THROWS_AS(model.denoise_window(frames, levels, {}, pos, 4), DomainError);
    }
    SUBCASE("window bidirectional, frame-by-frame mask causal") {
        auto moved = frames;
        moved[4][0] += 1.0;
        const auto a = model.denoise_window(frames, levels, {}, pos, 0);
        const auto b = model.denoise_window(moved, levels, {}, pos, 0);
        CHECK((a[0] - b[0]).norm() > 1e-6);
        auto moved2 = frames;
        moved2[2][1] -= 2.0;
        const auto ca = model.denoise_window(frames, levels, {}, pos, 0, nullptr, WindowMask::causal);
        const auto cb = model.denoise_window(moved2, levels, {}, pos, 0, nullptr, WindowMask::causal);
        CHECK(ca[0] == cb[0]);
        CHECK(ca[1] == cb[1]);
        CHECK((ca[2] - cb[2]).norm() > 1e-6);
    }
    SUBCASE("joint permutation of frames, levels and positions permutes outputs") {
        ForwardRequest req;
        for (int i = 0; i < 5; ++i) req.tokens.push_back({frames[i], levels[i], 0, pos[i]});
        req.mask = window_mask(0, 5, WindowMask::bidirectional);
        const auto a = model.forward(req);
        std::swap(req.tokens[1], req.tokens[3]);
        const auto b = model.forward(req);
        CHECK((a.clean.row(1) - b.clean.row(3)).norm() < 1e-12);
        CHECK((a.clean.row(3) - b.clean.row(1)).norm() < 1e-12);
        CHECK((a.clean.row(0) - b.clean.row(0)).norm() < 1e-12);
    }
    SUBCASE("labels change the output") {
        const auto a = model.denoise_window(frames, levels, {}, pos, 0);
        const auto b = model.denoise_window(frames, levels, {}, pos, 1);
        CHECK((a[2] - b[2]).norm() > 1e-6);
    }
}

TEST_CASE("encode_kv") {
    DenoiserConfig c = small_config();
    Denoiser model(c, 1);
    randomize(model.params(), 9);
    std::mt19937_64 rng(10);
    const Vec x = standard_normal(rng, c.frame_dim);
    const KvEntry first = model.encode_kv(x, {}, 0, 1, 0);
    REQUIRE(first.keys_pre_rope.size() == static_cast<size_t>(c.num_layers));
    CHECK(first.keys_pre_rope[0].size() == c.dim_model);
    CHECK(first.values[1].size() == c.dim_model);

    const KvEntry prev = random_entry(rng, c, 4);
    const CacheSlot near[] = {{&prev, 9, false}};
    const CacheSlot far[] = {{&prev, 9999, false}};
    const KvEntry a = model.encode_kv(x, near, 10, 5, 0);
    const KvEntry b = model.encode_kv(x, far, 10000, 5, 0);
    for (int l = 0; l < c.num_layers; ++l) {
        CHECK((a.keys_pre_rope[l] - b.keys_pre_rope[l]).norm() < 1e-9);
        CHECK((a.values[l] - b.values[l]).norm() < 1e-9);
    }
    const CacheSlot sink[] = {{&prev, 9, true}};
    CHECK_THROWS_AS(model.encode_kv(x, sink, 10, 5, 0), ContractError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Checkpoint ck;
    ck.config = small_config();
    Denoiser model(ck.config, 3);
    randomize(model.params(), 4);
    ck.params = model.params();
    round_to_f32(ck.params);
    ck.pretrained = true;
    const auto dir = std::filesystem::temp_directory_path() / "rollforge_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, ck);
    const Checkpoint back = load_checkpoint(dir);
    CHECK(back.pretrained);
    CHECK(back.config.dim_model == ck.config.dim_model);
    REQUIRE(back.params.size() == ck.params.size());
    for (size_t i = 0; i < ck.params.size(); ++i) CHECK(back.params[i] == ck.params[i]);
    std::filesystem::remove_all(dir);
    CHECK_THROWS(load_checkpoint(dir));
}
