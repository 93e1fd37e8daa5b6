#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rollforge/nn.hpp"
#include "rollforge/schedule.hpp"
#include "rollforge/types.hpp"

namespace rollforge {

struct DenoiserConfig {
    int dim_model = 64;
    int num_layers = 4;
    int num_heads = 4;
    int frame_dim = 8;
    int num_regimes = 4;
    int mlp_hidden = 128;
    double rope_base = 10000.0;
    int max_relative_position = 64;
    int chunk_size = 1;
    int num_steps = 5;
    double shift = 5.0;
    Preconditioning precond;

    int head_dim() const { return dim_model / num_heads; }
    NoiseSchedule schedule() const { return NoiseSchedule(num_steps, shift); }
    void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Cached attention state of one clean frame. Keys are stored before the
// rotary transform so they can be re-positioned on every read.
struct KvEntry {
    long frame_index = 0;
    std::vector<Vec> keys_pre_rope;  // per layer, dim_model (heads concatenated)
    std::vector<Vec> values;         // per layer, dim_model
};

// A cached entry placed at the rotary position it should be read at.
struct CacheSlot {
    const KvEntry* entry = nullptr;
    long position = 0;
    bool sink = false;
};

class ParameterSet {
public:
    struct Param {
        std::string name;
        Mat value;
    };

    size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);

    Mat& operator[](size_t i) { return params_[i].value; }
    const Mat& operator[](size_t i) const { return params_[i].value; }
    size_t size() const { return params_.size(); }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }
    const Param* find(const std::string& name) const;

    ParameterSet zeros_like() const;
    void set_zero();
    void add_scaled(const ParameterSet& other, double scale);
    double squared_norm() const;
    size_t num_scalars() const;
    bool all_finite() const;

private:
    std::vector<Param> params_;
};

struct Token {
    Vec x;
    double level = 0.0;
    int label = 0;
    long position = 0;
};

// One forward pass: `tokens` attend to `cache` slots (no gradient) and to
// each other according to mask, whose shape is tokens x (cache + tokens).
struct ForwardRequest {
    std::vector<Token> tokens;
    std::vector<CacheSlot> cache;
    nn::Mask mask;
};

struct ForwardOutput {
    RowMat velocity;             // n x frame_dim
    RowMat clean;                // n x frame_dim, data prediction
    std::vector<RowMat> keys;    // per layer, n x dim_model, pre-rotation
    std::vector<RowMat> values;  // per layer, n x dim_model
};

// Activations recorded by a forward pass for the reverse pass.
class Tape {
public:
    bool recorded() const { return recorded_; }
    Eigen::Index tokens() const { return x_in.rows(); }
    void clear() { *this = Tape(); }

private:
    friend class Denoiser;
    struct Layer {
        RowMat mod;
        nn::LayerNormCache ln1;
        RowMat a1;
        nn::AttentionCache attn;
        RowMat attn_out;
        nn::LayerNormCache ln2;
        RowMat a2;
        RowMat pre_act;
        RowMat act;
    };
    bool recorded_ = false;
    std::vector<long> positions;
    std::vector<int> labels;
    std::vector<double> sigmas;
    Eigen::Index prefix = 0;
    RowMat x_in;
    RowMat level_emb;
    RowMat time_pre;
    RowMat time_hidden;
    RowMat cond;
    RowMat cond_act;
    std::vector<Layer> layers;
    RowMat mod_final;
    nn::LayerNormCache ln_final;
    RowMat final_in;
};

enum class WindowMask {
    bidirectional,  // all window frames see each other
    causal,         // frame r sees window frames <= r (frame-by-frame masking)
};

/// Velocity-parameterized transformer over frames.
///
/// Each frame is one token. The per-token conditioning is the sum of a
/// learned map of the sinusoidal shifted-level embedding and a learned
/// regime-label embedding; it enters additively at the input and through
/// shift/scale modulation of every layer norm. Output projections start at
/// zero, so an untrained network predicts v = 0 and returns x_hat = x_t.
class Denoiser {
public:
    explicit Denoiser(const DenoiserConfig& config, std::uint64_t seed = 0);
    Denoiser(const DenoiserConfig& config, ParameterSet params);

    const DenoiserConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const ParameterSet& params() const { return params_; }
    ParameterSet& params() { return params_; }

    ForwardOutput forward(const ForwardRequest& request, Tape* tape = nullptr) const;

    // Reverse pass for an adjoint on the velocity output; accumulates into grads.
    void backward(const Tape& tape, const RowMat& d_velocity, ParameterSet& grads) const;
    // Same, for an adjoint on the clean-data prediction.
    void backward_clean(const Tape& tape, const RowMat& d_clean, ParameterSet& grads) const;

    // Joint denoising of a window at strictly ascending levels; returns the
    // clean estimate of every window frame.
    std::vector<Vec> denoise_window(std::span<const Vec> frames, std::span<const double> levels,
                                    std::span<const CacheSlot> cache,
                                    std::span<const long> positions, int label,
                                    Tape* tape = nullptr,
                                    WindowMask mask = WindowMask::bidirectional) const;

    // KV-producing pass for a clean frame against the temporal context only.
    KvEntry encode_kv(const Vec& frame, std::span<const CacheSlot> temporal, long position,
                      long frame_index, int label, double level = 0.0) const;

    // Clean estimates for a window sharing one level, used as the fake score.
    std::vector<Vec> fake_score_x0(std::span<const Vec> frames, double level, int label,
                                   Tape* tape = nullptr,
                                   WindowMask mask = WindowMask::bidirectional) const;

private:
    struct Layout {
        size_t in_w, in_b, time_w1, time_b1, time_w2, time_b2, label_emb;
        struct Layer {
            size_t mod_w, mod_b, wq, wk, wv, wo, bo, w1, b1, w2, b2;
        };
        std::vector<Layer> layers;
        size_t final_mod_w, final_mod_b, out_w, out_b;
    };

    void build_layout();
    void initialize(std::uint64_t seed);
    void validate_request(const ForwardRequest& request) const;

    DenoiserConfig config_;
    NoiseSchedule schedule_;
    ParameterSet params_;
    Layout layout_{};
};

nn::Mask window_mask(Eigen::Index cache_size, Eigen::Index window_size, WindowMask mode);

}  // namespace rollforge
