#include "rollforge/denoiser.hpp"

#include <cmath>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "rollforge/errors.hpp"

namespace rollforge {

void DenoiserConfig::validate() const {
    if (dim_model <= 0 || num_layers <= 0 || num_heads <= 0 || frame_dim <= 0 ||
        num_regimes <= 0 || mlp_hidden <= 0 || chunk_size <= 0 || num_steps <= 0) {
        throw DomainError("denoiser config values must be positive");
    }
    if (dim_model % (2 * num_heads) != 0) {
        throw DomainError("dim_model must be divisible by 2 * num_heads");
    }
    if (!(rope_base > 0.0) || !(shift > 0.0)) throw DomainError("rope_base and shift must be positive");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = {{"dim_model", c.dim_model},
         {"num_layers", c.num_layers},
         {"num_heads", c.num_heads},
         {"frame_dim", c.frame_dim},
         {"num_regimes", c.num_regimes},
         {"mlp_hidden", c.mlp_hidden},
         {"rope_base", c.rope_base},
         {"max_relative_position", c.max_relative_position},
         {"chunk_size", c.chunk_size},
         {"num_steps", c.num_steps},
         {"shift", c.shift},
         {"c_skip", c.precond.c_skip},
         {"c_in", c.precond.c_in},
         {"c_out", c.precond.c_out}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    c = DenoiserConfig{};
    c.dim_model = j.value("dim_model", c.dim_model);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.frame_dim = j.value("frame_dim", c.frame_dim);
    c.num_regimes = j.value("num_regimes", c.num_regimes);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.max_relative_position = j.value("max_relative_position", c.max_relative_position);
    c.chunk_size = j.value("chunk_size", c.chunk_size);
    c.num_steps = j.value("num_steps", c.num_steps);
    c.shift = j.value("shift", c.shift);
    c.precond.c_skip = j.value("c_skip", c.precond.c_skip);
    c.precond.c_in = j.value("c_in", c.precond.c_in);
    c.precond.c_out = j.value("c_out", c.precond.c_out);
}

size_t ParameterSet::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    params_.push_back({std::move(name), Mat::Zero(rows, cols)});
    return params_.size() - 1;
}

const ParameterSet::Param* ParameterSet::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

ParameterSet ParameterSet::zeros_like() const {
    ParameterSet out;
    for (const auto& p : params_) out.add(p.name, p.value.rows(), p.value.cols());
    return out;
}

void ParameterSet::set_zero() {
    for (auto& p : params_) p.value.setZero();
}

void ParameterSet::add_scaled(const ParameterSet& other, double scale) {
    if (other.size() != size()) throw ContractError("parameter set layout mismatch");
    for (size_t i = 0; i < size(); ++i) params_[i].value += scale * other.params_[i].value;
}

double ParameterSet::squared_norm() const {
    double s = 0.0;
    for (const auto& p : params_) s += p.value.squaredNorm();
    return s;
}

size_t ParameterSet::num_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p.value.size());
    return n;
}

bool ParameterSet::all_finite() const {
    for (const auto& p : params_) {
        if (!p.value.allFinite()) return false;
    }
    return true;
}

nn::Mask window_mask(Eigen::Index cache_size, Eigen::Index window_size, WindowMask mode) {
    nn::Mask mask = nn::Mask::Constant(window_size, cache_size + window_size, true);
    if (mode == WindowMask::causal) {
        for (Eigen::Index r = 0; r < window_size; ++r) {
            for (Eigen::Index c = r + 1; c < window_size; ++c) mask(r, cache_size + c) = false;
        }
    }
    return mask;
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed)
    : config_(config), schedule_(config.schedule()) {
    config_.validate();
    build_layout();
    initialize(seed);
}

Denoiser::Denoiser(const DenoiserConfig& config, ParameterSet params)
    : config_(config), schedule_(config.schedule()) {
    config_.validate();
    build_layout();
    if (params.size() != params_.size()) throw ContractError("parameter count does not match config");
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto& want = params_.params()[i];
        const auto& got = params.params()[i];
        if (want.name != got.name || want.value.rows() != got.value.rows() ||
            want.value.cols() != got.value.cols()) {
            throw ContractError("parameter '" + got.name + "' does not match layout entry '" +
                                want.name + "'");
        }
    }
    params_ = std::move(params);
}

void Denoiser::build_layout() {
    const int dm = config_.dim_model;
    auto& p = params_;
    layout_.in_w = p.add("input.weight", config_.frame_dim, dm);
    layout_.in_b = p.add("input.bias", dm, 1);
    layout_.time_w1 = p.add("level.fc1.weight", dm, dm);
    layout_.time_b1 = p.add("level.fc1.bias", dm, 1);
    layout_.time_w2 = p.add("level.fc2.weight", dm, dm);
    layout_.time_b2 = p.add("level.fc2.bias", dm, 1);
    layout_.label_emb = p.add("label.embedding", config_.num_regimes, dm);
    layout_.layers.clear();
    for (int l = 0; l < config_.num_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        Layout::Layer L{};
        L.mod_w = p.add(pre + "modulation.weight", dm, 4 * dm);
        L.mod_b = p.add(pre + "modulation.bias", 4 * dm, 1);
        L.wq = p.add(pre + "attn.q.weight", dm, dm);
        L.wk = p.add(pre + "attn.k.weight", dm, dm);
        L.wv = p.add(pre + "attn.v.weight", dm, dm);
        L.wo = p.add(pre + "attn.out.weight", dm, dm);
        L.bo = p.add(pre + "attn.out.bias", dm, 1);
        L.w1 = p.add(pre + "mlp.fc1.weight", dm, config_.mlp_hidden);
        L.b1 = p.add(pre + "mlp.fc1.bias", config_.mlp_hidden, 1);
        L.w2 = p.add(pre + "mlp.fc2.weight", config_.mlp_hidden, dm);
        L.b2 = p.add(pre + "mlp.fc2.bias", dm, 1);
        layout_.layers.push_back(L);
    }
    layout_.final_mod_w = p.add("final.modulation.weight", dm, 2 * dm);
    layout_.final_mod_b = p.add("final.modulation.bias", 2 * dm, 1);
    layout_.out_w = p.add("output.weight", dm, config_.frame_dim);
    layout_.out_b = p.add("output.bias", config_.frame_dim, 1);
}

void Denoiser::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto fill = [&](size_t idx, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        Mat& m = params_[idx];
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    };
    const double dm = config_.dim_model;
    const double residual_scale = 1.0 / std::sqrt(2.0 * config_.num_layers);
    fill(layout_.in_w, 1.0 / std::sqrt(static_cast<double>(config_.frame_dim)));
    fill(layout_.time_w1, 1.0 / std::sqrt(dm));
    fill(layout_.time_w2, 1.0 / std::sqrt(dm));
    fill(layout_.label_emb, 0.5);
    for (const auto& L : layout_.layers) {
        fill(L.wq, 1.0 / std::sqrt(dm));
        fill(L.wk, 1.0 / std::sqrt(dm));
        fill(L.wv, 1.0 / std::sqrt(dm));
        fill(L.wo, residual_scale / std::sqrt(dm));
        fill(L.w1, 1.0 / std::sqrt(dm));
        fill(L.w2, residual_scale / std::sqrt(static_cast<double>(config_.mlp_hidden)));
    }
    // Modulation and output projections stay zero.
}

void Denoiser::validate_request(const ForwardRequest& req) const {
    const auto n = static_cast<Eigen::Index>(req.tokens.size());
    const auto p = static_cast<Eigen::Index>(req.cache.size());
    if (n == 0) throw ContractError("forward pass needs at least one token");
    if (req.mask.rows() != n || req.mask.cols() != p + n) {
        throw ContractError("mask must be tokens x (cache + tokens)");
    }
    for (const auto& tok : req.tokens) {
        if (tok.x.size() != config_.frame_dim) throw DomainError("token frame dimension mismatch");
        if (!(tok.level >= 0.0 && tok.level <= kMaxLevel)) throw DomainError("token level out of range");
        if (tok.label < 0 || tok.label >= config_.num_regimes) {
            throw DomainError("regime label " + std::to_string(tok.label) + " out of range");
        }
    }
    for (const auto& slot : req.cache) {
        if (slot.entry == nullptr ||
            static_cast<int>(slot.entry->keys_pre_rope.size()) != config_.num_layers ||
            static_cast<int>(slot.entry->values.size()) != config_.num_layers) {
            throw ContractError("cache entry does not match layer count");
        }
    }
}

ForwardOutput Denoiser::forward(const ForwardRequest& req, Tape* tape) const {
    validate_request(req);
    const auto n = static_cast<Eigen::Index>(req.tokens.size());
    const auto p = static_cast<Eigen::Index>(req.cache.size());
    const int dm = config_.dim_model;
    const int heads = config_.num_heads;
    const auto& P = params_;

    RowMat x_in(n, config_.frame_dim);
    RowMat level_emb(n, dm);
    std::vector<long> tok_pos(static_cast<size_t>(n));
    std::vector<long> all_pos(static_cast<size_t>(p + n));
    std::vector<double> sigmas(static_cast<size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
        const Token& tok = req.tokens[static_cast<size_t>(r)];
        x_in.row(r) = config_.precond.c_in * tok.x.transpose();
        level_emb.row(r) = nn::sinusoidal_embedding(schedule_.noise_input(tok.level), dm).transpose();
        tok_pos[static_cast<size_t>(r)] = tok.position;
        all_pos[static_cast<size_t>(p + r)] = tok.position;
        sigmas[static_cast<size_t>(r)] = schedule_.sigma(tok.level);
    }
    for (Eigen::Index c = 0; c < p; ++c) all_pos[static_cast<size_t>(c)] = req.cache[static_cast<size_t>(c)].position;

    RowMat time_pre = nn::linear(level_emb, P[layout_.time_w1], P[layout_.time_b1]);
    RowMat time_hidden = nn::silu(time_pre);
    RowMat cond = nn::linear(time_hidden, P[layout_.time_w2], P[layout_.time_b2]);
    for (Eigen::Index r = 0; r < n; ++r) {
        cond.row(r) += P[layout_.label_emb].row(req.tokens[static_cast<size_t>(r)].label);
    }
    RowMat h = nn::linear(x_in, P[layout_.in_w], P[layout_.in_b]) + cond;
    RowMat cond_act = nn::silu(cond);

    ForwardOutput out;
    out.keys.reserve(static_cast<size_t>(config_.num_layers));
    out.values.reserve(static_cast<size_t>(config_.num_layers));
    if (tape != nullptr) {
        tape->clear();
        tape->layers.resize(static_cast<size_t>(config_.num_layers));
    }

    for (int l = 0; l < config_.num_layers; ++l) {
        const auto& L = layout_.layers[static_cast<size_t>(l)];
        Tape::Layer local;
        Tape::Layer& T = tape != nullptr ? tape->layers[static_cast<size_t>(l)] : local;

        T.mod = nn::linear(cond_act, P[L.mod_w], P[L.mod_b]);
        const auto shift1 = T.mod.middleCols(0, dm);
        const auto scale1 = T.mod.middleCols(dm, dm);
        const auto shift2 = T.mod.middleCols(2 * dm, dm);
        const auto scale2 = T.mod.middleCols(3 * dm, dm);

        nn::layer_norm(h, T.ln1);
        T.a1 = (T.ln1.normalized.array() * (1.0 + scale1.array()) + shift1.array()).matrix();
        RowMat q = T.a1 * P[L.wq];
        RowMat k = T.a1 * P[L.wk];
        RowMat v = T.a1 * P[L.wv];

        RowMat k_all(p + n, dm);
        RowMat v_all(p + n, dm);
        for (Eigen::Index c = 0; c < p; ++c) {
            const KvEntry& e = *req.cache[static_cast<size_t>(c)].entry;
            k_all.row(c) = e.keys_pre_rope[static_cast<size_t>(l)].transpose();
            v_all.row(c) = e.values[static_cast<size_t>(l)].transpose();
        }
        k_all.bottomRows(n) = k;
        v_all.bottomRows(n) = v;
        out.keys.push_back(std::move(k));
        out.values.push_back(std::move(v));

        nn::apply_rope(q, tok_pos, heads, config_.rope_base);
        nn::apply_rope(k_all, all_pos, heads, config_.rope_base);
        T.attn_out = nn::attention(q, k_all, v_all, req.mask, heads, tape != nullptr ? &T.attn : nullptr);
        h += nn::linear(T.attn_out, P[L.wo], P[L.bo]);

        nn::layer_norm(h, T.ln2);
        T.a2 = (T.ln2.normalized.array() * (1.0 + scale2.array()) + shift2.array()).matrix();
        T.pre_act = nn::linear(T.a2, P[L.w1], P[L.b1]);
        T.act = nn::gelu(T.pre_act);
        h += nn::linear(T.act, P[L.w2], P[L.b2]);
    }

    RowMat mod_final = nn::linear(cond_act, P[layout_.final_mod_w], P[layout_.final_mod_b]);
    nn::LayerNormCache ln_final;
    nn::layer_norm(h, ln_final);
    RowMat final_in = (ln_final.normalized.array() * (1.0 + mod_final.middleCols(dm, dm).array()) +
                       mod_final.middleCols(0, dm).array())
                          .matrix();
    out.velocity = nn::linear(final_in, P[layout_.out_w], P[layout_.out_b]);
    out.clean.resize(n, config_.frame_dim);
    for (Eigen::Index r = 0; r < n; ++r) {
        out.clean.row(r) = req.tokens[static_cast<size_t>(r)].x.transpose() -
                           sigmas[static_cast<size_t>(r)] * config_.precond.c_out * out.velocity.row(r);
    }

    if (tape != nullptr) {
        tape->positions = std::move(tok_pos);
        tape->labels.resize(static_cast<size_t>(n));
        for (Eigen::Index r = 0; r < n; ++r) tape->labels[static_cast<size_t>(r)] = req.tokens[static_cast<size_t>(r)].label;
        tape->sigmas = std::move(sigmas);
        tape->prefix = p;
        tape->x_in = std::move(x_in);
        tape->level_emb = std::move(level_emb);
        tape->time_pre = std::move(time_pre);
        tape->time_hidden = std::move(time_hidden);
        tape->cond = std::move(cond);
        tape->cond_act = std::move(cond_act);
        tape->mod_final = std::move(mod_final);
        tape->ln_final = std::move(ln_final);
        tape->final_in = std::move(final_in);
        tape->recorded_ = true;
    }
    return out;
}

void Denoiser::backward_clean(const Tape& tape, const RowMat& d_clean, ParameterSet& grads) const {
    if (!tape.recorded()) throw ContractError("backward called without a recorded forward pass");
    RowMat dv = d_clean;
    for (Eigen::Index r = 0; r < dv.rows(); ++r) {
        dv.row(r) *= -tape.sigmas[static_cast<size_t>(r)] * config_.precond.c_out;
    }
    backward(tape, dv, grads);
}

void Denoiser::backward(const Tape& tape, const RowMat& d_velocity, ParameterSet& G) const {
    if (!tape.recorded()) throw ContractError("backward called without a recorded forward pass");
    if (G.size() != params_.size()) throw ContractError("gradient set does not match parameters");
    const auto n = tape.x_in.rows();
    if (d_velocity.rows() != n || d_velocity.cols() != config_.frame_dim) {
        throw ContractError("velocity adjoint shape mismatch");
    }
    const int dm = config_.dim_model;
    const int heads = config_.num_heads;
    const auto& P = params_;

    RowMat d_final_in;
    nn::linear_backward(tape.final_in, P[layout_.out_w], d_velocity, &d_final_in, G[layout_.out_w],
                        G[layout_.out_b]);
    const auto& nf = tape.ln_final.normalized;
    RowMat d_mod_final(n, 2 * dm);
    d_mod_final.middleCols(0, dm) = d_final_in;
    d_mod_final.middleCols(dm, dm) = d_final_in.cwiseProduct(nf);
    RowMat dnf = (d_final_in.array() * (1.0 + tape.mod_final.middleCols(dm, dm).array())).matrix();
    RowMat dh = nn::layer_norm_backward(tape.ln_final, dnf);
    RowMat d_cond_act;
    nn::linear_backward(tape.cond_act, P[layout_.final_mod_w], d_mod_final, &d_cond_act,
                        G[layout_.final_mod_w], G[layout_.final_mod_b]);

    for (int l = config_.num_layers - 1; l >= 0; --l) {
        const auto& L = layout_.layers[static_cast<size_t>(l)];
        const Tape::Layer& T = tape.layers[static_cast<size_t>(l)];
        RowMat d_mod(n, 4 * dm);

        // MLP branch.
        RowMat d_act;
        nn::linear_backward(T.act, P[L.w2], dh, &d_act, G[L.w2], G[L.b2]);
        RowMat d_pre = nn::gelu_backward(T.pre_act, d_act);
        RowMat d_a2;
        nn::linear_backward(T.a2, P[L.w1], d_pre, &d_a2, G[L.w1], G[L.b1]);
        d_mod.middleCols(2 * dm, dm) = d_a2;
        d_mod.middleCols(3 * dm, dm) = d_a2.cwiseProduct(T.ln2.normalized);
        RowMat dn2 = (d_a2.array() * (1.0 + T.mod.middleCols(3 * dm, dm).array())).matrix();
        dh += nn::layer_norm_backward(T.ln2, dn2);

        // Attention branch.
        RowMat d_attn;
        nn::linear_backward(T.attn_out, P[L.wo], dh, &d_attn, G[L.wo], G[L.bo]);
        RowMat dq, dk_all, dv_all;
        nn::attention_backward(T.attn, d_attn, heads, dq, dk_all, dv_all);
        RowMat dk = dk_all.bottomRows(n);
        RowMat dv = dv_all.bottomRows(n);
        nn::apply_rope(dq, tape.positions, heads, config_.rope_base, /*inverse=*/true);
        nn::apply_rope(dk, tape.positions, heads, config_.rope_base, /*inverse=*/true);
        RowMat d_a1(n, dm);
        d_a1.setZero();
        RowMat tmp;
        nn::linear_backward(T.a1, P[L.wq], dq, &tmp, G[L.wq]);
        d_a1 += tmp;
        nn::linear_backward(T.a1, P[L.wk], dk, &tmp, G[L.wk]);
        d_a1 += tmp;
        nn::linear_backward(T.a1, P[L.wv], dv, &tmp, G[L.wv]);
        d_a1 += tmp;
        d_mod.middleCols(0, dm) = d_a1;
        d_mod.middleCols(dm, dm) = d_a1.cwiseProduct(T.ln1.normalized);
        RowMat dn1 = (d_a1.array() * (1.0 + T.mod.middleCols(dm, dm).array())).matrix();
        dh += nn::layer_norm_backward(T.ln1, dn1);

        nn::linear_backward(tape.cond_act, P[L.mod_w], d_mod, &tmp, G[L.mod_w], G[L.mod_b]);
        d_cond_act += tmp;
    }

    // h0 = input(x) + cond; cond also feeds every modulation through silu.
    RowMat d_cond = dh + nn::silu_backward(tape.cond, d_cond_act);
    nn::linear_backward(tape.x_in, P[layout_.in_w], dh, nullptr, G[layout_.in_w], G[layout_.in_b]);
    for (Eigen::Index r = 0; r < n; ++r) {
        G[layout_.label_emb].row(tape.labels[static_cast<size_t>(r)]) += d_cond.row(r);
    }
    RowMat d_hidden;
    nn::linear_backward(tape.time_hidden, P[layout_.time_w2], d_cond, &d_hidden, G[layout_.time_w2],
                        G[layout_.time_b2]);
    RowMat d_time_pre = nn::silu_backward(tape.time_pre, d_hidden);
    nn::linear_backward(tape.level_emb, P[layout_.time_w1], d_time_pre, nullptr, G[layout_.time_w1],
                        G[layout_.time_b1]);
}

std::vector<Vec> Denoiser::denoise_window(std::span<const Vec> frames, std::span<const double> levels,
                                          std::span<const CacheSlot> cache,
                                          std::span<const long> positions, int label, Tape* tape,
                                          WindowMask mask) const {
    const size_t w = frames.size();
    if (w == 0 || levels.size() != w || positions.size() != w) {
        throw ContractError("window frames, levels and positions must have equal non-zero length");
    }
    for (size_t i = 1; i < w; ++i) {
        if (!(levels[i] > levels[i - 1])) throw ContractError("window levels must be strictly ascending");
        if (positions[i] != positions[i - 1] + 1) throw ContractError("window positions must be consecutive");
    }
    for (const auto& slot : cache) {
        if (slot.position >= positions[0]) {
            throw ContractError("cache position " + std::to_string(slot.position) +
                                " not before window start " + std::to_string(positions[0]));
        }
    }
    ForwardRequest req;
    req.tokens.reserve(w);
    for (size_t i = 0; i < w; ++i) req.tokens.push_back({frames[i], levels[i], label, positions[i]});
    req.cache.assign(cache.begin(), cache.end());
    req.mask = window_mask(static_cast<Eigen::Index>(cache.size()), static_cast<Eigen::Index>(w), mask);
    const ForwardOutput out = forward(req, tape);
    std::vector<Vec> clean(w);
    for (size_t i = 0; i < w; ++i) clean[i] = out.clean.row(static_cast<Eigen::Index>(i)).transpose();
    return clean;
}

KvEntry Denoiser::encode_kv(const Vec& frame, std::span<const CacheSlot> temporal, long position,
                            long frame_index, int label, double level) const {
    for (const auto& slot : temporal) {
        if (slot.sink) throw ContractError("encode_kv must not attend to global-context entries");
        if (slot.position >= position) throw ContractError("temporal context must precede the frame");
    }
    ForwardRequest req;
    req.tokens.push_back({frame, level, label, position});
    req.cache.assign(temporal.begin(), temporal.end());
    req.mask = nn::Mask::Constant(1, static_cast<Eigen::Index>(temporal.size()) + 1, true);
    const ForwardOutput out = forward(req);
    KvEntry entry;
    entry.frame_index = frame_index;
    for (int l = 0; l < config_.num_layers; ++l) {
        entry.keys_pre_rope.push_back(out.keys[static_cast<size_t>(l)].row(0).transpose());
        entry.values.push_back(out.values[static_cast<size_t>(l)].row(0).transpose());
    }
    return entry;
}

std::vector<Vec> Denoiser::fake_score_x0(std::span<const Vec> frames, double level, int label,
                                         Tape* tape, WindowMask mask) const {
    const size_t w = frames.size();
    if (w == 0) throw ContractError("fake score needs at least one frame");
    ForwardRequest req;
    req.tokens.reserve(w);
    for (size_t i = 0; i < w; ++i) req.tokens.push_back({frames[i], level, label, static_cast<long>(i)});
    req.mask = window_mask(0, static_cast<Eigen::Index>(w), mask);
    const ForwardOutput out = forward(req, tape);
    std::vector<Vec> clean(w);
    for (size_t i = 0; i < w; ++i) clean[i] = out.clean.row(static_cast<Eigen::Index>(i)).transpose();
    return clean;
}

}  // namespace rollforge
