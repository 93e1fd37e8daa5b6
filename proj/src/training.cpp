#include "rollforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>

#include <nlohmann/json.hpp>

#include "rollforge/engine.hpp"
#include "rollforge/errors.hpp"
#include "rollforge/rng.hpp"

namespace rollforge {

using nlohmann::json;

const char* to_string(RolloutMode mode) { return mode == RolloutMode::sf ? "sf" : "rf"; }

const char* to_string(TrainStrategy strategy) {
    switch (strategy) {
        case TrainStrategy::mixed: return "mixed";
        case TrainStrategy::sf_only: return "sf_only";
        case TrainStrategy::rf_only: return "rf_only";
    }
    return "unknown";
}

TrainStrategy train_strategy_from_string(const std::string& name) {
    for (auto s : {TrainStrategy::mixed, TrainStrategy::sf_only, TrainStrategy::rf_only}) {
        if (name == to_string(s)) return s;
    }
    throw DomainError("unknown training strategy '" + name + "'");
}

void TrainConfig::validate() const {
    if (steps < 0 || batch < 1 || fake_updates_per_gen < 0) throw DomainError("invalid step or batch counts");
    if (!(lr_generator > 0.0) || !(lr_fake > 0.0)) throw DomainError("learning rates must be positive");
    if (w_eval < 1 || n_min < w_eval || n_max < n_min) {
        throw DomainError("rollout lengths must satisfy w_eval <= n_min <= n_max");
    }
    if (!(mix_prob_sf > 0.0 && mix_prob_sf < 1.0)) throw DomainError("mix_prob_sf must lie in (0, 1)");
    if (!(dmd_t_low > 0.0 && dmd_t_low < dmd_t_high && dmd_t_high < kMaxLevel)) {
        throw DomainError("dmd_t_range must lie inside (0, 1000)");
    }
    cache.validate();
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"steps", c.steps},
             {"batch", c.batch},
             {"lr_generator", c.lr_generator},
             {"lr_fake", c.lr_fake},
             {"fake_updates_per_gen", c.fake_updates_per_gen},
             {"n_min", c.n_min},
             {"n_max", c.n_max},
             {"w_eval", c.w_eval},
             {"mix_prob_sf", c.mix_prob_sf},
             {"strategy", to_string(c.strategy)},
             {"dmd_t_range", {c.dmd_t_low, c.dmd_t_high}},
             {"normalize_dmd", c.normalize_dmd},
             {"fake_residual", c.fake_residual},
             {"max_grad_norm", c.max_grad_norm},
             {"seed", c.seed},
             {"cache",
              {{"global_frames", c.cache.global_frames},
               {"temporal_frames", c.cache.temporal_frames},
               {"window_frames", c.cache.window_frames}}}};
}

namespace {

CacheConfig cache_from_json(const json& j, CacheConfig c) {
    c.global_frames = j.value("global_frames", c.global_frames);
    c.temporal_frames = j.value("temporal_frames", c.temporal_frames);
    c.window_frames = j.value("window_frames", c.window_frames);
    return c;
}

json cache_to_json(const CacheConfig& c) {
    return {{"global_frames", c.global_frames},
            {"temporal_frames", c.temporal_frames},
            {"window_frames", c.window_frames}};
}

}  // namespace

void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.batch = j.value("batch", d.batch);
    c.lr_generator = j.value("lr_generator", d.lr_generator);
    c.lr_fake = j.value("lr_fake", d.lr_fake);
    c.fake_updates_per_gen = j.value("fake_updates_per_gen", d.fake_updates_per_gen);
    c.n_min = j.value("n_min", d.n_min);
    c.n_max = j.value("n_max", d.n_max);
    c.w_eval = j.value("w_eval", d.w_eval);
    c.mix_prob_sf = j.value("mix_prob_sf", d.mix_prob_sf);
    c.strategy = train_strategy_from_string(j.value("strategy", std::string(to_string(d.strategy))));
    if (j.contains("dmd_t_range")) {
        const auto& r = j.at("dmd_t_range");
        if (!r.is_array() || r.size() != 2) throw DomainError("dmd_t_range must be [low, high]");
        c.dmd_t_low = r[0].get<double>();
        c.dmd_t_high = r[1].get<double>();
    } else {
        c.dmd_t_low = d.dmd_t_low;
        c.dmd_t_high = d.dmd_t_high;
    }
    c.normalize_dmd = j.value("normalize_dmd", d.normalize_dmd);
    c.fake_residual = j.value("fake_residual", d.fake_residual);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    c.seed = j.value("seed", d.seed);
    c.cache = j.contains("cache") ? cache_from_json(j.at("cache"), d.cache) : d.cache;
    c.validate();
}

void PretrainConfig::validate() const {
    if (steps < 0 || batch < 1 || sequence_frames < 2) throw DomainError("invalid pretraining sizes");
    if (!(lr > 0.0)) throw DomainError("learning rate must be positive");
    if (!(single_frame_prob >= 0.0 && single_frame_prob <= 1.0)) {
        throw DomainError("single_frame_prob must lie in [0, 1]");
    }
    if (validation_samples < 1) throw DomainError("validation_samples must be positive");
    cache.validate();
}

void to_json(json& j, const PretrainConfig& c) {
    j = json{{"steps", c.steps},
             {"batch", c.batch},
             {"lr", c.lr},
             {"sequence_frames", c.sequence_frames},
             {"single_frame_prob", c.single_frame_prob},
             {"max_grad_norm", c.max_grad_norm},
             {"validation_samples", c.validation_samples},
             {"seed", c.seed},
             {"cache", cache_to_json(c.cache)}};
}

void from_json(const json& j, PretrainConfig& c) {
    PretrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.batch = j.value("batch", d.batch);
    c.lr = j.value("lr", d.lr);
    c.sequence_frames = j.value("sequence_frames", d.sequence_frames);
    c.single_frame_prob = j.value("single_frame_prob", d.single_frame_prob);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    c.validation_samples = j.value("validation_samples", d.validation_samples);
    c.seed = j.value("seed", d.seed);
    c.cache = j.contains("cache") ? cache_from_json(j.at("cache"), d.cache) : d.cache;
    c.validate();
}

// ---------------------------------------------------------------------------

namespace {

long floor_mod(long a, long m) {
    const long r = a % m;
    return r < 0 ? r + m : r;
}

EngineConfig engine_config(const Denoiser& model, const CacheConfig& cache) {
    EngineConfig ec;
    ec.cache = cache;
    if (ec.cache.window_frames != model.schedule().num_steps()) {
        throw DomainError("cache window must equal the number of denoising steps");
    }
    return ec;
}

RolloutRecord empty_record(RolloutMode mode, long n, int j, int condition) {
    if (n < 1) throw DomainError("rollout needs at least one frame");
    RolloutRecord rec;
    rec.mode = mode;
    rec.j = j;
    rec.condition = condition;
    rec.num_frames = n;
    rec.predicted_clean.assign(static_cast<size_t>(n), Vec());
    rec.grad_mask.assign(static_cast<size_t>(n), false);
    rec.level_index.assign(static_cast<size_t>(n), 0);
    rec.source.assign(static_cast<size_t>(n), {-1, -1});
    return rec;
}

void check_j(int j, int T) {
    if (j < 0 || j >= T) throw DomainError("j must lie in [0, T-1]");
}

// Records window outputs into `rec`. `select(start, first_level)` decides
// whether a pass is recorded and `keep` which of its frames are kept.
struct Recorder {
    RolloutRecord* rec = nullptr;
    bool track = true;
    std::function<bool(long, int)> select;
    std::function<bool(long start, long frame, int level)> keep;
    bool last_selected = false;

    WindowObserver observer() {
        WindowObserver obs;
        obs.tape_for = [this](long start, int first_level) -> Tape* {
            last_selected = select(start, first_level);
            if (!last_selected || !track) return nullptr;
            rec->windows.push_back({start, Tape(), {}});
            return &rec->windows.back().tape;
        };
        obs.on_input = [this](std::span<const Vec> frames, std::span<const double> levels,
                              std::span<const CacheSlot> cache, std::span<const long> positions, int label) {
            WindowInputs& in = rec->windows.back().inputs;
            in.frames.assign(frames.begin(), frames.end());
            in.levels.assign(levels.begin(), levels.end());
            in.positions.assign(positions.begin(), positions.end());
            in.label = label;
            for (const auto& slot : cache) {
                in.cache.push_back(*slot.entry);
                in.cache_positions.push_back(slot.position);
                in.cache_sink.push_back(slot.sink);
            }
        };
        obs.on_output = [this](long start, std::span<const long> frames, std::span<const int> levels,
                               const std::vector<Vec>& clean, Tape* tape) {
            if (!last_selected) return;
            const int widx = tape != nullptr ? static_cast<int>(rec->windows.size()) - 1 : -1;
            for (size_t k = 0; k < frames.size(); ++k) {
                const long f = frames[k];
                if (f < 1 || f > rec->num_frames || !keep(start, f, levels[k])) continue;
                const auto idx = static_cast<size_t>(f - 1);
                rec->predicted_clean[idx] = clean[k];
                rec->grad_mask[idx] = true;
                rec->level_index[idx] = levels[k];
                rec->source[idx] = {widx, static_cast<int>(k)};
            }
        };
        return obs;
    }
};

void run_rolling(const Denoiser& model, const CacheConfig& cache, RolloutRecord& rec, std::uint64_t seed,
                 Recorder& recorder) {
    const StreamingEngine engine(model, engine_config(model, cache));
    StreamState state = engine.begin(rec.condition, seed);
    const WindowObserver obs = recorder.observer();
    engine.warmup(state, &obs);
    for (long n = 0; n < rec.num_frames; ++n) engine.roll_step(state, &obs);
    rec.denoise_passes = state.denoise_passes;
    rec.kv_passes = state.kv_passes;
}

}  // namespace

std::vector<Vec> replay_window(const Denoiser& model, const WindowInputs& in, Tape* tape) {
    std::vector<CacheSlot> slots;
    for (size_t k = 0; k < in.cache.size(); ++k) slots.push_back({&in.cache[k], in.cache_positions[k], in.cache_sink[k]});
    return model.denoise_window(in.frames, in.levels, slots, in.positions, in.label, tape);
}

std::vector<long> gradient_window_starts(long num_frames, int num_steps, int j) {
    if (num_steps < 1) throw DomainError("T must be positive");
    check_j(j, num_steps);
    std::vector<long> out;
    const long lo = 2 - num_steps;
    for (long i = lo + floor_mod(j - lo, num_steps); i <= num_frames; i += num_steps) out.push_back(i);
    return out;
}

int sample_j(std::mt19937_64& rng, int num_steps) {
    return std::uniform_int_distribution<int>(0, num_steps - 1)(rng);
}

RolloutRecord rf_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames, int j,
                         int condition, std::uint64_t seed, bool track_gradients) {
    const int T = model.schedule().num_steps();
    check_j(j, T);
    RolloutRecord rec = empty_record(RolloutMode::rf, num_frames, j, condition);
    Recorder r;
    r.rec = &rec;
    r.track = track_gradients;
    r.select = [&](long start, int) { return start <= num_frames && floor_mod(start - j, T) == 0; };
    r.keep = [](long, long, int) { return true; };
    run_rolling(model, cache, rec, seed, r);
    return rec;
}

RolloutRecord full_gradient_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames,
                                    int j, int condition, std::uint64_t seed) {
    if (num_frames > kFullGradientCap) {
        throw ResourceError("full-gradient rollout is limited to " + std::to_string(kFullGradientCap) +
                            " frames");
    }
    const int T = model.schedule().num_steps();
    check_j(j, T);
    RolloutRecord rec = empty_record(RolloutMode::rf, num_frames, j, condition);
    Recorder r;
    r.rec = &rec;
    r.select = [&](long start, int) { return start + j >= 1 && start + j <= num_frames; };
    r.keep = [&](long start, long frame, int) { return frame == start + j; };
    run_rolling(model, cache, rec, seed, r);
    return rec;
}

RolloutRecord sf_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames, int j,
                         int condition, std::uint64_t seed, bool track_gradients) {
    const int T = model.schedule().num_steps();
    check_j(j, T);
    RolloutRecord rec = empty_record(RolloutMode::sf, num_frames, j, condition);
    const int exit_level = j + 1;
    Recorder r;
    r.rec = &rec;
    r.track = track_gradients;
    r.select = [&](long, int level) { return level == exit_level; };
    r.keep = [](long, long, int) { return true; };
    const StreamingEngine engine(model, engine_config(model, cache));
    StreamState state = engine.begin(condition, seed);
    state.phase = StreamPhase::steady;
    const WindowObserver obs = r.observer();
    for (long n = 0; n < num_frames; ++n) engine.sf_step(state, exit_level, &obs);
    rec.denoise_passes = state.denoise_passes;
    rec.kv_passes = state.kv_passes;
    return rec;
}

// ---------------------------------------------------------------------------

Vec flatten_frames(std::span<const Vec> frames) {
    if (frames.empty()) return Vec();
    const auto d = frames.front().size();
    Vec out(d * static_cast<Eigen::Index>(frames.size()));
    for (size_t i = 0; i < frames.size(); ++i) out.segment(static_cast<Eigen::Index>(i) * d, d) = frames[i];
    return out;
}

std::vector<Vec> unflatten_frames(const Vec& flat, int frame_dim) {
    if (frame_dim < 1 || flat.size() % frame_dim != 0) throw DomainError("flat length not a multiple of frame_dim");
    std::vector<Vec> out(static_cast<size_t>(flat.size() / frame_dim));
    for (size_t i = 0; i < out.size(); ++i) out[i] = flat.segment(static_cast<Eigen::Index>(i) * frame_dim, frame_dim);
    return out;
}

ScoreFn analytic_score_fn(JointGaussian joint, NoiseSchedule schedule) {
    auto shared = std::make_shared<const std::pair<JointGaussian, NoiseSchedule>>(std::move(joint), std::move(schedule));
    return [shared](const Vec& z, double t) { return analytic_data_score(z, t, shared->first, shared->second); };
}

DataPosterior::DataPosterior(const World& world, int window, NoiseSchedule schedule)
    : window_(window), schedule_(std::move(schedule)) {
    for (int r = 0; r < world.num_regimes(); ++r) joints_.push_back(joint_gaussian(world.regime(r), window));
}

Vec DataPosterior::score(const Vec& z, double t, int label) const {
    if (label < 0 || label >= static_cast<int>(joints_.size())) throw DomainError("unknown regime label");
    return analytic_data_score(z, t, joints_[static_cast<size_t>(label)], schedule_);
}

Vec DataPosterior::mean(const Vec& z, double t, int label) const {
    const double s = schedule_.sigma(t);
    if (s >= 1.0) throw SingularLevelError("posterior mean needs sigma < 1");
    return (z + s * s * score(z, t, label)) / (1.0 - s);
}

ScoreFn fake_score_fn(const Denoiser& fake, int label, const DataPosterior* baseline) {
    return [&fake, label, baseline](const Vec& z, double t) {
        const std::vector<Vec> frames = unflatten_frames(z, fake.config().frame_dim);
        Vec x_hat = flatten_frames(fake.fake_score_x0(frames, t, label));
        if (baseline != nullptr) x_hat += baseline->mean(z, t, label) - z;
        return fake.schedule().posterior_score(z, x_hat, t);
    };
}

DmdSample dmd_pseudo_gradient(const Vec& x_hat, double t, const Vec& noise, const ScoreFn& s_data,
                              const ScoreFn& s_gen, const NoiseSchedule& schedule, bool normalize) {
    if (noise.size() != x_hat.size()) throw DomainError("noise shape mismatch");
    DmdSample out;
    out.t = t;
    out.sigma = schedule.sigma(t);
    const Vec z = schedule.forward_diffuse(x_hat, t, noise);
    const Vec diff = s_data(z, t) - s_gen(z, t);
    out.mean_abs_diff = diff.cwiseAbs().mean();
    out.g = -(1.0 - out.sigma) * diff;
    if (normalize) {
        if (out.mean_abs_diff > 0.0) {
            out.g /= out.mean_abs_diff;
        } else {
            out.g.setZero();
        }
    }
    return out;
}

DmdResult dmd_step(const Denoiser& generator, const RolloutRecord& rollout, const ScoreFn& s_data,
                   const ScoreFn& s_gen, const DmdOptions& options, std::mt19937_64& rng,
                   ParameterSet& grads, double scale) {
    const long n = rollout.num_frames;
    const long w = options.w_eval;
    if (w < 1 || w > n) throw ContractError("w_eval exceeds rollout length");
    const long first = n - w;  // 0-based index of the first evaluated frame
    std::vector<Vec> suffix(rollout.predicted_clean.begin() + first, rollout.predicted_clean.end());
    const Vec x_hat = flatten_frames(suffix);
    const double t = std::uniform_real_distribution<double>(options.t_low, options.t_high)(rng);
    const Vec noise = standard_normal(rng, static_cast<int>(x_hat.size()));
    const DmdSample s = dmd_pseudo_gradient(x_hat, t, noise, s_data, s_gen, generator.schedule(),
                                            options.normalize);
    DmdResult res;
    res.t = s.t;
    res.sigma = s.sigma;
    res.mean_abs_diff = s.mean_abs_diff;
    res.g_norm = s.g.norm();

    const int d = generator.config().frame_dim;
    std::vector<RowMat> adjoints(rollout.windows.size());
    for (long k = 0; k < w; ++k) {
        const auto idx = static_cast<size_t>(first + k);
        const auto [widx, row] = rollout.source[idx];
        if (!rollout.grad_mask[idx] || widx < 0) continue;
        RowMat& adj = adjoints[static_cast<size_t>(widx)];
        if (adj.size() == 0) adj = RowMat::Zero(rollout.windows[static_cast<size_t>(widx)].tape.tokens(), d);
        adj.row(row) = scale * s.g.segment(k * d, d).transpose();
        ++res.frames_backpropagated;
    }
    for (size_t widx = 0; widx < adjoints.size(); ++widx) {
        if (adjoints[widx].size() != 0) generator.backward_clean(rollout.windows[widx].tape, adjoints[widx], grads);
    }
    return res;
}

// ---------------------------------------------------------------------------

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

double fake_score_loss(const Denoiser& fake, std::span<const LabeledWindow> batch, double t_low,
                       double t_high, std::mt19937_64& rng, ParameterSet* grads,
                       const DataPosterior* baseline) {
    if (batch.empty()) throw ContractError("fake score update needs at least one sample");
    const auto& sched = fake.schedule();
    const int d = fake.config().frame_dim;
    long tokens = 0;
    for (const auto& w : batch) tokens += static_cast<long>(w.frames.size());
    double loss = 0.0;
    for (const auto& w : batch) {
        const size_t n = w.frames.size();
        if (n == 0) throw ContractError("empty fake score window");
        const double t = uniform(rng, t_low, t_high);
        ForwardRequest req;
        RowMat target(static_cast<Eigen::Index>(n), d);
        for (size_t k = 0; k < n; ++k) {
            const Vec eps = standard_normal(rng, d);
            req.tokens.push_back({sched.forward_diffuse(w.frames[k], t, eps), t, w.label, static_cast<long>(k)});
            target.row(static_cast<Eigen::Index>(k)) = (eps - w.frames[k]).transpose();
        }
        if (baseline != nullptr) {
            if (static_cast<int>(n) != baseline->window()) throw ContractError("fake window must match the baseline");
            Vec z(static_cast<Eigen::Index>(n) * d);
            for (size_t k = 0; k < n; ++k) z.segment(static_cast<Eigen::Index>(k) * d, d) = req.tokens[k].x;
            const Vec mean = baseline->mean(z, t, w.label);
            const double s = sched.sigma(t);
            for (size_t k = 0; k < n; ++k) {
                const auto r = static_cast<Eigen::Index>(k);
                target.row(r) = ((mean.segment(r * d, d) - w.frames[k]) / s).transpose();
            }
        }
        req.mask = window_mask(0, static_cast<Eigen::Index>(n), WindowMask::bidirectional);
        Tape tape;
        const ForwardOutput out = fake.forward(req, grads != nullptr ? &tape : nullptr);
        const RowMat diff = out.velocity - target;
        loss += diff.squaredNorm();
        if (grads != nullptr) fake.backward(tape, (2.0 / static_cast<double>(tokens)) * diff, *grads);
    }
    return loss / static_cast<double>(tokens);
}

double fake_score_update(Denoiser& fake, AdamW& optimizer, std::span<const LabeledWindow> batch,
                         double t_low, double t_high, std::mt19937_64& rng, const DataPosterior* baseline) {
    ParameterSet grads = fake.params().zeros_like();
    const double loss = fake_score_loss(fake, batch, t_low, t_high, rng, &grads, baseline);
    optimizer.step(fake.params(), grads);
    return loss;
}

double pretrain_fake_score(Denoiser& fake, const World& world, int steps, int batch, int window,
                           double lr, double t_low, double t_high, std::uint64_t seed, std::ostream* log,
                           const DataPosterior* baseline) {
    if (batch < 1 || window < 1) throw DomainError("fake pretraining needs positive batch and window");
    AdamWConfig oc;
    oc.lr = lr;
    oc.max_grad_norm = 1.0;
    AdamW opt(fake.params(), oc);
    std::mt19937_64 rng(KeyedNoise(seed).engine({0x66616b65}));
    double loss = 0.0;
    for (int step = 0; step < steps; ++step) {
        std::vector<LabeledWindow> samples(static_cast<size_t>(batch));
        for (auto& s : samples) {
            s.label = std::uniform_int_distribution<int>(0, world.num_regimes() - 1)(rng);
            s.frames = sample_sequence(world.regime(s.label), window, rng());
        }
        loss = fake_score_update(fake, opt, samples, t_low, t_high, rng, baseline);
        if (log != nullptr) {
            *log << json{{"kind", "fake_pretrain"}, {"step", step}, {"loss", loss}}.dump() << '\n';
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------

std::pair<ForwardRequest, int> teacher_forced_request(const DenoiserConfig& config,
                                                      const CacheConfig& cache,
                                                      const LabeledSequence& sequence,
                                                      const TeacherForcedSample& sample) {
    const long w0 = sample.window_first;
    const auto w = static_cast<long>(sample.levels.size());
    if (w < 1 || sample.noise.size() != sample.levels.size()) throw ContractError("malformed teacher-forced sample");
    if (w0 < 1 || w0 + w - 1 > static_cast<long>(sequence.frames.size())) {
        throw ContractError("teacher-forced window outside the sequence");
    }
    const long glo = cache.global_frames;
    const long tem = cache.temporal_frames;
    // Sink frames and the temporal chain deep enough to reproduce every
    // layer of the cached states the window reads.
    const long num_sink = std::min(glo, w0 - 1);
    const long chain_first = std::max(glo + 1, w0 - tem * config.num_layers);
    const long num_chain = tem > 0 ? std::max(0L, w0 - chain_first) : 0;
    const long view_first = w0 - tem;  // oldest temporal frame the window reads
    const long h = num_sink + num_chain;
    const long n = h + w;

    ForwardRequest req;
    req.tokens.reserve(static_cast<size_t>(n));
    const auto sink_pos = sink_positions(cache, SinkPlacement::rebased, w0, static_cast<int>(num_sink));
    const auto frame = [&](long f) -> const Vec& { return sequence.frames[static_cast<size_t>(f - 1)]; };
    std::vector<long> frame_of(static_cast<size_t>(n));
    for (long s = 0; s < num_sink; ++s) {
        req.tokens.push_back({frame(s + 1), 0.0, sequence.label, sink_pos[static_cast<size_t>(s)]});
        frame_of[static_cast<size_t>(s)] = s + 1;
    }
    for (long c = 0; c < num_chain; ++c) {
        const long f = chain_first + c;
        req.tokens.push_back({frame(f), 0.0, sequence.label, f});
        frame_of[static_cast<size_t>(num_sink + c)] = f;
    }
    const NoiseSchedule sched = config.schedule();
    for (long k = 0; k < w; ++k) {
        const long f = w0 + k;
        const auto ks = static_cast<size_t>(k);
        req.tokens.push_back({sched.forward_diffuse(frame(f), sample.levels[ks], sample.noise[ks]),
                              sample.levels[ks], sequence.label, f});
    }
    long lo = 0;
    for (size_t r = 0; r < req.tokens.size(); ++r) lo = r == 0 ? req.tokens[r].position : std::min(lo, req.tokens[r].position);
    for (auto& tok : req.tokens) tok.position -= lo;

    req.mask = nn::Mask::Constant(n, n, false);
    for (long s = 0; s < num_sink; ++s) req.mask(s, s) = true;
    for (long a = num_sink; a < h; ++a) {
        const long fa = frame_of[static_cast<size_t>(a)];
        for (long b = num_sink; b <= a; ++b) {
            if (frame_of[static_cast<size_t>(b)] >= fa - tem) req.mask(a, b) = true;
        }
    }
    for (long r = h; r < n; ++r) {
        for (long s = 0; s < num_sink; ++s) req.mask(r, s) = true;
        for (long c = num_sink; c < h; ++c) {
            if (frame_of[static_cast<size_t>(c)] >= view_first) req.mask(r, c) = true;
        }
        for (long c = h; c < n; ++c) req.mask(r, c) = true;
    }
    return {std::move(req), static_cast<int>(h)};
}

TeacherForcedSample draw_teacher_forced_sample(const NoiseSchedule& schedule, const CacheConfig& cache,
                                               long sequence_frames, int frame_dim,
                                               double single_frame_prob, std::mt19937_64& rng) {
    TeacherForcedSample s;
    const int T = cache.window_frames;
    if (uniform(rng, 0.0, 1.0) < single_frame_prob) {
        s.window_first = std::uniform_int_distribution<long>(1, sequence_frames)(rng);
        s.levels = {kMaxLevel - uniform(rng, 0.0, kMaxLevel)};
    } else {
        if (sequence_frames < T) throw DomainError("sequence shorter than the rolling window");
        const long start = std::uniform_int_distribution<long>(2 - T, sequence_frames - T + 1)(rng);
        s.window_first = std::max(1L, start);
        for (long f = s.window_first; f <= start + T - 1; ++f) {
            s.levels.push_back(schedule.level(static_cast<int>(f - start + 1)));
        }
    }
    for (size_t k = 0; k < s.levels.size(); ++k) s.noise.push_back(standard_normal(rng, frame_dim));
    return s;
}

double pretrain_loss(const Denoiser& model, const CacheConfig& cache,
                     std::span<const LabeledSequence> sequences,
                     std::span<const TeacherForcedSample> samples, ParameterSet* grads) {
    if (sequences.size() != samples.size() || samples.empty()) {
        throw ContractError("pretraining needs one sample per sequence");
    }
    long tokens = 0;
    for (const auto& s : samples) tokens += static_cast<long>(s.levels.size());
    const int d = model.config().frame_dim;
    double loss = 0.0;
    for (size_t b = 0; b < samples.size(); ++b) {
        const auto& sample = samples[b];
        auto [req, h] = teacher_forced_request(model.config(), cache, sequences[b], sample);
        Tape tape;
        const ForwardOutput out = model.forward(req, grads != nullptr ? &tape : nullptr);
        const auto w = static_cast<Eigen::Index>(sample.levels.size());
        RowMat diff(w, d);
        for (Eigen::Index k = 0; k < w; ++k) {
            const Vec& x = sequences[b].frames[static_cast<size_t>(sample.window_first - 1 + k)];
            diff.row(k) = out.velocity.row(h + k) - (sample.noise[static_cast<size_t>(k)] - x).transpose();
        }
        loss += diff.squaredNorm();
        if (grads != nullptr) {
            RowMat adj = RowMat::Zero(out.velocity.rows(), d);
            adj.bottomRows(w) = (2.0 / static_cast<double>(tokens)) * diff;
            model.backward(tape, adj, *grads);
        }
    }
    return loss / static_cast<double>(tokens);
}

double pretrain_step(Denoiser& model, AdamW& optimizer, const CacheConfig& cache,
                     std::span<const LabeledSequence> sequences,
                     std::span<const TeacherForcedSample> samples) {
    ParameterSet grads = model.params().zeros_like();
    const double loss = pretrain_loss(model, cache, sequences, samples, &grads);
    optimizer.step(model.params(), grads);
    return loss;
}

namespace {

struct PretrainBatch {
    std::vector<LabeledSequence> sequences;
    std::vector<TeacherForcedSample> samples;
};

PretrainBatch draw_pretrain_batch(const Denoiser& model, const World& world, const PretrainConfig& config,
                                  int size, std::mt19937_64& rng) {
    PretrainBatch b;
    for (int k = 0; k < size; ++k) {
        LabeledSequence seq;
        seq.label = std::uniform_int_distribution<int>(0, world.num_regimes() - 1)(rng);
        seq.frames = sample_sequence(world.regime(seq.label), config.sequence_frames, rng());
        b.samples.push_back(draw_teacher_forced_sample(model.schedule(), config.cache, config.sequence_frames,
                                                       model.config().frame_dim, config.single_frame_prob, rng));
        b.sequences.push_back(std::move(seq));
    }
    return b;
}

}  // namespace

PretrainResult pretrain(Denoiser& model, const World& world, const PretrainConfig& config, std::ostream* log) {
    config.validate();
    if (world.num_regimes() > model.config().num_regimes || world.dim() != model.config().frame_dim) {
        throw DomainError("world does not match the denoiser configuration");
    }
    std::mt19937_64 val_rng(KeyedNoise(config.seed).engine({0x76616c}));
    const PretrainBatch val = draw_pretrain_batch(model, world, config, config.validation_samples, val_rng);
    const auto validate = [&] { return pretrain_loss(model, config.cache, val.sequences, val.samples, nullptr); };

    PretrainResult res;
    res.initial_validation_loss = validate();
    if (log != nullptr) {
        *log << json{{"kind", "pretrain_validation"}, {"step", 0}, {"loss", res.initial_validation_loss}}.dump() << '\n';
    }
    AdamWConfig oc;
    oc.lr = config.lr;
    oc.max_grad_norm = config.max_grad_norm;
    AdamW opt(model.params(), oc);
    std::mt19937_64 rng(KeyedNoise(config.seed).engine({0x747261696e}));
    for (int step = 0; step < config.steps; ++step) {
        const PretrainBatch b = draw_pretrain_batch(model, world, config, config.batch, rng);
        const double loss = pretrain_step(model, opt, config.cache, b.sequences, b.samples);
        if (log != nullptr) *log << json{{"kind", "pretrain"}, {"step", step + 1}, {"loss", loss}}.dump() << '\n';
    }
    res.final_validation_loss = validate();
    if (log != nullptr) {
        *log << json{{"kind", "pretrain_validation"}, {"step", config.steps}, {"loss", res.final_validation_loss}}.dump()
             << '\n';
    }
    return res;
}

// ---------------------------------------------------------------------------

namespace {

RolloutMode draw_mode(const TrainConfig& config, std::mt19937_64& rng) {
    switch (config.strategy) {
        case TrainStrategy::sf_only: return RolloutMode::sf;
        case TrainStrategy::rf_only: return RolloutMode::rf;
        case TrainStrategy::mixed: break;
    }
    return uniform(rng, 0.0, 1.0) < config.mix_prob_sf ? RolloutMode::sf : RolloutMode::rf;
}

RolloutRecord rollout(const Denoiser& model, const CacheConfig& cache, RolloutMode mode, long n, int j,
                      int label, std::uint64_t seed, bool track) {
    return mode == RolloutMode::sf ? sf_rollout(model, cache, n, j, label, seed, track)
                                   : rf_rollout(model, cache, n, j, label, seed, track);
}

}  // namespace

DistillResult distill(Denoiser& generator, Denoiser& fake, const World& world, const TrainConfig& config,
                      std::ostream* log, const std::function<void(long)>& progress) {
    config.validate();
    const int T = generator.schedule().num_steps();
    if (config.cache.window_frames != T) throw DomainError("cache window must equal the number of denoising steps");
    if (world.num_regimes() > generator.config().num_regimes) throw DomainError("world has more regimes than labels");

    AdamWConfig gc;
    gc.lr = config.lr_generator;
    gc.max_grad_norm = config.max_grad_norm;
    AdamW gen_opt(generator.params(), gc);
    AdamWConfig fc;
    fc.lr = config.lr_fake;
    fc.max_grad_norm = config.max_grad_norm;
    AdamW fake_opt(fake.params(), fc);

    const DataPosterior posterior(world, config.w_eval, generator.schedule());
    const DataPosterior* baseline = config.fake_residual ? &posterior : nullptr;
    std::vector<ScoreFn> s_data;
    for (int r = 0; r < world.num_regimes(); ++r) {
        s_data.push_back([&posterior, r](const Vec& z, double t) { return posterior.score(z, t, r); });
    }
    DmdOptions dmd;
    dmd.w_eval = config.w_eval;
    dmd.t_low = config.dmd_t_low;
    dmd.t_high = config.dmd_t_high;
    dmd.normalize = config.normalize_dmd;

    const KeyedNoise keys(config.seed);
    std::mt19937_64 rng(keys.engine({0x64697374}));
    const auto draw_label = [&] { return std::uniform_int_distribution<int>(0, world.num_regimes() - 1)(rng); };
    DistillResult res;
    for (long step = 0; step < config.steps; ++step) {
        const RolloutMode mode = draw_mode(config, rng);
        const long n = std::uniform_int_distribution<long>(config.n_min, config.n_max)(rng);
        const int j = sample_j(rng, T);

        for (int u = 0; u < config.fake_updates_per_gen; ++u) {
            std::vector<LabeledWindow> samples(static_cast<size_t>(config.batch));
            for (int b = 0; b < config.batch; ++b) {
                const int label = draw_label();
                const RolloutMode m = draw_mode(config, rng);
                const RolloutRecord rec = rollout(generator, config.cache, m, n, sample_j(rng, T), label,
                                                  keys.engine({step, u + 1, b})(), false);
                auto& s = samples[static_cast<size_t>(b)];
                s.label = label;
                s.frames.assign(rec.predicted_clean.end() - config.w_eval, rec.predicted_clean.end());
            }
            const double loss = fake_score_update(fake, fake_opt, samples, config.dmd_t_low, config.dmd_t_high, rng,
                                                 baseline);
            ++res.fake_updates;
            if (log != nullptr) {
                *log << json{{"kind", "fake"}, {"step", step}, {"update", u}, {"loss", loss}}.dump() << '\n';
                ++res.log_lines;
            }
        }

        ParameterSet grads = generator.params().zeros_like();
        double mad = 0.0;
        double gnorm = 0.0;
        double t_mean = 0.0;
        for (int b = 0; b < config.batch; ++b) {
            const int label = draw_label();
            const RolloutRecord rec = rollout(generator, config.cache, mode, n, j, label, keys.engine({step, 0, b})(), true);
            const DmdResult d = dmd_step(generator, rec, s_data[static_cast<size_t>(label)], fake_score_fn(fake, label, baseline),
                                         dmd, rng, grads, 1.0 / config.batch);
            mad += d.mean_abs_diff / config.batch;
            gnorm += d.g_norm / config.batch;
            t_mean += d.t / config.batch;
        }
        const double norm = gen_opt.step(generator.params(), grads);
        ++res.generator_steps;
        (mode == RolloutMode::sf ? res.sf_steps : res.rf_steps) += 1;
        if (log != nullptr) {
            *log << json{{"kind", "generator"},
                         {"step", step},
                         {"mode", to_string(mode)},
                         {"j", j},
                         {"N", n},
                         {"grad_norm", norm},
                         {"dmd_mean_abs_diff", mad},
                         {"dmd_g_norm", gnorm},
                         {"t_mean", t_mean}}
                        .dump()
                 << '\n';
            ++res.log_lines;
        }
        if (progress) progress(step);
    }
    return res;
}

}  // namespace rollforge
