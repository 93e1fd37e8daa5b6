#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rollforge/denoiser.hpp"
#include "rollforge/kvcache.hpp"
#include "rollforge/optim.hpp"
#include "rollforge/world.hpp"

namespace rollforge {

enum class RolloutMode { sf, rf };
const char* to_string(RolloutMode mode);

// Which rollout kinds the distillation driver samples.
enum class TrainStrategy { mixed, sf_only, rf_only };
const char* to_string(TrainStrategy strategy);
TrainStrategy train_strategy_from_string(const std::string& name);

struct TrainConfig {
    int steps = 3000;
    int batch = 8;
    double lr_generator = 1e-4;  // 1.5e-6 at the 1.3B scale
    double lr_fake = 4e-5;       // 4e-7 at the 1.3B scale
    int fake_updates_per_gen = 5;
    int n_min = 21;
    int n_max = 27;
    int w_eval = 21;
    double mix_prob_sf = 0.5;
    TrainStrategy strategy = TrainStrategy::mixed;
    double dmd_t_low = 20.0;
    double dmd_t_high = 980.0;
    bool normalize_dmd = true;
    // Fake score = analytic data posterior mean + learned correction.
    bool fake_residual = true;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 0;
    CacheConfig cache;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct PretrainConfig {
    int steps = 2000;
    int batch = 8;
    double lr = 1e-3;
    int sequence_frames = 32;
    // Share of samples that denoise one frame at a continuous level; the
    // rest denoise a whole window on the rolling level ladder.
    double single_frame_prob = 0.5;
    double max_grad_norm = 1.0;
    int validation_samples = 256;
    std::uint64_t seed = 0;
    CacheConfig cache;

    void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

// ---------------------------------------------------------------------------
// Rollouts

/// Predicted clean video of one self-generated rollout.
///
/// Frame f (1-based) lives at index f - 1. Frames produced inside
/// gradient-enabled passes keep a pointer to the recorded pass so a DMD
/// adjoint can be pushed back into the generator.
struct WindowInputs {
    std::vector<Vec> frames;
    std::vector<double> levels;
    std::vector<KvEntry> cache;  // copies, so the record outlives the stream
    std::vector<long> cache_positions;
    std::vector<bool> cache_sink;
    std::vector<long> positions;
    int label = 0;
};

// Re-runs a recorded pass on its stored inputs with the model's current parameters.
std::vector<Vec> replay_window(const Denoiser& model, const WindowInputs& inputs, Tape* tape = nullptr);

struct RolloutRecord {
    struct GradWindow {
        long start = 0;
        Tape tape;
        WindowInputs inputs;
    };

    RolloutMode mode = RolloutMode::rf;
    int j = 0;
    int condition = 0;
    long num_frames = 0;
    std::vector<Vec> predicted_clean;
    std::vector<bool> grad_mask;
    std::vector<int> level_index;                  // level each prediction was denoised from
    std::vector<std::pair<int, int>> source;        // (grad window, row) per frame, -1 if none
    std::deque<GradWindow> windows;
    long denoise_passes = 0;
    long kv_passes = 0;
    // Every input frame came from the generator itself; world samples never enter.
    bool self_generated = true;

    long grad_passes() const { return static_cast<long>(windows.size()); }
};

// Window starts i = j (mod T) from 2 - T (partial warm-up windows) to N.
std::vector<long> gradient_window_starts(long num_frames, int num_steps, int j);

int sample_j(std::mt19937_64& rng, int num_steps);

// Rolling rollout; only windows starting at i = j (mod T) are recorded.
RolloutRecord rf_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames, int j,
                         int condition, std::uint64_t seed, bool track_gradients = true);

// Frame-by-frame rollout; every frame stops at level t_{j+1} and that
// prediction is recorded and cached.
RolloutRecord sf_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames, int j,
                         int condition, std::uint64_t seed, bool track_gradients = true);

inline constexpr long kFullGradientCap = 8;

// Rolling rollout with every window tracked; frame f is taken from the
// window where it sits at position j (level t_{j+1}).
RolloutRecord full_gradient_rollout(const Denoiser& model, const CacheConfig& cache, long num_frames,
                                    int j, int condition, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Distribution matching

// Score of the diffused law at flattened z and level t.
using ScoreFn = std::function<Vec(const Vec& z, double t)>;

ScoreFn analytic_score_fn(JointGaussian joint, NoiseSchedule schedule);

/// Exact posterior mean E[x | z] of the data law over a w-frame window, per label.
class DataPosterior {
public:
    DataPosterior(const World& world, int window, NoiseSchedule schedule);

    int window() const { return window_; }
    Vec score(const Vec& z, double t, int label) const;
    // (z + sigma^2 score) / (1 - sigma); needs t < 1000.
    Vec mean(const Vec& z, double t, int label) const;

private:
    int window_;
    NoiseSchedule schedule_;
    std::vector<JointGaussian> joints_;
};

// Score implied by the fake network's clean estimate over a common-level window.
// With a baseline the estimate is baseline->mean(z) + (x_net - z), so an
// untrained network reproduces the data score exactly.
ScoreFn fake_score_fn(const Denoiser& fake, int label, const DataPosterior* baseline = nullptr);

struct DmdOptions {
    int w_eval = 21;
    double t_low = 20.0;
    double t_high = 980.0;
    bool normalize = true;
};

struct DmdSample {
    Vec g;  // pseudo-gradient on x_hat
    double t = 0.0;
    double sigma = 0.0;
    double mean_abs_diff = 0.0;
};

// g = -(1 - sigma) (s_data(z) - s_gen(z)) at z = (1 - sigma) x_hat + sigma noise,
// optionally divided by mean |s_data - s_gen|.
DmdSample dmd_pseudo_gradient(const Vec& x_hat, double t, const Vec& noise, const ScoreFn& s_data,
                              const ScoreFn& s_gen, const NoiseSchedule& schedule, bool normalize);

struct DmdResult {
    double t = 0.0;
    double sigma = 0.0;
    double mean_abs_diff = 0.0;
    double g_norm = 0.0;
    long frames_backpropagated = 0;
};

// Accumulates scale * d<g, x_hat>/dtheta over the last w_eval frames into grads.
DmdResult dmd_step(const Denoiser& generator, const RolloutRecord& rollout, const ScoreFn& s_data,
                   const ScoreFn& s_gen, const DmdOptions& options, std::mt19937_64& rng,
                   ParameterSet& grads, double scale = 1.0);

// Flattens frames [first, first + count) of a rollout frame-major.
Vec flatten_frames(std::span<const Vec> frames);
std::vector<Vec> unflatten_frames(const Vec& flat, int frame_dim);

// ---------------------------------------------------------------------------
// Fake score

struct LabeledWindow {
    std::vector<Vec> frames;
    int label = 0;
};

// Flow-matching regression of the fake network on (Psi(x, t), t) -> x; adds
// the gradient of the batch-mean loss into grads when given. The velocity
// target is eps - x, or (baseline mean - x) / sigma with a baseline.
double fake_score_loss(const Denoiser& fake, std::span<const LabeledWindow> batch, double t_low,
                       double t_high, std::mt19937_64& rng, ParameterSet* grads,
                       const DataPosterior* baseline = nullptr);
double fake_score_update(Denoiser& fake, AdamW& optimizer, std::span<const LabeledWindow> batch,
                         double t_low, double t_high, std::mt19937_64& rng,
                         const DataPosterior* baseline = nullptr);

// Initial fake score: the same regression on windows drawn from the world.
double pretrain_fake_score(Denoiser& fake, const World& world, int steps, int batch, int window,
                           double lr, double t_low, double t_high, std::uint64_t seed,
                           std::ostream* log = nullptr, const DataPosterior* baseline = nullptr);

// ---------------------------------------------------------------------------
// Teacher-forced pretraining

struct LabeledSequence {
    std::vector<Vec> frames;
    int label = 0;
};

// One teacher-forced denoising sample: a window of sequence frames at given
// levels, attending to clean history arranged exactly as the streaming
// cache would present it.
struct TeacherForcedSample {
    long window_first = 1;  // first window frame (1-based)
    std::vector<double> levels;
    std::vector<Vec> noise;
};

// Forward request for a sample. History tokens follow the cache rules: the
// first L_glo frames sit at the sink positions and attend only to
// themselves; later frames form a chain where each attends to its L_tem
// predecessors. Window tokens see the sink, the last L_tem history frames
// and each other. Returns the request and the number of history tokens.
std::pair<ForwardRequest, int> teacher_forced_request(const DenoiserConfig& config,
                                                      const CacheConfig& cache,
                                                      const LabeledSequence& sequence,
                                                      const TeacherForcedSample& sample);

TeacherForcedSample draw_teacher_forced_sample(const NoiseSchedule& schedule, const CacheConfig& cache,
                                               long sequence_frames, int frame_dim,
                                               double single_frame_prob, std::mt19937_64& rng);

// Mean per-token velocity loss |v - (eps - x)|^2; gradient added when grads is given.
double pretrain_loss(const Denoiser& model, const CacheConfig& cache,
                     std::span<const LabeledSequence> sequences,
                     std::span<const TeacherForcedSample> samples, ParameterSet* grads);

double pretrain_step(Denoiser& model, AdamW& optimizer, const CacheConfig& cache,
                     std::span<const LabeledSequence> sequences,
                     std::span<const TeacherForcedSample> samples);

struct PretrainResult {
    double initial_validation_loss = 0.0;
    double final_validation_loss = 0.0;
};

PretrainResult pretrain(Denoiser& model, const World& world, const PretrainConfig& config,
                        std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Distillation driver

struct DistillResult {
    long generator_steps = 0;
    long fake_updates = 0;
    long sf_steps = 0;
    long rf_steps = 0;
    long log_lines = 0;
};

// Alternates fake_updates_per_gen fake-score updates with one generator
// DMD update. One JSON line is written per update.
DistillResult distill(Denoiser& generator, Denoiser& fake, const World& world, const TrainConfig& config,
                      std::ostream* log = nullptr,
                      const std::function<void(long step)>& progress = {});

}  // namespace rollforge
