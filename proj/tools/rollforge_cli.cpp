// rollforge command line: pretrain, distill, generate, bench, eval, serve.

#include <chrono>
#include <csignal>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rollforge/checkpoint.hpp"
#include "rollforge/engine.hpp"
#include "rollforge/errors.hpp"
#include "rollforge/metrics.hpp"
#include "rollforge/service.hpp"
#include "rollforge/training.hpp"

using namespace rollforge;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct FileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FileError(path + " is not valid JSON");
    return j;
}

Checkpoint open_checkpoint(const std::string& name) {
    const fs::path path = resolve_checkpoint_path(name);
    if (!fs::exists(path / "manifest.json")) throw FileError("checkpoint not found: " + path.string());
    Checkpoint ck = load_checkpoint(path);
    if (!ck.pretrained) std::cerr << "warning: checkpoint " << path.string() << " is not pretrained\n";
    return ck;
}

std::ofstream open_log(const std::string& path) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw FileError("cannot write " + path);
    return out;
}

// "frame:label" pairs, e.g. 100:2
ConditionScript parse_switches(const std::vector<std::string>& items) {
    ConditionScript script;
    for (const auto& s : items) {
        const auto colon = s.find(':');
        if (colon == std::string::npos) throw DomainError("switch must look like FRAME:LABEL, got '" + s + "'");
        script.emplace_back(std::stol(s.substr(0, colon)), std::stoi(s.substr(colon + 1)));
    }
    return script;
}

struct StreamFlags {
    std::string checkpoint;
    std::string mode = "rolling";
    long frames = 256;
    std::uint64_t seed = 0;
    int condition = 0;
    std::vector<std::string> switches;
    int sink_frames = 1;
    int temporal_frames = 1;

    void add(CLI::App* app, bool with_frames = true) {
        app->add_option("-c,--checkpoint", checkpoint, "checkpoint directory or name under ROLLFORGE_CHECKPOINT_DIR")
            ->required();
        app->add_option("--mode", mode, "rolling or sf")->check(CLI::IsMember({"rolling", "sf"}));
        if (with_frames) app->add_option("-n,--frames", frames, "frames to emit")->check(CLI::PositiveNumber);
        app->add_option("--seed", seed);
        app->add_option("--condition", condition, "initial regime label");
        app->add_option("--switch", switches, "condition switch FRAME:LABEL (repeatable)");
        app->add_option("--sink-frames", sink_frames, "attention-sink frames (0 disables the sink)")
            ->check(CLI::NonNegativeNumber);
        app->add_option("--temporal-frames", temporal_frames)->check(CLI::NonNegativeNumber);
    }

    EngineConfig engine(const Denoiser& m) const {
        return EngineConfig{CacheConfig{sink_frames, temporal_frames, m.schedule().num_steps()}};
    }
};

std::vector<Vec> run_stream(const Denoiser& model, const StreamFlags& f) {
    const StreamingEngine engine(model, f.engine(model));
    const ConditionScript script = parse_switches(f.switches);
    return stream_mode_from_string(f.mode) == StreamMode::rolling
               ? engine.generate(f.frames, f.condition, f.seed, script)
               : engine.sf_generate(f.frames, f.condition, f.seed, script);
}

json frames_to_json(const std::vector<Vec>& frames) {
    json out = json::array();
    for (const auto& x : frames) out.push_back(std::vector<double>(x.data(), x.data() + x.size()));
    return out;
}

std::vector<Vec> frames_from_json(const json& j) {
    std::vector<Vec> out;
    for (const auto& row : j) {
        const auto v = row.get<std::vector<double>>();
        out.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return out;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const std::string& out, const std::string& config_path, const std::string& log_path,
                 PretrainConfig pc, bool steps_set, bool batch_set, bool lr_set, bool seed_set) {
    DenoiserConfig dc;
    if (!config_path.empty()) {
        const json j = read_json_file(config_path);
        const PretrainConfig file = j.value("pretrain", json::object()).get<PretrainConfig>();
        if (!steps_set) pc.steps = file.steps;
        if (!batch_set) pc.batch = file.batch;
        if (!lr_set) pc.lr = file.lr;
        if (!seed_set) pc.seed = file.seed;
        pc.sequence_frames = file.sequence_frames;
        pc.single_frame_prob = file.single_frame_prob;
        pc.max_grad_norm = file.max_grad_norm;
        pc.validation_samples = file.validation_samples;
        pc.cache = file.cache;
        if (j.contains("model")) dc = j.at("model").get<DenoiserConfig>();
    }
    pc.cache.window_frames = dc.num_steps;
    pc.validate();
    Denoiser model(dc, pc.seed);
    std::ofstream log = open_log(log_path.empty() ? (fs::path(out) / "pretrain.jsonl").string() : log_path);
    const PretrainResult r = pretrain(model, World(), pc, &log);
    save_checkpoint(out, Checkpoint{dc, model.params(), true, {{"pretrain", pc}}});
    std::cout << json{{"checkpoint", out},
                      {"initial_validation_loss", r.initial_validation_loss},
                      {"final_validation_loss", r.final_validation_loss}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_distill(const std::string& checkpoint, const std::string& out, const std::string& log_path,
                TrainConfig tc) {
    Checkpoint ck = open_checkpoint(checkpoint);
    tc.cache.window_frames = ck.config.num_steps;
    tc.validate();
    Denoiser gen(ck.config, ck.params);
    Denoiser fake(ck.config, tc.seed + 1);
    const World world;
    std::ofstream log = open_log(log_path.empty() ? (fs::path(out) / "distill.jsonl").string() : log_path);
    if (!tc.fake_residual) {
        pretrain_fake_score(fake, world, 1000, 8, tc.w_eval, 1e-3, tc.dmd_t_low, tc.dmd_t_high, tc.seed + 2, &log);
    }
    const DistillResult r = distill(gen, fake, world, tc, &log);
    json meta = ck.metadata;
    meta["distill"] = tc;
    save_checkpoint(out, Checkpoint{ck.config, gen.params(), ck.pretrained, meta});
    std::cout << json{{"checkpoint", out},
                      {"generator_steps", r.generator_steps},
                      {"fake_updates", r.fake_updates},
                      {"sf_steps", r.sf_steps},
                      {"rf_steps", r.rf_steps}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_generate(const StreamFlags& f, const std::string& out, const std::string& format) {
    const Checkpoint ck = open_checkpoint(f.checkpoint);
    const Denoiser model(ck.config, ck.params);
    const std::vector<Vec> frames = run_stream(model, f);
    if (format == "bin") {
        std::ofstream o(out, std::ios::binary);
        if (!o) throw FileError("cannot write " + out);
        for (const auto& x : frames) {
            for (Eigen::Index k = 0; k < x.size(); ++k) {
                const float v = static_cast<float>(x[k]);
                o.write(reinterpret_cast<const char*>(&v), sizeof v);
            }
        }
    } else {
        json switches = json::array();
        for (const auto& [frame, label] : parse_switches(f.switches)) switches.push_back({frame, label});
        const json j = {{"mode", f.mode},
                        {"seed", f.seed},
                        {"condition", f.condition},
                        {"switches", switches},
                        {"frame_dim", ck.config.frame_dim},
                        {"sink_frames", f.sink_frames},
                        {"temporal_frames", f.temporal_frames},
                        {"frames", frames_to_json(frames)}};
        std::ofstream o(out);
        if (!o) throw FileError("cannot write " + out);
        o << j.dump() << "\n";
    }
    return 0;
}

int cmd_bench(const StreamFlags& f, const std::string& which, long warm, long measure) {
    const Checkpoint ck = open_checkpoint(f.checkpoint);
    const Denoiser model(ck.config, ck.params);
    const StreamingEngine engine(model, f.engine(model));
    json out = json::array();
    for (const char* m : {"rolling", "sf"}) {
        if (which != "both" && which != m) continue;
        out.push_back(latency_bench(engine, stream_mode_from_string(m), warm, measure, f.condition, f.seed));
    }
    std::cout << (out.size() == 1 ? out[0] : out).dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& rollout, StreamFlags f, bool generate, long segments, int frame_dim,
             bool condition_set, long pool_seeds) {
    const World world;
    std::vector<std::vector<Vec>> rollouts;
    int condition = f.condition;
    if (generate) {
        const Checkpoint ck = open_checkpoint(f.checkpoint);
        const Denoiser model(ck.config, ck.params);
        for (long s = 0; s < pool_seeds; ++s) {
            StreamFlags g = f;
            g.seed = f.seed + static_cast<std::uint64_t>(s);
            rollouts.push_back(run_stream(model, g));
        }
    } else if (fs::path(rollout).extension() == ".bin") {
        if (frame_dim <= 0) throw DomainError("--frame-dim is required for raw rollouts");
        std::ifstream in(rollout, std::ios::binary);
        if (!in) throw FileError("cannot open " + rollout);
        const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (bytes.size() % (sizeof(float) * static_cast<std::size_t>(frame_dim)) != 0) {
            throw DomainError("raw rollout size is not a multiple of the frame size");
        }
        std::vector<float> values(bytes.size() / sizeof(float));
        std::memcpy(values.data(), bytes.data(), bytes.size());
        std::vector<Vec> frames;
        for (std::size_t k = 0; k < values.size(); k += static_cast<std::size_t>(frame_dim)) {
            frames.push_back(Eigen::Map<const Eigen::VectorXf>(&values[k], frame_dim).cast<double>());
        }
        rollouts.push_back(std::move(frames));
    } else {
        const json j = read_json_file(rollout);
        rollouts.push_back(frames_from_json(j.at("frames")));
        if (!condition_set) condition = j.value("condition", 0);
        if (j.contains("switches") && !j.at("switches").empty() && !condition_set) {
            condition = j.at("switches").back().at(1).get<int>();
        }
    }
    const Regime& regime = world.regime(condition);
    const DriftReport r = rollouts.size() == 1 ? drift_report(rollouts[0], regime, segments)
                                               : pooled_drift_report(rollouts, regime, segments);
    std::cout << json(r).dump(2) << "\n";
    return 0;
}

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

int cmd_serve(const ServiceConfig& config) {
    Service service(config);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    const int port = service.start();
    std::cerr << "serving on http://" << config.host << ":" << port << "\n";
    while (g_stop == 0) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rollforge: rolling-window streaming diffusion on a toy latent world"};
    app.require_subcommand(1);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "teacher-forced flow-matching pretraining");
    std::string pre_out, pre_config, pre_log;
    PretrainConfig pc;
    pre->add_option("-o,--out", pre_out, "checkpoint directory to write")->required();
    pre->add_option("--config", pre_config, "JSON file with optional 'model' and 'pretrain' objects");
    pre->add_option("--log", pre_log, "JSON-lines log (default OUT/pretrain.jsonl)");
    auto* pre_steps = pre->add_option("--steps", pc.steps);
    auto* pre_batch = pre->add_option("--batch", pc.batch);
    auto* pre_lr = pre->add_option("--lr", pc.lr);
    auto* pre_seed = pre->add_option("--seed", pc.seed);

    // distill
    auto* dis = app.add_subcommand("distill", "distribution-matching distillation");
    std::string dis_ckpt, dis_out, dis_config, dis_log, dis_strategy;
    TrainConfig tc;
    dis->add_option("-c,--checkpoint", dis_ckpt, "pretrained checkpoint")->required();
    dis->add_option("-o,--out", dis_out, "checkpoint directory to write")->required();
    dis->add_option("--config", dis_config, "TrainConfig JSON file");
    dis->add_option("--log", dis_log, "JSON-lines log (default OUT/distill.jsonl)");
    auto* dis_steps = dis->add_option("--steps", tc.steps);
    auto* dis_strat = dis->add_option("--strategy", dis_strategy, "mixed, sf_only or rf_only")
                          ->check(CLI::IsMember({"mixed", "sf_only", "rf_only"}));
    auto* dis_lrg = dis->add_option("--lr-gen", tc.lr_generator);
    auto* dis_lrf = dis->add_option("--lr-fake", tc.lr_fake);
    auto* dis_fu = dis->add_option("--fake-updates", tc.fake_updates_per_gen);
    auto* dis_seed = dis->add_option("--seed", tc.seed);

    // generate
    auto* gen = app.add_subcommand("generate", "write a rollout file");
    StreamFlags gen_flags;
    std::string gen_out, gen_format = "json";
    gen_flags.add(gen);
    gen->add_option("-o,--out", gen_out, "output file")->required();
    gen->add_option("--format", gen_format, "json or bin (raw little-endian float32)")
        ->check(CLI::IsMember({"json", "bin"}));

    // bench
    auto* ben = app.add_subcommand("bench", "steady-state latency and throughput");
    StreamFlags ben_flags;
    std::string ben_mode = "both";
    long warm = 32, measure = 256;
    ben_flags.add(ben, false);
    ben->remove_option(ben->get_option("--mode"));
    ben->add_option("--mode", ben_mode, "rolling, sf or both")->check(CLI::IsMember({"rolling", "sf", "both"}));
    ben->add_option("--warm", warm, "unmeasured frames");
    ben->add_option("--measure", measure, "measured frames (>= 64)");

    // eval
    auto* ev = app.add_subcommand("eval", "drift report of a rollout file or a fresh rollout");
    StreamFlags ev_flags;
    std::string ev_rollout;
    long segments = 256;
    int frame_dim = 0;
    long pool = 1;
    ev->add_option("-r,--rollout", ev_rollout, "rollout file (.json, or .bin with --frame-dim)");
    ev->add_option("-c,--checkpoint", ev_flags.checkpoint, "generate the rollout from this checkpoint instead");
    ev->add_option("--mode", ev_flags.mode)->check(CLI::IsMember({"rolling", "sf"}));
    ev->add_option("-n,--frames", ev_flags.frames)->check(CLI::PositiveNumber);
    ev->add_option("--seed", ev_flags.seed);
    auto* ev_cond = ev->add_option("--condition", ev_flags.condition, "regime the rollout is compared with");
    ev->add_option("--sink-frames", ev_flags.sink_frames)->check(CLI::NonNegativeNumber);
    ev->add_option("--temporal-frames", ev_flags.temporal_frames)->check(CLI::NonNegativeNumber);
    ev->add_option("--segments", segments, "segment length in frames");
    ev->add_option("--frame-dim", frame_dim);
    ev->add_option("--pool-seeds", pool, "pool this many consecutive seeds (with --checkpoint)")
        ->check(CLI::PositiveNumber);

    // serve
    auto* srv = app.add_subcommand("serve", "HTTP streaming service");
    ServiceConfig sc;
    bool no_pacing = false;
    srv->add_option("-c,--checkpoint", sc.default_checkpoint, "default checkpoint for new streams");
    srv->add_option("--host", sc.host);
    srv->add_option("--port", sc.port);
    srv->add_option("--fps", sc.fps, "pacing rate")->check(CLI::PositiveNumber);
    srv->add_flag("--no-pacing", no_pacing, "emit frames as fast as they are produced");
    srv->add_option("--queue", sc.queue_capacity, "per-stream event queue length");
    srv->add_option("--static-dir", sc.static_dir, "serve a UI bundle at /");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pre) {
            return cmd_pretrain(pre_out, pre_config, pre_log, pc, pre_steps->count() > 0, pre_batch->count() > 0,
                                pre_lr->count() > 0, pre_seed->count() > 0);
        }
        if (*dis) {
            TrainConfig base = dis_config.empty() ? TrainConfig{} : read_json_file(dis_config).get<TrainConfig>();
            if (dis_steps->count()) base.steps = tc.steps;
            if (dis_strat->count()) base.strategy = train_strategy_from_string(dis_strategy);
            if (dis_lrg->count()) base.lr_generator = tc.lr_generator;
            if (dis_lrf->count()) base.lr_fake = tc.lr_fake;
            if (dis_fu->count()) base.fake_updates_per_gen = tc.fake_updates_per_gen;
            if (dis_seed->count()) base.seed = tc.seed;
            return cmd_distill(dis_ckpt, dis_out, dis_log, base);
        }
        if (*gen) return cmd_generate(gen_flags, gen_out, gen_format);
        if (*ben) return cmd_bench(ben_flags, ben_mode, warm, measure);
        if (*ev) {
            if (!ev_rollout.empty() && !ev_flags.checkpoint.empty()) {
                throw DomainError("give either --rollout or --checkpoint, not both");
            }
            if (ev_rollout.empty() && ev_flags.checkpoint.empty()) {
                throw DomainError("give --rollout or --checkpoint");
            }
            return cmd_eval(ev_rollout, ev_flags, !ev_flags.checkpoint.empty(), segments, frame_dim,
                            ev_cond->count() > 0, pool);
        }
        if (*srv) {
            sc.pacing = !no_pacing;
            return cmd_serve(sc);
        }
    } catch (const FileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
