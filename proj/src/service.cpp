#include "rollforge/service.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <random>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "rollforge/checkpoint.hpp"
#include "rollforge/errors.hpp"

namespace rollforge {

using json = nlohmann::json;
using steady = std::chrono::steady_clock;

void to_json(json& j, const FrameEvent& e) {
    std::vector<double> latent(e.latent.data(), e.latent.data() + e.latent.size());
    json proj = json::array();
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, e.latent.size()); ++k) proj.push_back(e.latent[k]);
    j = {{"frame_index", e.frame_index},
         {"latent", latent},
         {"projection_2d", proj},
         {"condition", e.condition},
         {"emit_latency_ms", e.emit_latency_ms},
         {"dropped", e.dropped}};
}

// ---------------------------------------------------------------------------

StreamSession::StreamSession(std::string id, std::shared_ptr<const Denoiser> model, EngineConfig engine,
                             const World& world, SessionOptions options)
    : id_(std::move(id)),
      model_(std::move(model)),
      engine_(*model_, engine),
      world_(world),
      options_(options),
      created_at_(std::chrono::system_clock::now()),
      condition_(options.condition) {
    if (options_.queue_capacity == 0) throw DomainError("queue capacity must be positive");
    if (options_.pacing && !(options_.fps > 0.0)) throw DomainError("fps must be positive");
    if (options_.condition < 0 || options_.condition >= model_->config().num_regimes ||
        options_.condition >= world_.num_regimes()) {
        throw DomainError("unknown condition label " + std::to_string(options_.condition));
    }
    if (options_.drift_segment < 2) throw DomainError("drift segment must be at least 2");
    thread_ = std::thread([this] { run(); });
}

StreamSession::~StreamSession() {
    stop();
    if (thread_.joinable()) thread_.join();
}

void StreamSession::stop() {
    {
        std::lock_guard lk(mu_);
        stop_ = true;
    }
    cv_.notify_all();
}

bool StreamSession::finished() const {
    std::lock_guard lk(mu_);
    return stop_ && queue_.empty();
}

bool StreamSession::try_attach_reader() {
    bool expected = false;
    return reader_.compare_exchange_strong(expected, true);
}

void StreamSession::detach_reader() { reader_ = false; }

long StreamSession::request_condition(int label) {
    if (label < 0 || label >= model_->config().num_regimes || label >= world_.num_regimes()) {
        throw DomainError("unknown condition label " + std::to_string(label));
    }
    std::lock_guard lk(mu_);
    if (stop_) throw StateError("session has stopped");
    pending_label_ = label;
    // A roll already under way keeps the label it started with.
    return frames_emitted_ + (in_progress_ ? 1 : 0);
}

std::vector<FrameEvent> StreamSession::next_events(std::chrono::milliseconds timeout, std::size_t max) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return !queue_.empty() || stop_.load(); });
    std::vector<FrameEvent> out;
    while (!queue_.empty() && out.size() < max) {
        out.push_back(std::move(queue_.front()));
        queue_.pop_front();
    }
    if (!out.empty()) {
        out.front().dropped = pending_drops_;
        pending_drops_ = 0;
    }
    return out;
}

void StreamSession::run() {
    try {
        StreamState s;
        if (options_.mode == StreamMode::rolling) {
            s = engine_.start(options_.condition, options_.seed);
        } else {
            s = engine_.begin(options_.condition, options_.seed);
            s.phase = StreamPhase::steady;
        }
        {
            std::lock_guard lk(mu_);
            warmup_passes_ = s.denoise_passes;
        }
        const auto period = std::chrono::duration_cast<steady::duration>(
            std::chrono::duration<double>(options_.pacing ? 1.0 / options_.fps : 0.0));
        auto tick = steady::now();
        while (!stop_) {
            {
                std::lock_guard lk(mu_);
                if (pending_label_ >= 0) {
                    engine_.switch_condition(s, pending_label_);
                    condition_ = pending_label_;
                    pending_label_ = -1;
                }
                in_progress_ = true;
            }
            const long passes0 = s.denoise_passes;
            const long kv0 = s.kv_passes;
            const auto t0 = steady::now();
            Vec x = options_.mode == StreamMode::rolling ? engine_.roll_step(s) : engine_.sf_step(s);
            const auto t1 = steady::now();
            const double secs = std::chrono::duration<double>(t1 - t0).count();
            {
                std::lock_guard lk(mu_);
                in_progress_ = false;
                frames_emitted_ = s.frames_emitted;
                if (frames_emitted_ == 1) first_emit_ = t1;
                last_emit_ = t1;
                steady_denoise_passes_ += s.denoise_passes - passes0;
                steady_kv_passes_ += s.kv_passes - kv0;
                recent_latency_s_.push_back(secs);
                if (recent_latency_s_.size() > 256) recent_latency_s_.pop_front();
                if (static_cast<long>(head_frames_.size()) < options_.drift_segment) head_frames_.push_back(x);
                tail_frames_.push_back(x);
                if (static_cast<long>(tail_frames_.size()) > options_.drift_segment) tail_frames_.pop_front();

                if (queue_.size() >= options_.queue_capacity) {
                    queue_.pop_front();
                    ++pending_drops_;
                    ++dropped_total_;
                }
                queue_.push_back(FrameEvent{s.frames_emitted, std::move(x), s.condition, secs * 1e3, 0});
            }
            cv_.notify_all();
            if (options_.pacing) {
                tick += period;
                const auto now = steady::now();
                if (tick < now - period) tick = now;  // fell behind; do not burst
                std::unique_lock lk(mu_);
                cv_.wait_until(lk, tick, [&] { return stop_.load(); });
            }
        }
    } catch (const std::exception& e) {
        {
            std::lock_guard lk(mu_);
            error_ = e.what();
            stop_ = true;
        }
        cv_.notify_all();
    }
}

json StreamSession::stats() const {
    std::lock_guard lk(mu_);
    PerfReport perf;
    perf.mode = to_string(options_.mode);
    perf.warmup_passes = warmup_passes_;
    perf.frames = frames_emitted_;
    if (frames_emitted_ > 0) {
        perf.denoise_passes_per_frame = static_cast<double>(steady_denoise_passes_) / static_cast<double>(frames_emitted_);
        perf.kv_passes_per_frame = static_cast<double>(steady_kv_passes_) / static_cast<double>(frames_emitted_);
    }
    if (!recent_latency_s_.empty()) {
        std::vector<double> lat(recent_latency_s_.begin(), recent_latency_s_.end());
        std::nth_element(lat.begin(), lat.begin() + static_cast<long>(lat.size() / 2), lat.end());
        perf.steady_latency_s = lat[lat.size() / 2];
    }
    if (frames_emitted_ > 1) {
        const double span = std::chrono::duration<double>(last_emit_ - first_emit_).count();
        if (span > 0.0) perf.steady_fps = static_cast<double>(frames_emitted_ - 1) / span;
    }

    json drift = nullptr;
    // Segments shrink until the stream is long enough to keep them apart.
    const long seg = std::min<long>(options_.drift_segment, frames_emitted_ / 2);
    if (seg >= 2) {
        std::vector<Vec> rollout(head_frames_.begin(), head_frames_.begin() + seg);
        rollout.insert(rollout.end(), tail_frames_.end() - seg, tail_frames_.end());
        DriftReport r = drift_report(rollout, world_.regime(condition_), seg);
        r.segments = {{0, seg}, {frames_emitted_ - seg, seg}};
        drift = r;
    }

    const auto created = std::chrono::duration_cast<std::chrono::milliseconds>(created_at_.time_since_epoch());
    json session = {{"id", id_},
                    {"created_at_ms", created.count()},
                    {"frames_emitted", frames_emitted_},
                    {"condition", condition_},
                    {"mode", to_string(options_.mode)},
                    {"seed", options_.seed},
                    {"dropped_total", dropped_total_},
                    {"queued", queue_.size()},
                    {"running", !stop_.load()}};
    if (!error_.empty()) session["error"] = error_;
    return {{"session", session}, {"perf", perf}, {"drift", drift}};
}

// ---------------------------------------------------------------------------

namespace {

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) {
    reply(res, status, json{{"error", message}});
}

// Parses a JSON object body; empty bodies count as {}.
bool parse_object(const httplib::Request& req, httplib::Response& res, json& out) {
    if (req.body.empty()) {
        out = json::object();
        return true;
    }
    out = json::parse(req.body, nullptr, false);
    if (out.is_discarded() || !out.is_object()) {
        fail(res, 400, "body must be a JSON object");
        return false;
    }
    return true;
}

std::string sse_frame(const FrameEvent& e) {
    return "event: frame\nid: " + std::to_string(e.frame_index) + "\ndata: " + json(e).dump() + "\n\n";
}

}  // namespace

Service::Service(ServiceConfig config, World world)
    : config_(std::move(config)), world_(std::move(world)), server_(std::make_unique<httplib::Server>()) {
    std::random_device rd;
    id_salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    routes();
}

Service::~Service() { stop(); }

std::shared_ptr<const Denoiser> Service::load_model(const std::string& name) {
    const auto path = resolve_checkpoint_path(name);
    const std::string key = std::filesystem::weakly_canonical(path).string();
    std::lock_guard lk(mu_);
    if (auto it = models_.find(key); it != models_.end()) return it->second;
    Checkpoint ck = load_checkpoint(path);
    if (!ck.pretrained) std::cerr << "warning: checkpoint " << key << " is not pretrained\n";
    auto model = std::make_shared<const Denoiser>(ck.config, std::move(ck.params));
    models_.emplace(key, model);
    return model;
}

std::shared_ptr<StreamSession> Service::find(const std::string& id) {
    std::lock_guard lk(mu_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

void Service::routes() {
    auto& srv = *server_;
    srv.set_keep_alive_timeout(1);
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            fail(res, 500, e.what());
        }
    });

    srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });

    srv.Get("/streams", [this](const httplib::Request&, httplib::Response& res) {
        json ids = json::array();
        std::lock_guard lk(mu_);
        for (const auto& [id, s] : sessions_) ids.push_back(id);
        reply(res, 200, {{"streams", ids}});
    });

    srv.Post("/streams", [this](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (!parse_object(req, res, body)) return;
        SessionOptions opt;
        opt.pacing = config_.pacing;
        opt.fps = config_.fps;
        opt.queue_capacity = config_.queue_capacity;
        std::string checkpoint = config_.default_checkpoint;
        CacheConfig cache;
        try {
            if (body.contains("checkpoint")) checkpoint = body.at("checkpoint").get<std::string>();
            if (body.contains("condition")) opt.condition = body.at("condition").get<int>();
            if (body.contains("seed")) opt.seed = body.at("seed").get<std::uint64_t>();
            if (body.contains("mode")) opt.mode = stream_mode_from_string(body.at("mode").get<std::string>());
            if (body.contains("fps")) opt.fps = body.at("fps").get<double>();
            if (body.contains("pacing")) opt.pacing = body.at("pacing").get<bool>();
            if (body.contains("sink_frames")) cache.global_frames = body.at("sink_frames").get<int>();
            if (body.contains("temporal_frames")) cache.temporal_frames = body.at("temporal_frames").get<int>();
        } catch (const json::exception& e) {
            return fail(res, 400, std::string("malformed field: ") + e.what());
        } catch (const DomainError& e) {
            return fail(res, 400, e.what());
        }
        if (checkpoint.empty()) return fail(res, 400, "no checkpoint given and no default configured");
        if (!std::filesystem::exists(resolve_checkpoint_path(checkpoint))) {
            return fail(res, 404, "checkpoint not found: " + checkpoint);
        }
        std::shared_ptr<const Denoiser> model;
        try {
            model = load_model(checkpoint);
        } catch (const std::exception& e) {
            return fail(res, 422, std::string("cannot load checkpoint: ") + e.what());
        }
        if (opt.condition < 0 || opt.condition >= model->config().num_regimes ||
            opt.condition >= world_.num_regimes()) {
            return fail(res, 422, "condition label out of range");
        }
        cache.window_frames = model->schedule().num_steps();
        std::string id;
        {
            std::lock_guard lk(mu_);
            if (sessions_.size() >= config_.max_sessions) return fail(res, 503, "too many sessions");
            char buf[40];
            std::snprintf(buf, sizeof buf, "%04llx%012llx", static_cast<unsigned long long>(next_id_++),
                          static_cast<unsigned long long>(id_salt_ & 0xffffffffffffULL));
            id = buf;
        }
        std::shared_ptr<StreamSession> session;
        try {
            session = std::make_shared<StreamSession>(id, model, EngineConfig{cache}, world_, opt);
        } catch (const DomainError& e) {
            return fail(res, 422, e.what());
        }
        {
            std::lock_guard lk(mu_);
            sessions_.emplace(id, session);
        }
        reply(res, 201,
              {{"id", id},
               {"frame_dim", model->config().frame_dim},
               {"num_steps", model->schedule().num_steps()},
               {"num_regimes", model->config().num_regimes}});
    });

    srv.Get("/streams/:id/events", [this](const httplib::Request& req, httplib::Response& res) {
        auto session = find(req.path_params.at("id"));
        if (!session) return fail(res, 404, "unknown stream");
        if (!session->try_attach_reader()) return fail(res, 409, "stream already has a reader");
        res.set_header("Cache-Control", "no-cache");
        res.set_header("X-Accel-Buffering", "no");
        res.set_chunked_content_provider(
            "text/event-stream",
            [session](std::size_t, httplib::DataSink& sink) {
                for (const auto& e : session->next_events(std::chrono::milliseconds(100))) {
                    const std::string chunk = sse_frame(e);
                    if (!sink.write(chunk.data(), chunk.size())) return false;
                }
                if (session->finished()) sink.done();
                return true;
            },
            [session](bool) { session->detach_reader(); });
    });

    srv.Post("/streams/:id/condition", [this](const httplib::Request& req, httplib::Response& res) {
        auto session = find(req.path_params.at("id"));
        if (!session) return fail(res, 404, "unknown stream");
        json body;
        if (!parse_object(req, res, body)) return;
        if (!body.contains("label") || !body.at("label").is_number_integer()) {
            return fail(res, 400, "body needs an integer 'label'");
        }
        const int label = body.at("label").get<int>();
        try {
            const long k = session->request_condition(label);
            reply(res, 200, {{"acknowledged", true}, {"label", label}, {"frame_index", k}});
        } catch (const DomainError& e) {
            fail(res, 422, e.what());
        } catch (const StateError& e) {
            fail(res, 409, e.what());
        }
    });

    srv.Get("/streams/:id/stats", [this](const httplib::Request& req, httplib::Response& res) {
        auto session = find(req.path_params.at("id"));
        if (!session) return fail(res, 404, "unknown stream");
        reply(res, 200, session->stats());
    });

    srv.Delete("/streams/:id", [this](const httplib::Request& req, httplib::Response& res) {
        std::shared_ptr<StreamSession> session;
        {
            std::lock_guard lk(mu_);
            const auto it = sessions_.find(req.path_params.at("id"));
            if (it == sessions_.end()) return fail(res, 404, "unknown stream");
            session = it->second;
            sessions_.erase(it);
        }
        session->stop();
        reply(res, 200, {{"id", session->id()}, {"stopped", true}});
    });

    if (!config_.static_dir.empty() && !srv.set_mount_point("/", config_.static_dir)) {
        throw ContractError("static directory not found: " + config_.static_dir);
    }
}

int Service::bind() {
    if (port_ >= 0) return port_;
    if (config_.port == 0) {
        port_ = server_->bind_to_any_port(config_.host);
    } else {
        port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
    }
    if (port_ < 0) throw ContractError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
    return port_;
}

int Service::start() {
    const int p = bind();
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return p;
}

void Service::run() {
    bind();
    server_->listen_after_bind();
}

void Service::stop() {
    std::map<std::string, std::shared_ptr<StreamSession>> sessions;
    {
        std::lock_guard lk(mu_);
        sessions.swap(sessions_);
    }
    for (auto& [id, s] : sessions) s->stop();
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace rollforge
