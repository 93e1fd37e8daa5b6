#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rollforge/engine.hpp"
#include "rollforge/metrics.hpp"
#include "rollforge/world.hpp"

namespace httplib {
class Server;
}

namespace rollforge {

struct FrameEvent {
    long frame_index = 0;
    Vec latent;
    int condition = 0;
    double emit_latency_ms = 0.0;
    // Events discarded from the queue right before this one.
    long dropped = 0;
};

void to_json(nlohmann::json& j, const FrameEvent& e);

struct SessionOptions {
    int condition = 0;
    std::uint64_t seed = 0;
    StreamMode mode = StreamMode::rolling;
    bool pacing = true;
    double fps = 16.0;
    std::size_t queue_capacity = 256;
    long drift_segment = 256;
};

/// One live generation loop on its own thread.
///
/// Frames go into a bounded queue; when the reader falls behind the oldest
/// events are discarded and the next delivered event reports how many.
class StreamSession {
public:
    StreamSession(std::string id, std::shared_ptr<const Denoiser> model, EngineConfig engine,
                  const World& world, SessionOptions options);
    ~StreamSession();
    StreamSession(const StreamSession&) = delete;
    StreamSession& operator=(const StreamSession&) = delete;

    const std::string& id() const { return id_; }

    // Waits up to `timeout` for at least one event, then drains up to `max`.
    std::vector<FrameEvent> next_events(std::chrono::milliseconds timeout, std::size_t max = 64);

    // Queues a label for the next roll. Returns k: frames up to k keep their
    // label, frames from k + 1 on carry the new one.
    long request_condition(int label);

    nlohmann::json stats() const;

    void stop();
    bool stopped() const { return stop_.load(); }
    // Stopped and nothing left to read.
    bool finished() const;

    // Single-reader guard for the event channel.
    bool try_attach_reader();
    void detach_reader();

private:
    void run();

    std::string id_;
    std::shared_ptr<const Denoiser> model_;
    StreamingEngine engine_;
    const World& world_;
    SessionOptions options_;
    std::chrono::system_clock::time_point created_at_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<FrameEvent> queue_;
    long pending_drops_ = 0;
    long dropped_total_ = 0;
    int pending_label_ = -1;
    int condition_ = 0;
    long frames_emitted_ = 0;
    bool in_progress_ = false;
    long warmup_passes_ = 0;
    long steady_denoise_passes_ = 0;
    long steady_kv_passes_ = 0;
    std::chrono::steady_clock::time_point first_emit_;
    std::chrono::steady_clock::time_point last_emit_;
    std::deque<double> recent_latency_s_;
    std::vector<Vec> head_frames_;
    std::deque<Vec> tail_frames_;
    std::string error_;

    std::atomic<bool> stop_{false};
    std::atomic<bool> reader_{false};
    std::thread thread_;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::string default_checkpoint;
    bool pacing = true;
    double fps = 16.0;
    std::size_t queue_capacity = 256;
    std::size_t max_sessions = 32;
    std::string static_dir;  // served at / when set
};

class Service {
public:
    explicit Service(ServiceConfig config, World world = World());
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and serves on a background thread; returns the bound port.
    int start();
    // Binds and serves on the calling thread until stop().
    void run();
    // Ends every session and the listener.
    void stop();

    int port() const { return port_; }

private:
    void routes();
    int bind();
    std::shared_ptr<const Denoiser> load_model(const std::string& name);
    std::shared_ptr<StreamSession> find(const std::string& id);

    ServiceConfig config_;
    World world_;
    std::unique_ptr<httplib::Server> server_;
    int port_ = -1;
    std::thread thread_;

    std::mutex mu_;
    std::map<std::string, std::shared_ptr<StreamSession>> sessions_;
    std::map<std::string, std::shared_ptr<const Denoiser>> models_;
    std::uint64_t next_id_ = 1;
    std::uint64_t id_salt_ = 0;
};

}  // namespace rollforge
