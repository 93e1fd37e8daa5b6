#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "rollforge/checkpoint.hpp"
#include "rollforge/engine.hpp"
#include "rollforge/errors.hpp"
#include "rollforge/metrics.hpp"
#include "rollforge/training.hpp"

namespace py = pybind11;
using namespace rollforge;
using json = nlohmann::json;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix stack(const std::vector<Vec>& frames) {
    if (frames.empty()) return RowMatrix(0, 0);
    RowMatrix out(static_cast<Eigen::Index>(frames.size()), frames.front().size());
    for (size_t k = 0; k < frames.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = frames[k].transpose();
    return out;
}

std::vector<Vec> unstack(const RowMatrix& m) {
    std::vector<Vec> out;
    out.reserve(static_cast<size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).transpose());
    return out;
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
    if (o.is_none()) return json::object();
    return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

EngineConfig engine_config(const Denoiser& m, int sink_frames, int temporal_frames) {
    return EngineConfig{CacheConfig{sink_frames, temporal_frames, m.schedule().num_steps()}};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Rolling-window streaming diffusion on a toy latent world";

    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
    py::register_exception<ResourceError>(m, "ResourceError", PyExc_MemoryError);

    // schedule
    m.def("shift_timestep", &shift_timestep, py::arg("t"), py::arg("k"));
    m.def("uniform_schedule", &uniform_schedule, py::arg("num_steps"));
    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def(py::init<int, double>(), py::arg("num_steps") = 5, py::arg("shift") = 5.0)
        .def_property_readonly("levels", &NoiseSchedule::levels)
        .def_property_readonly("num_steps", &NoiseSchedule::num_steps)
        .def("level", &NoiseSchedule::level)
        .def("sigma", &NoiseSchedule::sigma)
        .def("forward_diffuse", &NoiseSchedule::forward_diffuse, py::arg("x"), py::arg("t"), py::arg("noise"))
        .def("data_prediction", &NoiseSchedule::data_prediction)
        .def("posterior_score", &NoiseSchedule::posterior_score);

    // world
    py::class_<Regime>(m, "Regime")
        .def_readonly("label", &Regime::label)
        .def_readonly("rotation_angle", &Regime::rotation_angle)
        .def_readonly("A", &Regime::A)
        .def_readonly("Q", &Regime::Q)
        .def_readonly("sigma0", &Regime::sigma0)
        .def_readonly("sigma_inf", &Regime::sigma_inf);
    py::class_<World>(m, "World")
        .def(py::init<>())
        .def_property_readonly("dim", &World::dim)
        .def_property_readonly("num_regimes", &World::num_regimes)
        .def("regime", &World::regime, py::return_value_policy::reference_internal);
    m.def(
        "sample_sequence",
        [](const Regime& r, int n, std::uint64_t seed) { return stack(sample_sequence(r, n, seed)); },
        py::arg("regime"), py::arg("num_frames"), py::arg("seed"));
    m.def(
        "data_score",
        [](const Regime& r, const Vec& z, double t, const NoiseSchedule& s) {
            const auto d = r.dim();
            if (z.size() % d != 0) throw DomainError("z length must be a multiple of the frame dimension");
            return analytic_data_score(z, t, joint_gaussian(r, static_cast<int>(z.size() / d)), s);
        },
        py::arg("regime"), py::arg("z"), py::arg("t"), py::arg("schedule") = NoiseSchedule());

    // model
    py::class_<Denoiser>(m, "Denoiser")
        .def(py::init([](const py::object& config, std::uint64_t seed) {
                 return Denoiser(from_py(config).get<DenoiserConfig>(), seed);
             }),
             py::arg("config") = py::none(), py::arg("seed") = 0)
        .def_static(
            "load",
            [](const std::string& path) {
                Checkpoint ck = load_checkpoint(resolve_checkpoint_path(path));
                return Denoiser(ck.config, std::move(ck.params));
            },
            py::arg("path"))
        .def(
            "save",
            [](const Denoiser& d, const std::string& path, bool pretrained) {
                save_checkpoint(path, Checkpoint{d.config(), d.params(), pretrained, json::object()});
            },
            py::arg("path"), py::arg("pretrained") = true)
        .def_property_readonly("config", [](const Denoiser& d) { return to_py(json(d.config())); })
        .def_property_readonly("num_parameters", [](const Denoiser& d) {
            long n = 0;
            for (size_t k = 0; k < d.params().size(); ++k) n += static_cast<long>(d.params()[k].size());
            return n;
        });

    // engine
    m.def(
        "generate",
        [](const Denoiser& model, long frames, int condition, std::uint64_t seed, const std::string& mode,
           int sink_frames, int temporal_frames, const ConditionScript& switches) {
            const StreamingEngine e(model, engine_config(model, sink_frames, temporal_frames));
            py::gil_scoped_release release;
            return stack(stream_mode_from_string(mode) == StreamMode::rolling
                             ? e.generate(frames, condition, seed, switches)
                             : e.sf_generate(frames, condition, seed, switches));
        },
        py::arg("model"), py::arg("frames"), py::arg("condition") = 0, py::arg("seed") = 0,
        py::arg("mode") = "rolling", py::arg("sink_frames") = 1, py::arg("temporal_frames") = 1,
        py::arg("switches") = ConditionScript{});

    // training
    m.def("gradient_window_starts", &gradient_window_starts, py::arg("num_frames"), py::arg("num_steps"),
          py::arg("j"));
    m.def(
        "pretrain",
        [](Denoiser& model, const py::object& config) {
            PretrainConfig pc = from_py(config).get<PretrainConfig>();
            pc.cache.window_frames = model.schedule().num_steps();
            py::gil_scoped_release release;
            const PretrainResult r = pretrain(model, World(), pc);
            return std::make_pair(r.initial_validation_loss, r.final_validation_loss);
        },
        py::arg("model"), py::arg("config") = py::none(),
        "Trains in place; returns (initial, final) validation loss.");
    m.def(
        "distill",
        [](Denoiser& generator, const py::object& config, std::uint64_t fake_seed) {
            TrainConfig tc = from_py(config).get<TrainConfig>();
            tc.cache.window_frames = generator.schedule().num_steps();
            Denoiser fake(generator.config(), fake_seed);
            py::gil_scoped_release release;
            const DistillResult r = distill(generator, fake, World(), tc);
            return json{{"generator_steps", r.generator_steps},
                        {"fake_updates", r.fake_updates},
                        {"sf_steps", r.sf_steps},
                        {"rf_steps", r.rf_steps}}
                .dump();
        },
        py::arg("generator"), py::arg("config") = py::none(), py::arg("fake_seed") = 1,
        "Distills in place; returns a JSON summary string.");

    // metrics
    m.def("frechet_gaussian", &frechet_gaussian, py::arg("mu1"), py::arg("cov1"), py::arg("mu2"), py::arg("cov2"));
    m.def(
        "drift_report",
        [](const RowMatrix& rollout, const Regime& regime, long seg_len) {
            return to_py(json(drift_report(unstack(rollout), regime, seg_len)));
        },
        py::arg("rollout"), py::arg("regime"), py::arg("seg_len") = 256);
    m.def(
        "pooled_drift_report",
        [](const std::vector<RowMatrix>& rollouts, const Regime& regime, long seg_len) {
            std::vector<std::vector<Vec>> rs;
            for (const auto& r : rollouts) rs.push_back(unstack(r));
            return to_py(json(pooled_drift_report(rs, regime, seg_len)));
        },
        py::arg("rollouts"), py::arg("regime"), py::arg("seg_len") = 256);
    m.def(
        "latency_bench",
        [](const Denoiser& model, const std::string& mode, long warm, long measure) {
            const StreamingEngine e(model, engine_config(model, 1, 1));
            return to_py(json(latency_bench(e, stream_mode_from_string(mode), warm, measure)));
        },
        py::arg("model"), py::arg("mode") = "rolling", py::arg("warm_frames") = 32,
        py::arg("measure_frames") = 256);
}
