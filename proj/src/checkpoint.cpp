#include "rollforge/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <vector>

#include "rollforge/errors.hpp"

namespace rollforge {
namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "rollforge-checkpoint";
constexpr int kVersion = 1;

void put_f32_le(std::vector<char>& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float get_f32_le(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace

void round_to_f32(ParameterSet& params) {
    for (auto& p : params.params()) {
        p.value = p.value.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    }
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
    fs::create_directories(dir);
    std::vector<char> blob;
    blob.reserve(ckpt.params.num_scalars() * 4);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& p : ckpt.params.params()) {
        const size_t offset = blob.size();
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) put_f32_le(blob, static_cast<float>(p.value(r, c)));
        }
        tensors.push_back({{"name", p.name},
                           {"shape", {p.value.rows(), p.value.cols()}},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"nbytes", blob.size() - offset}});
    }
    nlohmann::json manifest = {{"format", kFormat},
                               {"version", kVersion},
                               {"config", ckpt.config},
                               {"pretrained", ckpt.pretrained},
                               {"metadata", ckpt.metadata},
                               {"weights", "weights.bin"},
                               {"tensors", tensors}};
    {
        std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
        bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!bin) throw std::runtime_error("failed to write " + (dir / "weights.bin").string());
    }
    std::ofstream js(dir / "manifest.json", std::ios::trunc);
    js << manifest.dump(2) << '\n';
    if (!js) throw std::runtime_error("failed to write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream js(manifest_path);
    if (!js) throw std::runtime_error("checkpoint manifest not found: " + manifest_path.string());
    const nlohmann::json manifest = nlohmann::json::parse(js);
    if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
        throw std::runtime_error("unsupported checkpoint format in " + manifest_path.string());
    }
    const fs::path bin_path = dir / manifest.value("weights", "weights.bin");
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint weights not found: " + bin_path.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    Checkpoint ckpt;
    ckpt.config = manifest.at("config").get<DenoiserConfig>();
    ckpt.pretrained = manifest.value("pretrained", false);
    ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& t : manifest.at("tensors")) {
        if (t.at("dtype") != "f32") throw std::runtime_error("unsupported tensor dtype");
        const auto rows = t.at("shape").at(0).get<Eigen::Index>();
        const auto cols = t.at("shape").at(1).get<Eigen::Index>();
        const auto offset = t.at("offset").get<size_t>();
        const auto nbytes = t.at("nbytes").get<size_t>();
        if (nbytes != static_cast<size_t>(rows * cols) * 4 || offset + nbytes > blob.size()) {
            throw std::runtime_error("tensor '" + t.at("name").get<std::string>() + "' out of blob bounds");
        }
        const size_t idx = ckpt.params.add(t.at("name").get<std::string>(), rows, cols);
        Mat& m = ckpt.params[idx];
        const char* p = blob.data() + offset;
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c, p += 4) m(r, c) = get_f32_le(p);
        }
    }
    return ckpt;
}

fs::path resolve_checkpoint_path(const std::string& name) {
    fs::path p(name);
    if (p.is_absolute() || fs::exists(p)) return p;
    if (const char* base = std::getenv("ROLLFORGE_CHECKPOINT_DIR"); base != nullptr && *base != '\0') {
        return fs::path(base) / p;
    }
    return p;
}

}  // namespace rollforge
