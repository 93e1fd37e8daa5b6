#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "rollforge/denoiser.hpp"

namespace rollforge {

/// On-disk model: `manifest.json` lists every tensor (name, shape, dtype,
/// byte offset, byte length) next to `weights.bin`, a raw little-endian
/// float32 blob in manifest order with each tensor stored row-major.
struct Checkpoint {
    DenoiserConfig config;
    ParameterSet params;
    bool pretrained = false;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Rounds every parameter to the nearest float32, the precision stored on disk.
void round_to_f32(ParameterSet& params);

// Resolves `name` against ROLLFORGE_CHECKPOINT_DIR unless it is absolute or exists as given.
std::filesystem::path resolve_checkpoint_path(const std::string& name);

}  // namespace rollforge
