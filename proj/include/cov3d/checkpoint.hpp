#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cov3d {

/// Metadata stored next to the weights as `<stem>.json`; weights live in
/// `<stem>.pt` (a libtorch serialize archive).
struct CheckpointMeta {
    nlohmann::json architecture;
    std::string task;  // filter | seg | detect | severity
    std::uint64_t seed = 0;
    /// Epoch the weights were taken from; -1 for the initial weights.
    int epoch = -1;
    nlohmann::json config;
    std::string config_digest;    // sha256 of config.dump()
    std::string config_describe;  // "cfg-" + first 12 hex digits of the digest
    double final_loss = 0.0;
    nlohmann::json extras = nlohmann::json::object();

    /// Fills config, config_digest and config_describe.
    void set_config(const nlohmann::json& cfg);

    nlohmann::json to_json() const;
    static CheckpointMeta from_json(const nlohmann::json& j);
};

/// Accepts `x`, `x.pt` or `x.json` and returns `x`.
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);

void save_checkpoint(torch::nn::Module& module, const CheckpointMeta& meta, const std::filesystem::path& stem);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& stem);
/// Loads weights into an already constructed module of the same layout.
void load_checkpoint_weights(torch::nn::Module& module, const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);

}  // namespace cov3d
