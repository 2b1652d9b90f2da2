#include "cov3d/checkpoint.hpp"

#include "cov3d/common.hpp"
#include "cov3d/io.hpp"

namespace cov3d {

namespace fs = std::filesystem;

void CheckpointMeta::set_config(const nlohmann::json& cfg) {
    config = cfg;
    config_digest = digest::sha256_hex(cfg.dump());
    config_describe = "cfg-" + config_digest.substr(0, 12);
}

nlohmann::json CheckpointMeta::to_json() const {
    return {{"architecture", architecture}, {"task", task},
            {"seed", seed},                 {"epoch", epoch},
            {"config", config},             {"config_digest", config_digest},
            {"config_describe", config_describe}, {"final_loss", final_loss},
            {"extras", extras}};
}

CheckpointMeta CheckpointMeta::from_json(const nlohmann::json& j) {
    try {
        CheckpointMeta m;
        m.architecture = j.at("architecture");
        m.task = j.at("task").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.epoch = j.at("epoch").get<int>();
        m.config = j.at("config");
        m.config_digest = j.at("config_digest").get<std::string>();
        m.config_describe = j.at("config_describe").get<std::string>();
        m.final_loss = j.at("final_loss").get<double>();
        m.extras = j.value("extras", nlohmann::json::object());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint", std::string("malformed metadata: ") + e.what());
    }
}

fs::path checkpoint_stem(const fs::path& path) {
    if (path.extension() == ".pt" || path.extension() == ".json") return fs::path(path).replace_extension();
    return path;
}

namespace {
fs::path with_suffix(const fs::path& stem, const char* suffix) { return fs::path(checkpoint_stem(stem).string() + suffix); }
}  // namespace

void save_checkpoint(torch::nn::Module& module, const CheckpointMeta& meta, const fs::path& stem) {
    const fs::path pt = with_suffix(stem, ".pt");
    if (pt.has_parent_path()) fs::create_directories(pt.parent_path());
    const fs::path tmp = pt.string() + ".tmp";
    try {
        torch::serialize::OutputArchive archive;
        module.save(archive);
        archive.save_to(tmp.string());
    } catch (const c10::Error& e) {
        throw Error("checkpoint", "cannot write '" + pt.string() + "': " + e.what_without_backtrace());
    }
    fs::rename(tmp, pt);
    io::write_text_atomic(with_suffix(stem, ".json"), meta.to_json().dump(2) + "\n");
}

CheckpointMeta read_checkpoint_meta(const fs::path& stem) {
    const fs::path js = with_suffix(stem, ".json");
    if (!fs::exists(js)) throw Error("checkpoint", "missing checkpoint metadata '" + js.string() + "'");
    try {
        return CheckpointMeta::from_json(nlohmann::json::parse(io::read_text(js)));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("checkpoint", "'" + js.string() + "': " + e.what());
    }
}

void load_checkpoint_weights(torch::nn::Module& module, const fs::path& stem) {
    const fs::path pt = with_suffix(stem, ".pt");
    if (!fs::exists(pt)) throw Error("checkpoint", "missing checkpoint weights '" + pt.string() + "'");
    try {
        torch::serialize::InputArchive archive;
        archive.load_from(pt.string());
        module.load(archive);
    } catch (const c10::Error& e) {
        throw Error("checkpoint", "cannot load '" + pt.string() + "': " + e.what_without_backtrace());
    }
}

bool checkpoint_exists(const fs::path& stem) {
    return fs::exists(with_suffix(stem, ".pt")) && fs::exists(with_suffix(stem, ".json"));
}

}  // namespace cov3d
