#pragma once

// Checkpoints: a JSON manifest plus one little-endian float32 payload per
// parameter tensor. Values round-trip exactly against evaluation because
// evaluation always runs on float32-rounded parameters.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "atd/common.hpp"
#include "atd/params.hpp"

namespace atd::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written little-endian");

inline constexpr int kManifestVersion = 1;

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string config_hash(const nlohmann::json& config) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config.dump())));
    return buf;
}

inline void save_checkpoint(const std::string& dir, const nn::ParamStore& store,
                            const nlohmann::json& config, std::int64_t step) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, "checkpoint: cannot create ", dir, ": ", ec.message());

    nlohmann::json manifest{{"version", kManifestVersion},
                            {"step", step},
                            {"adam_step", store.adam_step_count()},
                            {"init_seed", store.init_seed()},
                            {"config", config},
                            {"config_hash", config_hash(config)}};
    nlohmann::json params = nlohmann::json::array();
    store.for_each([&](const std::string& name, const nn::Param& p) {
        const std::string file = name + ".bin";
        std::ofstream out(fs::path(dir) / file, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write " + (fs::path(dir) / file).string());
        std::vector<float> buf;
        buf.reserve(static_cast<std::size_t>(p.value.size()));
        for (Eigen::Index i = 0; i < p.value.rows(); ++i)
            for (Eigen::Index j = 0; j < p.value.cols(); ++j)
                buf.push_back(static_cast<float>(p.value(i, j)));
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!out) throw IoError("checkpoint: short write on " + file);
        params.push_back({{"name", name},
                          {"rows", p.value.rows()},
                          {"cols", p.value.cols()},
                          {"file", file}});
    });
    manifest["params"] = params;
    std::ofstream mout(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!mout) throw IoError("checkpoint: cannot write manifest in " + dir);
    mout << manifest.dump(2) << "\n";
    if (!mout) throw IoError("checkpoint: short write on manifest");
}

/// Fills an already-registered store from a checkpoint directory. The
/// parameter sets must match exactly; shape mismatches are errors.
inline nlohmann::json load_checkpoint(const std::string& dir, nn::ParamStore& store) {
    namespace fs = std::filesystem;
    std::ifstream min(fs::path(dir) / "manifest.json");
    if (!min) throw IoError("checkpoint: cannot open manifest in " + dir);
    nlohmann::json manifest;
    try {
        min >> manifest;
        require(manifest.at("version").get<int>() == kManifestVersion,
                "checkpoint: unsupported manifest version");
        std::set<std::string> seen;
        for (const auto& entry : manifest.at("params")) {
            const auto name = entry.at("name").get<std::string>();
            const auto rows = entry.at("rows").get<Eigen::Index>();
            const auto cols = entry.at("cols").get<Eigen::Index>();
            require(store.has(name), "checkpoint: parameter ", name, " not registered");
            nn::Param& p = store.get(name);
            require(p.value.rows() == rows && p.value.cols() == cols, "checkpoint: ", name,
                    " is ", rows, "x", cols, " on disk but ", p.value.rows(), "x",
                    p.value.cols(), " in the model");
            std::ifstream in(fs::path(dir) / entry.at("file").get<std::string>(),
                             std::ios::binary);
            if (!in) throw IoError("checkpoint: missing payload for " + name);
            std::vector<float> buf(static_cast<std::size_t>(rows * cols));
            in.read(reinterpret_cast<char*>(buf.data()),
                    static_cast<std::streamsize>(buf.size() * sizeof(float)));
            if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
                throw IoError("checkpoint: truncated payload for " + name);
            std::size_t k = 0;
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) p.value(i, j) = buf[k++];
            seen.insert(name);
        }
        for (const std::string& name : store.names())
            require(seen.count(name) == 1, "checkpoint: no data for registered parameter ", name);
        store.set_adam_step_count(manifest.at("adam_step").get<std::int64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    return manifest;
}

}  // namespace atd::ckpt
