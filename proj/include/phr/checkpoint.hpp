#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/bundle.hpp"
#include "phr/hash.hpp"

namespace phr {

// Checkpoint container, version 1:
//   bytes 0..7   magic "PHRCKPT1"
//   bytes 8..11  u32 header length H
//   bytes 12..   H bytes of JSON (stage, hashes, bundle config, freeze flags,
//                tensor directory sorted by name)
//   then         raw float32 little-endian tensor data, directory order
// Writes are atomic (temp file + rename).

namespace detail {
constexpr char kCkptMagic[8] = {'P', 'H', 'R', 'C', 'K', 'P', 'T', '1'};
}

inline nlohmann::json bundle_config_json(const BundleConfig& c) {
    return {
        {"in_channels", c.unet.in_channels},   {"out_channels", c.unet.out_channels},
        {"base_width", c.unet.base_width},     {"txt_dim", c.unet.txt_dim},
        {"time_dim", c.unet.time_dim},         {"gn_groups", c.unet.gn_groups},
        {"T", c.T},                            {"schedule", to_string(c.schedule_kind)},
        {"autoencoder", c.autoencoder == AutoencoderKind::identity ? "identity" : "external_sd"},
        {"latent_channels", c.latent_channels},{"downscale_factor", c.downscale_factor},
        {"vocab_size", c.vocab_size},          {"init_seed", c.init_seed},
    };
}

inline BundleConfig bundle_config_from_json(const nlohmann::json& j) {
    BundleConfig c;
    c.unet.in_channels = j.at("in_channels").get<i64>();
    c.unet.out_channels = j.at("out_channels").get<i64>();
    c.unet.base_width = j.at("base_width").get<i64>();
    c.unet.txt_dim = j.at("txt_dim").get<i64>();
    c.unet.time_dim = j.at("time_dim").get<i64>();
    c.unet.gn_groups = j.at("gn_groups").get<i64>();
    c.T = j.at("T").get<i64>();
    c.schedule_kind = schedule_kind_from_string(j.at("schedule").get<std::string>());
    c.autoencoder = j.at("autoencoder").get<std::string>() == "identity"
                        ? AutoencoderKind::identity
                        : AutoencoderKind::external_sd;
    c.latent_channels = j.at("latent_channels").get<i64>();
    c.downscale_factor = j.at("downscale_factor").get<i64>();
    c.vocab_size = j.at("vocab_size").get<i64>();
    c.init_seed = j.at("init_seed").get<u64>();
    return c;
}

struct CheckpointInfo {
    StageTag stage = StageTag::none;
    std::string config_hash;
    std::string parent_hash;  // stage-2 embeds its stage-1 parent's hash
};

inline void save_checkpoint(const DenoiserBundle& bundle, const std::string& path,
                            const std::string& config_hash, const std::string& parent_hash = "") {
    nlohmann::json header;
    header["stage"] = to_string(bundle.stage);
    header["config_hash"] = config_hash;
    header["parent_hash"] = parent_hash;
    header["bundle"] = bundle_config_json(bundle.cfg);
    header["has_control"] = bundle.control.has_value();
    header["freeze"] = {{"autoencoder", bundle.freeze.autoencoder},
                        {"text_encoder", bundle.freeze.text_encoder},
                        {"denoiser", bundle.freeze.denoiser},
                        {"control", bundle.freeze.control}};

    std::vector<const typename ParamStore<float>::Entry*> sorted;
    for (const auto& e : bundle.store.entries()) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto* a, const auto* b) { return a->name < b->name; });

    header["tensors"] = nlohmann::json::array();
    for (const auto* e : sorted)
        header["tensors"].push_back({{"name", e->name}, {"shape", e->value.shape}});

    std::string hjson = header.dump();
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw io_error("cannot write checkpoint: " + tmp);
        f.write(detail::kCkptMagic, 8);
        u32 hlen = static_cast<u32>(hjson.size());
        f.write(reinterpret_cast<const char*>(&hlen), 4);
        f.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
        for (const auto* e : sorted)
            f.write(reinterpret_cast<const char*>(e->value.data.data()),
                    static_cast<std::streamsize>(e->value.data.size() * sizeof(float)));
    }
    std::filesystem::rename(tmp, path);
}

inline DenoiserBundle load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw io_error("not a checkpoint file: " + path);
    u32 hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hjson(hlen, '\0');
    f.read(hjson.data(), hlen);
    auto header = nlohmann::json::parse(hjson);

    auto cfg = bundle_config_from_json(header.at("bundle"));
    auto bundle = DenoiserBundle::build(cfg);
    if (header.at("has_control").get<bool>()) bundle.attach_control(cfg.init_seed);
    bundle.stage = stage_from_string(header.at("stage").get<std::string>());
    const auto& fr = header.at("freeze");
    bundle.freeze.autoencoder = fr.at("autoencoder").get<bool>();
    bundle.freeze.text_encoder = fr.at("text_encoder").get<bool>();
    bundle.freeze.denoiser = fr.at("denoiser").get<bool>();
    bundle.freeze.control = fr.at("control").get<bool>();

    for (const auto& t : header.at("tensors")) {
        auto name = t.at("name").get<std::string>();
        auto shape = t.at("shape").get<std::vector<i64>>();
        int id = bundle.store.find(name);
        if (id < 0) throw io_error("checkpoint tensor has no home: " + name);
        auto& entry = bundle.store.at(id);
        if (entry.value.shape != shape)
            throw io_error("checkpoint tensor shape mismatch: " + name);
        f.read(reinterpret_cast<char*>(entry.value.data.data()),
               static_cast<std::streamsize>(entry.value.data.size() * sizeof(float)));
        if (!f) throw io_error("checkpoint truncated at tensor: " + name);
    }
    if (info) {
        info->stage = bundle.stage;
        info->config_hash = header.at("config_hash").get<std::string>();
        info->parent_hash = header.at("parent_hash").get<std::string>();
    }
    return bundle;
}

/// Stage tag of a checkpoint without loading tensors.
inline CheckpointInfo peek_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw io_error("not a checkpoint file: " + path);
    u32 hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hjson(hlen, '\0');
    f.read(hjson.data(), hlen);
    auto header = nlohmann::json::parse(hjson);
    CheckpointInfo info;
    info.stage = stage_from_string(header.at("stage").get<std::string>());
    info.config_hash = header.at("config_hash").get<std::string>();
    info.parent_hash = header.at("parent_hash").get<std::string>();
    return info;
}

}  // namespace phr
