#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "px3d/nn/layers.hpp"
#include "px3d/nn/optim.hpp"

namespace px3d {

inline constexpr int kCheckpointVersion = 1;

/// File layout: "PX3DCKPT", uint32 version, uint64 header length, a JSON header,
/// then the float64 little-endian blobs the header indexes by offset.
struct Checkpoint {
    int version = kCheckpointVersion;
    std::string kind;           ///< "pgr" or "joint"
    nlohmann::json model;       ///< hyperparameters needed to rebuild the model
    nlohmann::json extra;       ///< free-form (recon source, schedule, ...)
    std::int64_t step = 0;
    nlohmann::json rng_state;
    std::string config_hash;
    struct Blob {
        std::string name;
        std::vector<std::int64_t> shape;
        std::vector<double> data;
    };
    std::vector<Blob> blobs;  ///< param:*, buffer:*, adam.m:*, adam.v:*

    const Blob* find(const std::string& name) const;
};

/// Snapshot of parameters, buffers and (optionally) Adam moments.
Checkpoint capture(const nn::ParamList& params, const nn::Adam* optimizer);
/// Copies blobs back; every parameter and buffer must be present with a matching size.
void restore(const Checkpoint& ckpt, nn::ParamList& params, nn::Adam* optimizer);

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "<memory>");
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a of the parameter values only (order and bits).
std::string parameter_hash(const nn::ParamList& params);

}  // namespace px3d
