#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdlab/tensor.hpp"

namespace kdlab {

// Single-file checkpoint container: "DKT1" magic, u64 manifest length, UTF-8 JSON
// manifest (config + tensor names/shapes/dtype/byte offsets), then raw
// little-endian IEEE-754 tensor blobs.

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);

struct LoadedCheckpoint {
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace kdlab
