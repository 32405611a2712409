#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "psm/nn/optim.hpp"

namespace psm::nn {

inline constexpr int kCheckpointFormatVersion = 1;

/// Self-describing model container: config, named float64 tensors, optional
/// optimizer state and a free-form training trace.
struct Checkpoint {
    std::string kind;
    nlohmann::json config = nlohmann::json::object();
    ParamList params;
    std::optional<OptimizerState> optimizer;
    nlohmann::json trace = nlohmann::json::object();

    const Tensor& param(const std::string& name) const;
};

/// CBOR on disk; tensor values are raw little-endian doubles, so reload is
/// bit-exact.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

}  // namespace psm::nn
