#pragma once

#include <filesystem>
#include <memory>

#include "json.hpp"
#include "xane3/model/model.hpp"

namespace xane3::model {

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kParamsFile = "params.bin";

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  ZScore e0;
  nlohmann::json extra;
};

/// Writes manifest.json (parameter table with offsets and lengths counted in
/// float64 values, model config, E0 statistics, `extra`) and params.bin
/// (little-endian float64 values in manifest order).
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const ZScore& e0,
                     const nlohmann::json& extra = nlohmann::json::object());

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace xane3::model
