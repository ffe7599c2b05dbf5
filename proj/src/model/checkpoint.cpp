#include "xane3/model/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "xane3/errors.hpp"

namespace xane3::model {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

constexpr int kFormatVersion = 1;

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const ZScore& e0, const json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json table = json::array();
  std::size_t offset = 0;
  for (const auto& e : model.params().entries()) {
    table.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}, {"length", e.tensor.numel()}});
    offset += e.tensor.numel();
  }
  const json manifest{{"format", "xane3-checkpoint"},
                      {"version", kFormatVersion},
                      {"dtype", "float64-le"},
                      {"config", to_json(model.config())},
                      {"e0_zscore", {{"mean", e0.mean}, {"std", e0.std}}},
                      {"params", table},
                      {"extra", extra}};

  const auto flat = model.params().flatten();
  std::ofstream bin(dir / kParamsFile, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + (dir / kParamsFile).string());
  bin.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!bin) throw IoError("write failed for " + (dir / kParamsFile).string());

  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kManifestFile).string());
  out << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const json manifest = read_json(dir / kManifestFile);
  if (manifest.value("format", "") != "xane3-checkpoint") throw IoError(dir.string() + " is not a checkpoint");
  if (manifest.value("version", 0) != kFormatVersion) throw IoError("unsupported checkpoint version");

  LoadedCheckpoint ck;
  try {
    ck.model = std::make_unique<Model>(model_config_from_json(manifest.at("config")), 0);
    ck.e0.mean = manifest.at("e0_zscore").at("mean").get<double>();
    ck.e0.std = manifest.at("e0_zscore").at("std").get<double>();
    ck.extra = manifest.value("extra", json::object());

    const auto& table = manifest.at("params");
    const auto& entries = ck.model->params().entries();
    if (table.size() != entries.size()) {
      throw IoError("checkpoint lists " + std::to_string(table.size()) + " parameters, model has " +
                    std::to_string(entries.size()));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& row = table[i];
      if (row.at("name").get<std::string>() != entries[i].name ||
          row.at("shape").get<ad::Shape>() != entries[i].tensor.shape() ||
          row.at("offset").get<std::size_t>() != offset || row.at("length").get<std::size_t>() != entries[i].tensor.numel()) {
        throw IoError("checkpoint parameter " + std::to_string(i) + " ('" + row.at("name").get<std::string>() +
                      "') does not match the model layout");
      }
      offset += entries[i].tensor.numel();
    }

    std::ifstream bin(dir / kParamsFile, std::ios::binary | std::ios::ate);
    if (!bin) throw IoError("cannot open " + (dir / kParamsFile).string());
    const auto bytes = static_cast<std::size_t>(bin.tellg());
    if (bytes != offset * sizeof(double)) {
      throw IoError("params.bin has " + std::to_string(bytes) + " bytes, expected " +
                    std::to_string(offset * sizeof(double)));
    }
    bin.seekg(0);
    std::vector<double> flat(offset);
    bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
    if (!bin) throw IoError("read failed for " + (dir / kParamsFile).string());
    for (double v : flat)
      if (!std::isfinite(v)) throw IoError("checkpoint contains non-finite parameters");
    ck.model->params().assign(flat);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw IoError("checkpoint config: " + std::string(e.what()));
  }
  return ck;
}

}  // namespace xane3::model
