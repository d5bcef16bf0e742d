// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//   manifest.json  config, task, variant, provenance and one entry per
//                  parameter (name, shape, frozen, offset, count), sorted by name
//   params.bin     little-endian float32 values, concatenated in manifest order
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/errors.hpp"
#include "cmr/model.hpp"
#include "json.hpp"

namespace cmr {

struct Checkpoint {
  struct Param {
    Shape shape;
    bool frozen = false;
    std::vector<float> values;
  };
  RunConfig config;
  TaskKind task = TaskKind::nlvr_like;
  Variant variant = Variant::full;
  nlohmann::json provenance = nlohmann::json::object();
  std::map<std::string, Param> params;
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) return x;
  return ((x & 0xFFu) << 24) | ((x & 0xFF00u) << 8) | ((x >> 8) & 0xFF00u) | (x >> 24);
}

}  // namespace detail

template <typename T>
Checkpoint snapshot(const CmrModel<T>& model, nlohmann::json provenance = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = model.config();
  ck.task = model.task();
  ck.variant = model.variant();
  ck.provenance = std::move(provenance);
  for (const auto& [name, e] : model.params().entries()) {
    Checkpoint::Param p;
    p.shape = e.tensor.shape();
    p.frozen = e.kind == ParamKind::frozen;
    for (T v : e.tensor.values()) p.values.push_back(static_cast<float>(v));
    ck.params.emplace(name, std::move(p));
  }
  return ck;
}

inline nlohmann::json manifest_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "cmr-checkpoint-1";
  j["config"] = to_json(ck.config);
  j["task"] = std::string(to_string(ck.task));
  j["variant"] = std::string(to_string(ck.variant));
  j["provenance"] = ck.provenance;
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, p] : ck.params) {
    params.push_back({{"name", name},
                      {"shape", p.shape},
                      {"frozen", p.frozen},
                      {"offset", offset},
                      {"count", p.values.size()}});
    offset += p.values.size();
  }
  j["parameters"] = params;
  return j;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create checkpoint directory " + dir + ": " + ec.message());
  {
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + dir + "/manifest.json");
    out << manifest_json(ck).dump(2) << '\n';
  }
  std::ofstream out(fs::path(dir) / "params.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + dir + "/params.bin");
  for (const auto& [name, p] : ck.params) {
    for (float v : p.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      bits = detail::to_little_endian(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!out) throw InputError("failed while writing " + dir + "/params.bin");
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw InputError("missing checkpoint manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  Checkpoint ck;
  std::vector<float> blob;
  {
    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw InputError("missing checkpoint data " + dir + "/params.bin");
    std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (bytes.size() % 4 != 0) throw SchemaError("params.bin size is not a multiple of 4");
    blob.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < blob.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + 4 * i, 4);
      bits = detail::to_little_endian(bits);
      std::memcpy(&blob[i], &bits, 4);
    }
  }
  try {
    ck.config = config_from_json(j.at("config"));
    ck.task = parse_task(j.at("task").get<std::string>());
    ck.variant = parse_variant(j.at("variant").get<std::string>());
    ck.provenance = j.value("provenance", nlohmann::json::object());
    for (const auto& p : j.at("parameters")) {
      Checkpoint::Param param;
      param.shape = p.at("shape").get<Shape>();
      param.frozen = p.at("frozen").get<bool>();
      const auto offset = p.at("offset").get<std::size_t>();
      const auto count = p.at("count").get<std::size_t>();
      if (count != shape_numel(param.shape) || offset + count > blob.size()) {
        throw SchemaError("parameter " + p.at("name").get<std::string>() +
                          " does not fit params.bin");
      }
      param.values.assign(blob.begin() + static_cast<long>(offset),
                          blob.begin() + static_cast<long>(offset + count));
      ck.params.emplace(p.at("name").get<std::string>(), std::move(param));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("checkpoint manifest: " + std::string(e.what()));
  }
  return ck;
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> reinitialized;  // head parameters left at fresh init
  std::vector<std::string> unused;         // checkpoint entries the model lacks
};

/// Copies checkpoint values into the model. With `transfer`, the task head is
/// left at its fresh initialization and the checkpoint may come from another
/// task; the trunk architecture must match either way.
template <typename T>
LoadReport load_into(CmrModel<T>& model, const Checkpoint& ck, bool transfer) {
  const auto diff = architecture_diff(ck.config, model.config());
  if (!diff.empty()) {
    std::string msg = "checkpoint architecture differs from the model:";
    for (const auto& line : diff) msg += "\n  " + line;
    throw ConfigError(msg);
  }
  if (!transfer && ck.task != model.task()) {
    throw ConfigError("checkpoint task " + std::string(to_string(ck.task)) +
                      " differs from model task " + std::string(to_string(model.task())));
  }
  LoadReport report;
  const auto head = model.head_parameter_names();
  auto is_head = [&](const std::string& n) {
    return std::find(head.begin(), head.end(), n) != head.end();
  };
  std::vector<std::string> missing;
  for (const auto& [name, e] : model.params().entries()) {
    if (transfer && is_head(name)) {
      report.reinitialized.push_back(name);
      continue;
    }
    auto it = ck.params.find(name);
    if (it == ck.params.end()) {
      missing.push_back(name);
      continue;
    }
    if (it->second.shape != e.tensor.shape()) {
      throw ConfigError("parameter " + name + " has shape " + shape_str(it->second.shape) +
                        " in the checkpoint but " + shape_str(e.tensor.shape()) + " in the model");
    }
  }
  if (!missing.empty()) {
    std::string msg = "checkpoint lacks model parameters:";
    for (const auto& n : missing) msg += "\n  " + n;
    throw ConfigError(msg);
  }
  for (const auto& [name, e] : model.params().entries()) {
    if (transfer && is_head(name)) continue;
    const auto& src = ck.params.at(name).values;
    auto dst = e.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    e.tensor.zero_grad();
    report.loaded.push_back(name);
  }
  for (const auto& [name, p] : ck.params)
    if (!model.params().contains(name)) report.unused.push_back(name);
  return report;
}

/// Rebuilds the model a checkpoint describes, with its values.
template <typename T>
CmrModel<T> model_from_checkpoint(const Checkpoint& ck) {
  CmrModel<T> model(ck.config, ck.task, ck.variant);
  load_into(model, ck, false);
  return model;
}

}  // namespace cmr
