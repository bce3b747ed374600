#pragma once

// Checkpoints: one raw little-endian float32 blob with every parameter in
// store order, plus a JSON sidecar carrying the run config, epoch, seed,
// metric history and the parameter table (name/shape/offset) with a blob
// checksum.

#include "kad/blob.hpp"
#include "kad/params.hpp"
#include "kad/sha256.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace kad {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& store,
                            const nlohmann::json& meta_fields) {
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::json table = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& e : store.entries()) {
    const Tensor<float>& v = e.var.value();
    nlohmann::json entry;
    entry["name"] = e.name;
    entry["shape"] = v.shape();
    entry["offset"] = offset;
    entry["group"] = e.group == ParamGroup::backbone ? "backbone" : "transformer";
    table.push_back(entry);
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      std::uint32_t bits;
      float f = v[i];
      std::memcpy(&bits, &f, 4);
      detail::put_u32_le(blob, bits);
    }
    offset += v.numel();
  }
  write_file_bytes(dir / "checkpoint.bin", blob);
  nlohmann::json meta = meta_fields;
  meta["format_version"] = 1;
  meta["params"] = table;
  meta["param_count"] = offset;
  meta["blob_sha256"] = Sha256::hex(blob.data(), blob.size());
  write_file_bytes(dir / "checkpoint.json", meta.dump(2) + "\n");
}

// Fills an already-constructed store (the model/aggregator must have been
// built from the same config first). Returns the sidecar metadata.
inline nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                                      ParamStore<float>& store) {
  const auto meta_path = dir / "checkpoint.json";
  const auto bin_path = dir / "checkpoint.bin";
  if (!std::filesystem::exists(meta_path) || !std::filesystem::exists(bin_path)) {
    throw CheckpointError("checkpoint files missing under " + dir.string());
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file_bytes(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("unparseable checkpoint metadata: " + std::string(e.what()));
  }
  const std::string blob = read_file_bytes(bin_path);
  const std::string sha = Sha256::hex(blob.data(), blob.size());
  if (meta.contains("blob_sha256") && meta["blob_sha256"].get<std::string>() != sha) {
    throw CheckpointError("checkpoint blob checksum mismatch: " + bin_path.string());
  }
  for (const auto& entry : meta.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    auto* e = store.find(name);
    if (!e) {
      throw CheckpointError("checkpoint parameter '" + name +
                            "' does not exist in the constructed model");
    }
    Tensor<float>& v = e->var.mutable_value();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    if (shape != v.shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' shape mismatch");
    }
    const std::int64_t offset = entry.at("offset").get<std::int64_t>();
    if ((offset + v.numel()) * 4 > static_cast<std::int64_t>(blob.size())) {
      throw CheckpointError("checkpoint blob too short for parameter '" + name + "'");
    }
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset * 4;
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      const std::uint32_t bits = detail::get_u32_le(p + 4 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      v[i] = f;
    }
  }
  return meta;
}

}  // namespace kad
