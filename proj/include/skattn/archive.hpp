#pragma once

// Weight archive layout (all integers little-endian):
//   bytes 0-3   magic "SKWA"
//   bytes 4-7   u32 format version (1)
//   bytes 8-15  u64 header length N
//   N bytes     JSON: {"format_version":1, "metadata":{...},
//                      "tensors":{name:{"shape":[...],"dtype":"f64","offset":bytes}}}
//   payload     float64 values, offsets relative to the payload start

#include <string>

#include <json.hpp>

#include "skattn/attention.hpp"

namespace skattn {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct WeightArchive {
  NamedTensors tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor* find(const std::string& name) const;
};

/// Throws IoError.
void save_weights(const std::string& path, const NamedTensors& tensors,
                  const nlohmann::json& metadata = nlohmann::json::object());

/// Throws IoError, FormatVersionMismatch, CorruptHeader.
WeightArchive load_weights(const std::string& path);

/// Copies archive values into same-named, same-shaped tensors in place.
/// Throws CorruptHeader when a name is missing or a shape differs.
void assign_weights(const NamedTensors& targets, const WeightArchive& archive);

/// SHA-256 (hex) over names, shapes and raw little-endian values.
std::string weights_digest(const NamedTensors& tensors);

}  // namespace skattn
