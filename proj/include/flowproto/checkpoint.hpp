#pragma once

#include "flowproto/flow.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <string_view>

namespace flowproto {

// Binary checkpoint, little-endian, version 1:
//
//   "FPRO" | version u32 | d u32 | layer count u32
//   per layer: tag u8 | field count u32 | field lengths u32... | f64 values
//   CRC32 u32 over everything before it
//
// The standardizer is written first as a pseudo-layer and is included in the
// layer count. Tags and fields:
//   0 standardizer  mean[d] scale[d]
//   1 actnorm       log_scale[d] bias[d] initialized[1]
//   2 invlinear     permutation[d] lower[t] upper[t] log_diag[d] sign[d]
//   3 coupling      parity[1] clamp[1] w1 b1 w2 b2 w3 b3   (matrices row-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const FlowModel& model);
FlowModel decode_checkpoint(std::string_view bytes);

// Architecture hyperparameters recovered from the layer stack.
nlohmann::json architecture_json(const FlowModel& model);

/// Writes `path` and the JSON sidecar `path` + ".json" (architecture plus
/// `extra`), both atomically.
void save_checkpoint(const FlowModel& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
FlowModel load_checkpoint(const std::filesystem::path& path);
nlohmann::json load_checkpoint_sidecar(const std::filesystem::path& path);

}  // namespace flowproto
