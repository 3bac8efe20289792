// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-adapter storage accounting. Parameter counts follow directly from the
// targeted projection shapes: each target contributes r * (d_in + d_out).

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kmerge/adapter.hpp"

namespace kmerge {

struct TargetModule {
    std::string name;
    std::int64_t d_in = 0;
    std::int64_t d_out = 0;
};

struct ModelGeometry {
    std::string name;
    int num_layers = 0;
    std::vector<TargetModule> targets;  // per layer
};

/// Known presets, built from public architecture constants:
///   llama-3.2-1b       16 layers, hidden 2048, kv 512, mlp 8192; q,k,v,o,gate,up,down
///   llama-3.2-1b-attn  same model, q,k,v,o only
///   qwen-2.5-1.5b      28 layers, hidden 1536, kv 256, mlp 8960; q,k,v,o,gate,up,down
///   synthetic-2048     16 layers x 4 square projections of width 2048
/// Throws ConfigError for an unknown name.
ModelGeometry geometry_preset(std::string_view name);
std::vector<std::string> geometry_preset_names();

/// Geometry read off an adapter's own layers.
ModelGeometry geometry_of(const LoraAdapter& adapter);

std::int64_t lora_parameter_count(const ModelGeometry& geometry, int rank);
std::int64_t lora_parameter_count(const LoraAdapter& adapter);

struct StorageEstimate {
    std::string geometry;
    int rank = 0;
    std::int64_t parameters = 0;
    std::int64_t bytes_f32 = 0;  // raw tensor payload as stored by kmerge
    std::int64_t bytes_f16 = 0;  // the same payload at half precision
};

StorageEstimate estimate_storage(const ModelGeometry& geometry, int rank);
nlohmann::json storage_to_json(const StorageEstimate& estimate);

/// Exact size of the .kmrg encoding: preamble + JSON header + 4 bytes per
/// parameter.
std::int64_t kmrg_file_bytes(const LoraAdapter& adapter);

} // namespace kmerge
