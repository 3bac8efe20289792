// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/storage.hpp"

#include "kmerge/adapter_io.hpp"
#include "kmerge/error.hpp"

namespace kmerge {

namespace {

std::vector<TargetModule> attention_targets(std::int64_t hidden, std::int64_t kv) {
    return {{"q_proj", hidden, hidden}, {"k_proj", hidden, kv}, {"v_proj", hidden, kv}, {"o_proj", hidden, hidden}};
}

std::vector<TargetModule> decoder_targets(std::int64_t hidden, std::int64_t kv, std::int64_t mlp) {
    auto t = attention_targets(hidden, kv);
    t.push_back({"gate_proj", hidden, mlp});
    t.push_back({"up_proj", hidden, mlp});
    t.push_back({"down_proj", mlp, hidden});
    return t;
}

} // namespace

std::vector<std::string> geometry_preset_names() {
    return {"llama-3.2-1b", "llama-3.2-1b-attn", "qwen-2.5-1.5b", "synthetic-2048"};
}

ModelGeometry geometry_preset(std::string_view name) {
    // Llama-3.2-1B: 32 query heads, 8 kv heads, head_dim 64.
    if (name == "llama-3.2-1b") {
        return {std::string(name), 16, decoder_targets(2048, 512, 8192)};
    }
    if (name == "llama-3.2-1b-attn") {
        return {std::string(name), 16, attention_targets(2048, 512)};
    }
    // Qwen2.5-1.5B: 12 query heads, 2 kv heads, head_dim 128.
    if (name == "qwen-2.5-1.5b") {
        return {std::string(name), 28, decoder_targets(1536, 256, 8960)};
    }
    if (name == "synthetic-2048") {
        return {std::string(name), 16, attention_targets(2048, 2048)};
    }
    throw Error(ErrorCode::ConfigError, "unknown geometry preset '" + std::string(name) + "'");
}

ModelGeometry geometry_of(const LoraAdapter& adapter) {
    ModelGeometry g;
    g.name = adapter.task_id;
    // Flat list: one target per (layer, projection), reported as a single layer.
    g.num_layers = 1;
    for (const auto& [key, pair] : adapter.layers) {
        g.targets.push_back({to_string(key), pair.d_in(), pair.d_out()});
    }
    return g;
}

std::int64_t lora_parameter_count(const ModelGeometry& geometry, int rank) {
    std::int64_t per_layer = 0;
    for (const auto& t : geometry.targets) {
        per_layer += static_cast<std::int64_t>(rank) * (t.d_in + t.d_out);
    }
    return per_layer * geometry.num_layers;
}

std::int64_t lora_parameter_count(const LoraAdapter& adapter) {
    return lora_parameter_count(geometry_of(adapter), adapter.rank);
}

StorageEstimate estimate_storage(const ModelGeometry& geometry, int rank) {
    if (rank < 1 || geometry.num_layers < 1) {
        throw Error(ErrorCode::ConfigError, "storage estimate needs rank >= 1 and at least one layer");
    }
    StorageEstimate e;
    e.geometry = geometry.name;
    e.rank = rank;
    e.parameters = lora_parameter_count(geometry, rank);
    e.bytes_f32 = 4 * e.parameters;
    e.bytes_f16 = 2 * e.parameters;
    return e;
}

nlohmann::json storage_to_json(const StorageEstimate& e) {
    return {{"geometry", e.geometry},
            {"rank", e.rank},
            {"parameters", e.parameters},
            {"bytes_f32", e.bytes_f32},
            {"bytes_f16", e.bytes_f16}};
}

std::int64_t kmrg_file_bytes(const LoraAdapter& adapter) {
    return static_cast<std::int64_t>(kAdapterPreambleBytes + encode_adapter_header(adapter).size()) +
           4 * lora_parameter_count(adapter);
}

} // namespace kmerge
