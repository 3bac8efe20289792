// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/config_json.hpp"

#include "kmerge/error.hpp"

namespace kmerge {

using nlohmann::json;

json policy_to_json(const PolicyConfig& config) {
    json j;
    j["budget_k"] = config.budget_k;
    j["variant"] = std::string(to_string(config.variant));
    j["threshold_s"] = config.threshold_s ? json(*config.threshold_s) : json(nullptr);
    const MergeOperator& op = config.merge_operator;
    j["operator"] = {{"kind", std::string(to_string(op.kind))},
                     {"density", op.density},
                     {"drop_rate", op.drop_rate},
                     {"weight", op.weight},
                     {"seed", op.seed}};
    j["rank_policy"] = {{"mode", std::string(to_string(config.rank_policy.mode))},
                        {"target_rank", config.rank_policy.target_rank}};
    return j;
}

namespace {

template <typename T>
T read(const json& obj, const char* name, const std::string& path, T fallback) {
    if (!obj.contains(name)) {
        return fallback;
    }
    try {
        return obj.at(name).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorCode::ConfigError, "field '" + path + name + "' has the wrong type");
    }
}

template <typename T>
T require(const json& obj, const char* name, const std::string& path) {
    if (!obj.contains(name)) {
        throw Error(ErrorCode::ConfigError, "missing field '" + path + name + "'");
    }
    return read<T>(obj, name, path, T{});
}

} // namespace

PolicyConfig policy_from_json(const json& j) {
    if (!j.is_object()) {
        throw Error(ErrorCode::ConfigError, "policy config must be a JSON object");
    }
    PolicyConfig config;
    config.budget_k = require<int>(j, "budget_k", "");
    config.variant = parse_variant(require<std::string>(j, "variant", ""));
    if (j.contains("threshold_s") && !j.at("threshold_s").is_null()) {
        config.threshold_s = read<double>(j, "threshold_s", "", 0.0);
    }
    if (j.contains("operator")) {
        const json& op = j.at("operator");
        MergeOperator& m = config.merge_operator;
        m.kind = parse_merge_kind(read<std::string>(op, "kind", "operator.", std::string(to_string(m.kind))));
        m.density = read<double>(op, "density", "operator.", m.density);
        m.drop_rate = read<double>(op, "drop_rate", "operator.", m.drop_rate);
        m.weight = read<double>(op, "weight", "operator.", m.weight);
        m.seed = read<std::uint64_t>(op, "seed", "operator.", m.seed);
    }
    if (j.contains("rank_policy")) {
        const json& rp = j.at("rank_policy");
        config.rank_policy.mode =
            parse_rank_mode(read<std::string>(rp, "mode", "rank_policy.", std::string(to_string(config.rank_policy.mode))));
        config.rank_policy.target_rank = read<int>(rp, "target_rank", "rank_policy.", config.rank_policy.target_rank);
    }
    return config;
}

} // namespace kmerge
