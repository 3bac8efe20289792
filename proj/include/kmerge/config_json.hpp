// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON form of PolicyConfig, shared by the store manifest and `--config`:
//   {"budget_k": int, "variant": str, "threshold_s": float|null,
//    "operator": {"kind", "density", "drop_rate", "weight", "seed"},
//    "rank_policy": {"mode", "target_rank"}}

#pragma once

#include <json.hpp>

#include "kmerge/policy.hpp"

namespace kmerge {

nlohmann::json policy_to_json(const PolicyConfig& config);

/// Missing optional fields keep their defaults. Throws ConfigError naming
/// the offending field.
PolicyConfig policy_from_json(const nlohmann::json& j);

} // namespace kmerge
