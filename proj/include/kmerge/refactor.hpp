// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Converting dW-space merge results back into fixed-rank stored adapters.

#pragma once

#include <map>
#include <string>
#include <string_view>

#include "kmerge/delta.hpp"

namespace kmerge {

enum class RankMode { svd_truncate, factor_average };

std::string_view to_string(RankMode mode);
RankMode parse_rank_mode(std::string_view name);

struct RankPolicy {
    RankMode mode = RankMode::svd_truncate;
    int target_rank = 1;

    void validate() const;
};

struct AdapterMetadata {
    std::string task_id;
    std::string problem_type;
    std::string language;
    double scale_numerator = 1.0;
};

struct RefactorResult {
    LoraAdapter adapter;
    /// ||dW - dW_r||_F / ||dW||_F per layer (0 for an all-zero layer).
    std::map<LayerKey, double> residuals;
};

/// Best rank-r approximation of every layer via SVD, split as
/// A = sqrt(S) V^T, B = U sqrt(S) with the adapter scaling divided out, so
/// materialize_delta(result) reproduces the truncated update. Purely
/// factored layers are decomposed through the Gram matrices of the stacked
/// factors and never densified. Throws UnsupportedMode for factor_average.
RefactorResult refactor(const MergedDelta& merged, const RankPolicy& policy, const AdapterMetadata& metadata);

/// Factor-wise weighted average of two equal-rank adapters:
/// A = w_x A_x + w_y A_y, B = w_x B_x + w_y B_y. Cheap, but does not
/// commute with B*A. Throws UnsupportedMode on rank or scaling mismatch.
LoraAdapter factor_average(const LoraAdapter& x, double weight_x, const LoraAdapter& y, double weight_y,
                           const AdapterMetadata& metadata);

} // namespace kmerge
