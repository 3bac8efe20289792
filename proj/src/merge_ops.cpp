// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/merge_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kmerge/error.hpp"

namespace kmerge {

std::string_view to_string(MergeKind kind) {
    switch (kind) {
    case MergeKind::running_average: return "running_average";
    case MergeKind::linear: return "linear";
    case MergeKind::ties: return "ties";
    case MergeKind::dare: return "dare";
    case MergeKind::dare_ties: return "dare_ties";
    }
    return "?";
}

MergeKind parse_merge_kind(std::string_view name) {
    for (MergeKind k : {MergeKind::running_average, MergeKind::linear, MergeKind::ties, MergeKind::dare,
                        MergeKind::dare_ties}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    if (name == "running-average" || name == "average") {
        return MergeKind::running_average;
    }
    if (name == "dare-ties") {
        return MergeKind::dare_ties;
    }
    throw Error(ErrorCode::ConfigError, "unknown merge operator '" + std::string(name) + "'");
}

void MergeOperator::validate() const {
    if (!(density > 0.0 && density <= 1.0)) {
        throw Error(ErrorCode::ConfigError, "density must lie in (0, 1], got " + std::to_string(density));
    }
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw Error(ErrorCode::ConfigError, "drop_rate must lie in [0, 1), got " + std::to_string(drop_rate));
    }
    if (!(weight >= 0.0 && weight <= 1.0)) {
        throw Error(ErrorCode::ConfigError, "linear weight must lie in [0, 1], got " + std::to_string(weight));
    }
}

MergedDelta running_average_merge(const DeltaSet& stored, int stored_count, const DeltaSet& incoming) {
    if (stored_count < 1) {
        throw Error(ErrorCode::InvalidHistoryCount,
                    "running average needs at least one stored task, got " + std::to_string(stored_count));
    }
    require_compatible(stored, incoming);
    const double n = stored_count;
    MergedDelta out{stored, stored_count + 1};
    for (auto& [key, delta] : out.layers) {
        delta.scale(n / (n + 1.0));
        delta.add_scaled(incoming.at(key), 1.0 / (n + 1.0));
    }
    return out;
}

MergedDelta running_average_merge(const LoraAdapter& stored, int stored_count, const LoraAdapter& incoming) {
    require_compatible(stored, incoming);
    return running_average_merge(to_delta_set(stored), stored_count, to_delta_set(incoming));
}

MergedDelta linear_merge(const DeltaSet& x, const DeltaSet& y, double weight) {
    require_compatible(x, y);
    if (!(weight >= 0.0 && weight <= 1.0)) {
        throw Error(ErrorCode::ConfigError, "linear weight must lie in [0, 1]");
    }
    MergedDelta out{x, 2};
    for (auto& [key, delta] : out.layers) {
        delta.scale(weight);
        delta.add_scaled(y.at(key), 1.0 - weight);
    }
    return out;
}

MergedDelta linear_merge(const LoraAdapter& x, const LoraAdapter& y, double weight) {
    require_compatible(x, y);
    return linear_merge(to_delta_set(x), to_delta_set(y), weight);
}

MatrixD ties_merge_tensor(std::span<const MatrixD> inputs, double density) {
    if (inputs.empty()) {
        throw Error(ErrorCode::InsufficientInputs, "TIES needs at least one input tensor");
    }
    if (!(density > 0.0 && density <= 1.0)) {
        throw Error(ErrorCode::ConfigError, "density must lie in (0, 1]");
    }
    const Eigen::Index rows = inputs[0].rows();
    const Eigen::Index cols = inputs[0].cols();
    const auto count = static_cast<std::size_t>(rows * cols);
    const auto keep = std::min(count, static_cast<std::size_t>(std::ceil(density * static_cast<double>(count))));

    std::vector<MatrixD> trimmed;
    trimmed.reserve(inputs.size());
    std::vector<std::size_t> order(count);
    for (const MatrixD& in : inputs) {
        if (in.rows() != rows || in.cols() != cols) {
            throw Error(ErrorCode::ShapeError, "TIES inputs differ in shape");
        }
        MatrixD t = MatrixD::Zero(rows, cols);
        std::iota(order.begin(), order.end(), std::size_t{0});
        const double* v = in.data();
        auto by_magnitude = [v](std::size_t i, std::size_t j) {
            const double ai = std::abs(v[i]);
            const double aj = std::abs(v[j]);
            return ai > aj || (ai == aj && i < j);
        };
        if (keep < count) {
            std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                             by_magnitude);
        }
        for (std::size_t k = 0; k < keep; ++k) {
            t.data()[order[k]] = v[order[k]];
        }
        trimmed.push_back(std::move(t));
    }

    MatrixD out = MatrixD::Zero(rows, cols);
    for (std::size_t e = 0; e < count; ++e) {
        double total = 0.0;
        for (const auto& t : trimmed) {
            total += t.data()[e];
        }
        const bool positive = total >= 0.0;
        double sum = 0.0;
        int matches = 0;
        for (const auto& t : trimmed) {
            const double x = t.data()[e];
            if ((positive && x > 0.0) || (!positive && x < 0.0)) {
                sum += x;
                ++matches;
            }
        }
        out.data()[e] = matches > 0 ? sum / matches : 0.0;
    }
    return out;
}

MergedDelta ties_merge(std::span<const DeltaSet> deltas, double density) {
    if (deltas.size() < 2) {
        throw Error(ErrorCode::InsufficientInputs,
                    "TIES merge needs at least two delta sets, got " + std::to_string(deltas.size()));
    }
    for (std::size_t i = 1; i < deltas.size(); ++i) {
        require_compatible(deltas[0], deltas[i]);
    }
    MergedDelta out;
    out.merge_count = static_cast<int>(deltas.size());
    std::vector<MatrixD> inputs(deltas.size());
    for (const auto& [key, _] : deltas[0]) {
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            inputs[i] = deltas[i].at(key).to_dense();
        }
        out.layers.emplace(key, DeltaMatrix::from_dense(ties_merge_tensor(inputs, density)));
    }
    return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

} // namespace

double dare_uniform(std::uint64_t seed, std::uint64_t layer, std::uint64_t entry) {
    const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ layer) ^ entry);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

std::uint64_t layer_id(const LayerKey& key) {
    return static_cast<std::uint64_t>(key.layer_index) * kProjections.size() +
           static_cast<std::uint64_t>(key.projection);
}

MatrixD dare_tensor(const MatrixD& delta, double drop_rate, std::uint64_t seed, std::uint64_t layer) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw Error(ErrorCode::ConfigError, "drop_rate must lie in [0, 1)");
    }
    if (drop_rate == 0.0) {
        return delta;
    }
    const double rescale = 1.0 / (1.0 - drop_rate);
    MatrixD out(delta.rows(), delta.cols());
    for (Eigen::Index e = 0; e < delta.size(); ++e) {
        const bool drop = dare_uniform(seed, layer, static_cast<std::uint64_t>(e)) < drop_rate;
        out.data()[e] = drop ? 0.0 : delta.data()[e] * rescale;
    }
    return out;
}

DeltaSet dare_preprocess(const DeltaSet& delta, double drop_rate, std::uint64_t seed) {
    DeltaSet out;
    for (const auto& [key, d] : delta) {
        out.emplace(key, DeltaMatrix::from_dense(dare_tensor(d.to_dense(), drop_rate, seed, layer_id(key))));
    }
    return out;
}

MergedDelta dare_merge(const DeltaSet& x, const DeltaSet& y, const MergeOperator& op) {
    require_compatible(x, y);
    op.validate();
    DeltaSet dx = dare_preprocess(x, op.drop_rate, derive_seed(op.seed, 0));
    const DeltaSet dy = dare_preprocess(y, op.drop_rate, derive_seed(op.seed, 1));
    for (auto& [key, d] : dx) {
        d.add_scaled(dy.at(key), 1.0);
    }
    return {std::move(dx), 2};
}

MergedDelta dare_ties_merge(const DeltaSet& x, const DeltaSet& y, const MergeOperator& op) {
    require_compatible(x, y);
    op.validate();
    const std::array<DeltaSet, 2> inputs = {dare_preprocess(x, op.drop_rate, derive_seed(op.seed, 0)),
                                            dare_preprocess(y, op.drop_rate, derive_seed(op.seed, 1))};
    return ties_merge(inputs, op.density);
}

MergedDelta apply_merge(const MergeOperator& op, const DeltaSet& stored, int stored_count, const DeltaSet& incoming) {
    switch (op.kind) {
    case MergeKind::running_average:
        return running_average_merge(stored, stored_count, incoming);
    case MergeKind::linear:
        return linear_merge(stored, incoming, op.weight);
    case MergeKind::ties: {
        require_compatible(stored, incoming);
        const std::array<DeltaSet, 2> inputs = {stored, incoming};
        return ties_merge(inputs, op.density);
    }
    case MergeKind::dare:
        return dare_merge(stored, incoming, op);
    case MergeKind::dare_ties:
        return dare_ties_merge(stored, incoming, op);
    }
    throw Error(ErrorCode::ConfigError, "unhandled merge operator");
}

} // namespace kmerge
