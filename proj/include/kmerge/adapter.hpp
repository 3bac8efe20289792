// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter value types. An adapter holds one (A, B) factor pair per
// (layer, attention projection); the applied update for that slice is
// dW = (scale_numerator / rank) * B * A.

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace kmerge {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Projection : std::uint8_t { key = 0, query = 1, value = 2, output = 3 };

inline constexpr std::array<Projection, 4> kProjections = {
    Projection::key, Projection::query, Projection::value, Projection::output};

std::string_view to_string(Projection p);
Projection parse_projection(std::string_view name);

struct LayerKey {
    int layer_index = 0;
    Projection projection = Projection::key;

    // Orders by layer, then key < query < value < output.
    auto operator<=>(const LayerKey&) const = default;
};

std::string to_string(const LayerKey& key);

struct FactorPair {
    MatrixF a;  // rank x d_in
    MatrixF b;  // d_out x rank

    Eigen::Index rank() const { return a.rows(); }
    Eigen::Index d_in() const { return a.cols(); }
    Eigen::Index d_out() const { return b.rows(); }
};

struct LoraAdapter {
    std::string task_id;
    std::string problem_type;
    std::string language;
    int rank = 1;
    double scale_numerator = 1.0;
    std::map<LayerKey, FactorPair> layers;

    double scaling() const { return scale_numerator / static_cast<double>(rank); }

    const FactorPair& at(const LayerKey& key) const;

    std::vector<LayerKey> keys() const;

    /// Checks rank agreement, factor shapes and finiteness. Throws ShapeError.
    void validate() const;

    /// Bitwise equality of metadata and every tensor.
    bool operator==(const LoraAdapter& other) const;
};

bool same_key_set(const LoraAdapter& x, const LoraAdapter& y);

/// Throws IncompatibleAdapters unless the key sets and per-key shapes agree.
void require_compatible(const LoraAdapter& x, const LoraAdapter& y);

/// (scale_numerator / rank) * B * A in 64-bit, shape d_out x d_in.
MatrixD materialize_delta(const LoraAdapter& adapter, const LayerKey& key);

/// Row-major vectorization.
std::vector<double> flatten(const MatrixD& delta);

MatrixD unflatten(std::span<const double> values, Eigen::Index rows, Eigen::Index cols);

/// Adapter with every tensor zeroed, same shapes and metadata.
LoraAdapter zero_like(const LoraAdapter& adapter);

} // namespace kmerge
