// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact 64-bit update tensors in dW space.
//
// A DeltaMatrix is `dense + sum_i weight_i * B_i * A_i`. Linear combinations
// of adapters (running averages, linear merges) only touch the weights and
// append terms, so a slot's running mean stays exact without ever forming a
// d_out x d_in matrix. Operators that act entrywise (TIES, DARE) densify.

#pragma once

#include <map>
#include <vector>

#include "kmerge/adapter.hpp"

namespace kmerge {

struct LowRankTerm {
    double weight = 1.0;
    MatrixF b;  // d_out x r
    MatrixF a;  // r x d_in
};

class DeltaMatrix {
public:
    DeltaMatrix() = default;
    DeltaMatrix(Eigen::Index rows, Eigen::Index cols) : rows_(rows), cols_(cols) {}

    static DeltaMatrix from_factors(const FactorPair& pair, double scaling);
    static DeltaMatrix from_dense(MatrixD dense);

    Eigen::Index rows() const { return rows_; }
    Eigen::Index cols() const { return cols_; }

    bool has_dense() const { return dense_.size() != 0; }
    const MatrixD& dense_part() const { return dense_; }
    const std::vector<LowRankTerm>& terms() const { return terms_; }
    Eigen::Index factored_rank() const;

    void scale(double c);
    /// this += c * other
    void add_scaled(const DeltaMatrix& other, double c);

    MatrixD to_dense() const;

    /// Frobenius inner product, computed without densifying factored parts.
    double dot(const DeltaMatrix& other) const;
    double squared_norm() const { return dot(*this); }

    // Used by persistence to rebuild a cache term by term.
    void set_dense(MatrixD dense);
    void push_term(LowRankTerm term);

private:
    Eigen::Index rows_ = 0;
    Eigen::Index cols_ = 0;
    MatrixD dense_;
    std::vector<LowRankTerm> terms_;
};

using DeltaSet = std::map<LayerKey, DeltaMatrix>;

/// dW-space merge result plus the number of tasks folded into it.
struct MergedDelta {
    DeltaSet layers;
    int merge_count = 1;
};

DeltaSet to_delta_set(const LoraAdapter& adapter);

std::map<LayerKey, MatrixD> densify(const DeltaSet& deltas);

/// Throws IncompatibleAdapters unless both sets cover the same keys and shapes.
void require_compatible(const DeltaSet& x, const DeltaSet& y);

} // namespace kmerge
