// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/delta.hpp"

#include "kmerge/error.hpp"

namespace kmerge {

namespace {

// <w1 B1 A1, w2 B2 A2>_F = w1 w2 * sum((B1^T B2) .* (A1 A2^T))
double term_dot(const LowRankTerm& x, const LowRankTerm& y) {
    if (x.weight == 0.0 || y.weight == 0.0) {
        return 0.0;
    }
    const Eigen::MatrixXd bb = x.b.cast<double>().transpose() * y.b.cast<double>();
    const Eigen::MatrixXd aa = x.a.cast<double>() * y.a.cast<double>().transpose();
    return x.weight * y.weight * bb.cwiseProduct(aa).sum();
}

// <D, w B A>_F = w * sum((B^T D) .* A)
double dense_term_dot(const MatrixD& dense, const LowRankTerm& t) {
    if (t.weight == 0.0) {
        return 0.0;
    }
    const Eigen::MatrixXd bd = t.b.cast<double>().transpose() * dense;
    return t.weight * bd.cwiseProduct(t.a.cast<double>()).sum();
}

} // namespace

DeltaMatrix DeltaMatrix::from_factors(const FactorPair& pair, double scaling) {
    if (pair.b.cols() != pair.a.rows()) {
        throw Error(ErrorCode::ShapeError, "factor pair inner dimensions disagree");
    }
    DeltaMatrix out(pair.d_out(), pair.d_in());
    out.terms_.push_back({scaling, pair.b, pair.a});
    return out;
}

DeltaMatrix DeltaMatrix::from_dense(MatrixD dense) {
    DeltaMatrix out(dense.rows(), dense.cols());
    out.dense_ = std::move(dense);
    return out;
}

Eigen::Index DeltaMatrix::factored_rank() const {
    Eigen::Index r = 0;
    for (const auto& t : terms_) {
        r += t.a.rows();
    }
    return r;
}

void DeltaMatrix::scale(double c) {
    if (has_dense()) {
        dense_ *= c;
    }
    for (auto& t : terms_) {
        t.weight *= c;
    }
}

void DeltaMatrix::add_scaled(const DeltaMatrix& other, double c) {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
        throw Error(ErrorCode::ShapeError, "cannot add " + std::to_string(other.rows_) + "x" +
                                               std::to_string(other.cols_) + " delta to " + std::to_string(rows_) +
                                               "x" + std::to_string(cols_));
    }
    if (other.has_dense()) {
        if (has_dense()) {
            dense_ += c * other.dense_;
        } else {
            dense_ = c * other.dense_;
        }
    }
    for (const auto& t : other.terms_) {
        terms_.push_back({c * t.weight, t.b, t.a});
    }
}

MatrixD DeltaMatrix::to_dense() const {
    MatrixD out = has_dense() ? dense_ : MatrixD::Zero(rows_, cols_);
    for (const auto& t : terms_) {
        out.noalias() += t.weight * (t.b.cast<double>() * t.a.cast<double>());
    }
    return out;
}

double DeltaMatrix::dot(const DeltaMatrix& other) const {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
        throw Error(ErrorCode::ShapeError, "inner product of differently shaped deltas");
    }
    double sum = 0.0;
    if (has_dense() && other.has_dense()) {
        sum += dense_.cwiseProduct(other.dense_).sum();
    }
    if (has_dense()) {
        for (const auto& t : other.terms_) {
            sum += dense_term_dot(dense_, t);
        }
    }
    if (other.has_dense()) {
        for (const auto& t : terms_) {
            sum += dense_term_dot(other.dense_, t);
        }
    }
    for (const auto& x : terms_) {
        for (const auto& y : other.terms_) {
            sum += term_dot(x, y);
        }
    }
    return sum;
}

void DeltaMatrix::set_dense(MatrixD dense) {
    if (dense.rows() != rows_ || dense.cols() != cols_) {
        throw Error(ErrorCode::ShapeError, "dense part shape disagrees with delta shape");
    }
    dense_ = std::move(dense);
}

void DeltaMatrix::push_term(LowRankTerm term) {
    if (term.b.rows() != rows_ || term.a.cols() != cols_ || term.b.cols() != term.a.rows()) {
        throw Error(ErrorCode::ShapeError, "low-rank term shape disagrees with delta shape");
    }
    terms_.push_back(std::move(term));
}

DeltaSet to_delta_set(const LoraAdapter& adapter) {
    DeltaSet out;
    for (const auto& [key, pair] : adapter.layers) {
        out.emplace(key, DeltaMatrix::from_factors(pair, adapter.scaling()));
    }
    return out;
}

std::map<LayerKey, MatrixD> densify(const DeltaSet& deltas) {
    std::map<LayerKey, MatrixD> out;
    for (const auto& [key, d] : deltas) {
        out.emplace(key, d.to_dense());
    }
    return out;
}

void require_compatible(const DeltaSet& x, const DeltaSet& y) {
    if (x.size() != y.size()) {
        throw Error(ErrorCode::IncompatibleAdapters, "delta sets cover different layer counts");
    }
    for (auto it = x.begin(), jt = y.begin(); it != x.end(); ++it, ++jt) {
        if (it->first != jt->first) {
            throw Error(ErrorCode::IncompatibleAdapters, "delta sets disagree at layer " + to_string(it->first));
        }
        if (it->second.rows() != jt->second.rows() || it->second.cols() != jt->second.cols()) {
            throw Error(ErrorCode::IncompatibleAdapters, "layer " + to_string(it->first) + " widths differ");
        }
    }
}

} // namespace kmerge
