// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/adapter.hpp"

#include <cstring>

#include "kmerge/error.hpp"

namespace kmerge {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::KeyNotFound: return "KeyNotFound";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::IncompatibleAdapters: return "IncompatibleAdapters";
    case ErrorCode::EmptyStore: return "EmptyStore";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::InsufficientInputs: return "InsufficientInputs";
    case ErrorCode::InvalidHistoryCount: return "InvalidHistoryCount";
    case ErrorCode::UnsupportedMode: return "UnsupportedMode";
    case ErrorCode::DuplicateTask: return "DuplicateTask";
    case ErrorCode::UnknownTask: return "UnknownTask";
    case ErrorCode::SlotVacant: return "SlotVacant";
    case ErrorCode::RestoreError: return "RestoreError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

std::string_view to_string(Projection p) {
    switch (p) {
    case Projection::key: return "key";
    case Projection::query: return "query";
    case Projection::value: return "value";
    case Projection::output: return "output";
    }
    return "?";
}

Projection parse_projection(std::string_view name) {
    for (Projection p : kProjections) {
        if (to_string(p) == name) {
            return p;
        }
    }
    throw Error(ErrorCode::FormatError, "unknown projection '" + std::string(name) + "'");
}

std::string to_string(const LayerKey& key) {
    return std::to_string(key.layer_index) + "." + std::string(to_string(key.projection));
}

const FactorPair& LoraAdapter::at(const LayerKey& key) const {
    auto it = layers.find(key);
    if (it == layers.end()) {
        throw Error(ErrorCode::KeyNotFound, "adapter '" + task_id + "' has no layer " + to_string(key));
    }
    return it->second;
}

std::vector<LayerKey> LoraAdapter::keys() const {
    std::vector<LayerKey> out;
    out.reserve(layers.size());
    for (const auto& [key, _] : layers) {
        out.push_back(key);
    }
    return out;
}

void LoraAdapter::validate() const {
    if (rank < 1) {
        throw Error(ErrorCode::ShapeError, "adapter '" + task_id + "' declares rank " + std::to_string(rank));
    }
    if (layers.empty()) {
        throw Error(ErrorCode::ShapeError, "adapter '" + task_id + "' has no layers");
    }
    for (const auto& [key, pair] : layers) {
        if (pair.a.rows() != rank || pair.b.cols() != rank) {
            throw Error(ErrorCode::ShapeError,
                        "layer " + to_string(key) + " factors disagree with declared rank " + std::to_string(rank));
        }
        if (!pair.a.allFinite() || !pair.b.allFinite()) {
            throw Error(ErrorCode::ShapeError, "layer " + to_string(key) + " has non-finite entries");
        }
    }
}

namespace {

bool bitwise_equal(const MatrixF& x, const MatrixF& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
}

} // namespace

bool LoraAdapter::operator==(const LoraAdapter& other) const {
    if (task_id != other.task_id || problem_type != other.problem_type || language != other.language ||
        rank != other.rank || scale_numerator != other.scale_numerator || layers.size() != other.layers.size()) {
        return false;
    }
    for (auto it = layers.begin(), jt = other.layers.begin(); it != layers.end(); ++it, ++jt) {
        if (it->first != jt->first || !bitwise_equal(it->second.a, jt->second.a) ||
            !bitwise_equal(it->second.b, jt->second.b)) {
            return false;
        }
    }
    return true;
}

bool same_key_set(const LoraAdapter& x, const LoraAdapter& y) {
    if (x.layers.size() != y.layers.size()) {
        return false;
    }
    for (auto it = x.layers.begin(), jt = y.layers.begin(); it != x.layers.end(); ++it, ++jt) {
        if (it->first != jt->first) {
            return false;
        }
    }
    return true;
}

void require_compatible(const LoraAdapter& x, const LoraAdapter& y) {
    if (!same_key_set(x, y)) {
        throw Error(ErrorCode::IncompatibleAdapters,
                    "adapters '" + x.task_id + "' and '" + y.task_id + "' cover different layer sets");
    }
    for (const auto& [key, pair] : x.layers) {
        const FactorPair& other = y.layers.at(key);
        if (pair.d_in() != other.d_in() || pair.d_out() != other.d_out()) {
            throw Error(ErrorCode::IncompatibleAdapters, "layer " + to_string(key) + " has different widths in '" +
                                                             x.task_id + "' and '" + y.task_id + "'");
        }
    }
}

MatrixD materialize_delta(const LoraAdapter& adapter, const LayerKey& key) {
    const FactorPair& pair = adapter.at(key);
    if (pair.b.cols() != pair.a.rows()) {
        throw Error(ErrorCode::ShapeError, "layer " + to_string(key) + ": B is " + std::to_string(pair.b.rows()) +
                                               "x" + std::to_string(pair.b.cols()) + " but A is " +
                                               std::to_string(pair.a.rows()) + "x" + std::to_string(pair.a.cols()));
    }
    MatrixD delta = pair.b.cast<double>() * pair.a.cast<double>();
    delta *= adapter.scaling();
    return delta;
}

std::vector<double> flatten(const MatrixD& delta) {
    // MatrixD is row-major, so storage order is already the flattening order.
    return {delta.data(), delta.data() + delta.size()};
}

MatrixD unflatten(std::span<const double> values, Eigen::Index rows, Eigen::Index cols) {
    if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != values.size()) {
        throw Error(ErrorCode::ShapeError, "cannot reshape " + std::to_string(values.size()) + " values to " +
                                               std::to_string(rows) + "x" + std::to_string(cols));
    }
    MatrixD out(rows, cols);
    std::copy(values.begin(), values.end(), out.data());
    return out;
}

LoraAdapter zero_like(const LoraAdapter& adapter) {
    LoraAdapter out = adapter;
    for (auto& [_, pair] : out.layers) {
        pair.a.setZero();
        pair.b.setZero();
    }
    return out;
}

} // namespace kmerge
