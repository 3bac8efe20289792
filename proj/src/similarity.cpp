// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "kmerge/error.hpp"

namespace kmerge {

namespace {

// Frobenius inner product of B1 A1 and B2 A2 via the r x r Gram blocks,
// so no d_out x d_in matrix is formed.
double factored_dot(const FactorPair& x, const FactorPair& y) {
    const Eigen::MatrixXd bb = x.b.cast<double>().transpose() * y.b.cast<double>();
    const Eigen::MatrixXd aa = x.a.cast<double>() * y.a.cast<double>().transpose();
    return bb.cwiseProduct(aa).sum();
}

double cosine(double dot, double sq_x, double sq_y) {
    sq_x = std::max(sq_x, 0.0);
    sq_y = std::max(sq_y, 0.0);
    if (std::sqrt(sq_x) < kDegenerateNorm || std::sqrt(sq_y) < kDegenerateNorm) {
        return 0.0;
    }
    return std::clamp(dot / std::sqrt(sq_x * sq_y), -1.0, 1.0);
}

} // namespace

namespace {

void require_layer_match(const LoraAdapter& x, const LoraAdapter& y, const LayerKey& key) {
    const FactorPair& fx = x.at(key);
    const FactorPair& fy = y.at(key);
    if (fx.d_in() != fy.d_in() || fx.d_out() != fy.d_out()) {
        throw Error(ErrorCode::ShapeError, "layer " + to_string(key) + " shapes differ between '" + x.task_id +
                                               "' and '" + y.task_id + "'");
    }
    if (fx.b.cols() != fx.a.rows() || fy.b.cols() != fy.a.rows()) {
        throw Error(ErrorCode::ShapeError, "layer " + to_string(key) + " has mismatched factor ranks");
    }
}

double squared_norm(const LoraAdapter& x, const FactorPair& f) {
    const double s = x.scaling();
    return s * s * factored_dot(f, f);
}

void require_same_layers(const LoraAdapter& x, const LoraAdapter& y) {
    if (!same_key_set(x, y)) {
        throw Error(ErrorCode::IncompatibleAdapters,
                    "adapters '" + x.task_id + "' and '" + y.task_id + "' cover different layer sets");
    }
    if (x.layers.empty()) {
        throw Error(ErrorCode::IncompatibleAdapters, "adapter '" + x.task_id + "' has no layers");
    }
}

// Mean layer cosine given both adapters' per-layer squared norms.
double similarity_with_norms(const LoraAdapter& x, const std::vector<double>& nx, const LoraAdapter& y,
                             const std::vector<double>& ny) {
    double sum = 0.0;
    std::size_t i = 0;
    for (const auto& [key, fx] : x.layers) {
        require_layer_match(x, y, key);
        const double dot = x.scaling() * y.scaling() * factored_dot(fx, y.layers.at(key));
        sum += cosine(dot, nx[i], ny[i]);
        ++i;
    }
    return sum / static_cast<double>(x.layers.size());
}

} // namespace

std::vector<double> layer_squared_norms(const LoraAdapter& x) {
    std::vector<double> out;
    out.reserve(x.layers.size());
    for (const auto& [_, f] : x.layers) {
        out.push_back(squared_norm(x, f));
    }
    return out;
}

double layer_similarity(const LoraAdapter& x, const LoraAdapter& y, const LayerKey& key) {
    require_layer_match(x, y, key);
    const FactorPair& fx = x.at(key);
    const FactorPair& fy = y.at(key);
    return cosine(x.scaling() * y.scaling() * factored_dot(fx, fy), squared_norm(x, fx), squared_norm(y, fy));
}

double adapter_similarity(const LoraAdapter& x, const LoraAdapter& y) {
    require_same_layers(x, y);
    return similarity_with_norms(x, layer_squared_norms(x), y, layer_squared_norms(y));
}

SlotMatch most_similar(const LoraAdapter& incoming, std::span<const SlotCandidate> candidates) {
    if (candidates.empty()) {
        throw Error(ErrorCode::EmptyStore, "no stored adapters to compare against");
    }
    // The incoming norms are shared by every comparison.
    const std::vector<double> incoming_norms = layer_squared_norms(incoming);
    SlotMatch best{0, 0.0};
    bool first = true;
    for (const auto& c : candidates) {
        require_same_layers(incoming, *c.adapter);
        const double s = c.squared_norms
                             ? similarity_with_norms(incoming, incoming_norms, *c.adapter, *c.squared_norms)
                             : similarity_with_norms(incoming, incoming_norms, *c.adapter,
                                                     layer_squared_norms(*c.adapter));
        if (first || s > best.similarity || (s == best.similarity && c.slot_key < best.slot_key)) {
            best = {c.slot_key, s};
            first = false;
        }
    }
    return best;
}

SimilarityMatrix similarity_matrix(std::span<const LoraAdapter> adapters) {
    if (adapters.size() < 2) {
        throw Error(ErrorCode::InsufficientData, "similarity matrix needs at least 2 adapters");
    }
    const auto n = static_cast<Eigen::Index>(adapters.size());
    SimilarityMatrix out;
    out.values = MatrixD::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.adapter_ids.push_back(adapters[i].task_id);
        for (Eigen::Index j = i; j < n; ++j) {
            const double s = adapter_similarity(adapters[i], adapters[j]);
            out.values(i, j) = s;
            out.values(j, i) = s;
        }
    }
    return out;
}

void write_similarity_csv(const SimilarityMatrix& matrix, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
    out << "id";
    for (const auto& id : matrix.adapter_ids) {
        out << ',' << id;
    }
    out << '\n';
    char buf[32];
    for (Eigen::Index i = 0; i < matrix.values.rows(); ++i) {
        out << matrix.adapter_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < matrix.values.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f", matrix.values(i, j));
            out << ',' << buf;
        }
        out << '\n';
    }
}

std::vector<double> pairwise_similarities(std::span<const LoraAdapter> adapters) {
    std::vector<double> sims;
    sims.reserve(adapters.size() * (adapters.size() - 1) / 2);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        for (std::size_t j = i + 1; j < adapters.size(); ++j) {
            sims.push_back(adapter_similarity(adapters[i], adapters[j]));
        }
    }
    return sims;
}

double calibrate_threshold(std::span<const LoraAdapter> held_out) {
    if (held_out.size() < 2) {
        throw Error(ErrorCode::InsufficientData,
                    "threshold calibration needs at least 2 held-out adapters, got " + std::to_string(held_out.size()));
    }
    std::vector<double> sims = pairwise_similarities(held_out);
    const std::size_t mid = sims.size() / 2;
    std::nth_element(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(mid), sims.end());
    const double upper = sims[mid];
    if (sims.size() % 2 == 1) {
        return upper;
    }
    const double lower = *std::max_element(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

} // namespace kmerge
