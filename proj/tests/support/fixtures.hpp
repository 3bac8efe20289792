// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <initializer_list>
#include <random>
#include <string>
#include <unistd.h>

#include "kmerge/adapter.hpp"
#include "kmerge/policy.hpp"
#include "kmerge/synth.hpp"

namespace fixture {

using kmerge::FactorPair;
using kmerge::LayerKey;
using kmerge::LoraAdapter;
using kmerge::MatrixF;
using kmerge::Projection;

inline MatrixF mat(std::initializer_list<std::initializer_list<float>> rows) {
    MatrixF m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (float v : r) {
            m(i, j++) = v;
        }
        ++i;
    }
    return m;
}

/// Single-layer adapter (layer 0, query) from explicit factors.
inline LoraAdapter single(const std::string& id, MatrixF b, MatrixF a, double scale = 1.0) {
    LoraAdapter x;
    x.task_id = id;
    x.problem_type = "t";
    x.language = "l";
    x.rank = static_cast<int>(a.rows());
    x.scale_numerator = scale;
    x.layers.emplace(LayerKey{0, Projection::query}, FactorPair{std::move(a), std::move(b)});
    return x;
}

/// Rank-1 adapter over `layers` layers whose update is e_i e_j^T (scaled) in
/// every layer of a d x d shape.
inline LoraAdapter unit_outer(const std::string& id, int i, int j, int d = 4, int layers = 1, double scale = 1.0) {
    LoraAdapter x;
    x.task_id = id;
    x.problem_type = "t";
    x.language = "l";
    x.rank = 1;
    x.scale_numerator = scale;
    for (int l = 0; l < layers; ++l) {
        for (auto p : kmerge::kProjections) {
            FactorPair f{MatrixF::Zero(1, d), MatrixF::Zero(d, 1)};
            f.b(i, 0) = 1.0f;
            f.a(0, j) = 1.0f;
            x.layers.emplace(LayerKey{l, p}, std::move(f));
        }
    }
    return x;
}

inline kmerge::GeneratorConfig small_generator(std::uint64_t seed = 0, int alpha = 3, int beta = 4) {
    kmerge::GeneratorConfig g;
    g.alpha_types = alpha;
    g.beta_langs = beta;
    g.num_layers = 2;
    for (auto& p : g.projections) {
        p = {16, 12};
    }
    g.seed = seed;
    return g;
}

inline kmerge::PolicyConfig policy(int k, kmerge::Variant v = kmerge::Variant::k_merge,
                                   std::optional<double> s = std::nullopt, int rank = 4) {
    kmerge::PolicyConfig c;
    c.budget_k = k;
    c.variant = v;
    c.threshold_s = s;
    c.rank_policy.target_rank = rank;
    return c;
}

/// Fresh per-process scratch directory, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name) {
        path_ = std::filesystem::temp_directory_path() /
                ("kmerge_test_" + std::to_string(::getpid()) + "_" + name + "_" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::filesystem::path path_;
};

} // namespace fixture
