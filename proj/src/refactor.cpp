// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/refactor.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "kmerge/error.hpp"

namespace kmerge {

std::string_view to_string(RankMode mode) {
    switch (mode) {
    case RankMode::svd_truncate: return "svd_truncate";
    case RankMode::factor_average: return "factor_average";
    }
    return "?";
}

RankMode parse_rank_mode(std::string_view name) {
    if (name == "svd_truncate" || name == "svd-truncate" || name == "svd") {
        return RankMode::svd_truncate;
    }
    if (name == "factor_average" || name == "factor-average") {
        return RankMode::factor_average;
    }
    throw Error(ErrorCode::ConfigError, "unknown rank mode '" + std::string(name) + "'");
}

void RankPolicy::validate() const {
    if (target_rank < 1) {
        throw Error(ErrorCode::ConfigError, "target rank must be >= 1, got " + std::to_string(target_rank));
    }
}

namespace {

struct ThinSvd {
    Eigen::MatrixXd u;  // rows x k
    Eigen::VectorXd s;  // k, descending
    Eigen::MatrixXd v;  // cols x k
};

ThinSvd dense_svd(const MatrixD& m) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

// Eigenvalues of a factor Gram matrix below this fraction of the largest are
// treated as rounding noise (singular values below ~1e-6 of the largest).
constexpr double kGramCutoff = 1e-12;

// For f (rows x R): f ~= Q T with Q = f W orthonormal (rows x k) and
// T (k x R), both read off the eigendecomposition of the small f^T f.
struct GramFactor {
    Eigen::MatrixXd w;  // R x k
    Eigen::MatrixXd t;  // k x R
};

GramFactor gram_factor(const Eigen::MatrixXd& f) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(f.transpose() * f);
    const Eigen::VectorXd& lambda = es.eigenvalues();  // ascending
    const Eigen::Index n = lambda.size();
    const double cutoff = kGramCutoff * std::max(lambda(n - 1), 0.0);
    Eigen::Index k = 0;
    while (k < n && lambda(n - 1 - k) > cutoff) {
        ++k;
    }
    GramFactor out;
    out.w.resize(n, k);
    out.t.resize(k, n);
    for (Eigen::Index i = 0; i < k; ++i) {
        const double root = std::sqrt(lambda(n - 1 - i));
        out.w.col(i) = es.eigenvectors().col(n - 1 - i) / root;
        out.t.row(i) = es.eigenvectors().col(n - 1 - i).transpose() * root;
    }
    return out;
}

// dW = Bcat * Acat^T with Bcat = [w_i B_i] and Acat = [A_i^T]. Writing
// Bcat = Qb Tb and Acat = Qa Ta leaves only the small core Tb Ta^T to
// decompose; no rows x cols matrix is ever formed.
ThinSvd factored_svd(const DeltaMatrix& delta, Eigen::Index keep) {
    const Eigen::Index total = delta.factored_rank();
    Eigen::MatrixXd bcat(delta.rows(), total);
    Eigen::MatrixXd acat(delta.cols(), total);
    Eigen::Index col = 0;
    for (const auto& t : delta.terms()) {
        const Eigen::Index r = t.a.rows();
        bcat.middleCols(col, r) = t.weight * t.b.cast<double>();
        acat.middleCols(col, r) = t.a.cast<double>().transpose();
        col += r;
    }
    const GramFactor gb = gram_factor(bcat);
    const GramFactor ga = gram_factor(acat);
    if (gb.t.rows() == 0 || ga.t.rows() == 0) {
        return {Eigen::MatrixXd(delta.rows(), 0), Eigen::VectorXd(0), Eigen::MatrixXd(delta.cols(), 0)};
    }
    Eigen::BDCSVD<Eigen::MatrixXd> core(gb.t * ga.t.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    // Only the leading `keep` singular vectors are ever used.
    const Eigen::Index k = std::min(keep, core.singularValues().size());
    return {bcat * (gb.w * core.matrixU().leftCols(k)), core.singularValues(),
            acat * (ga.w * core.matrixV().leftCols(k))};
}

ThinSvd decompose(const DeltaMatrix& delta, Eigen::Index keep) {
    const Eigen::Index total = delta.factored_rank();
    if (!delta.has_dense() && total > 0 && 2 * total <= std::min(delta.rows(), delta.cols())) {
        return factored_svd(delta, keep);
    }
    return dense_svd(delta.to_dense());
}

} // namespace

RefactorResult refactor(const MergedDelta& merged, const RankPolicy& policy, const AdapterMetadata& metadata) {
    if (policy.mode != RankMode::svd_truncate) {
        throw Error(ErrorCode::UnsupportedMode,
                    "factor_average cannot refactor a dW-space merge result; average the factors directly");
    }
    policy.validate();
    if (!(metadata.scale_numerator > 0.0)) {
        throw Error(ErrorCode::ConfigError, "scale numerator must be positive");
    }
    const int r = policy.target_rank;
    RefactorResult out;
    out.adapter.task_id = metadata.task_id;
    out.adapter.problem_type = metadata.problem_type;
    out.adapter.language = metadata.language;
    out.adapter.rank = r;
    out.adapter.scale_numerator = metadata.scale_numerator;
    // Each factor absorbs sqrt(rank / scale) so that scaling() * B * A = dW_r.
    const double unscale = std::sqrt(static_cast<double>(r) / metadata.scale_numerator);

    for (const auto& [key, delta] : merged.layers) {
        const ThinSvd svd = decompose(delta, r);
        const Eigen::Index kept = std::min<Eigen::Index>(r, svd.s.size());
        const double total_sq = svd.s.squaredNorm();
        const double tail_sq = svd.s.tail(svd.s.size() - kept).squaredNorm();
        out.residuals[key] = total_sq > 0.0 ? std::sqrt(tail_sq / total_sq) : 0.0;

        FactorPair pair;
        pair.a = MatrixF::Zero(r, delta.cols());
        pair.b = MatrixF::Zero(delta.rows(), r);
        if (total_sq > 0.0) {
            const Eigen::VectorXd root = svd.s.head(kept).cwiseSqrt() * unscale;
            pair.a.topRows(kept) = (root.asDiagonal() * svd.v.leftCols(kept).transpose()).cast<float>();
            pair.b.leftCols(kept) = (svd.u.leftCols(kept) * root.asDiagonal()).cast<float>();
        }
        out.adapter.layers.emplace(key, std::move(pair));
    }
    return out;
}

LoraAdapter factor_average(const LoraAdapter& x, double weight_x, const LoraAdapter& y, double weight_y,
                           const AdapterMetadata& metadata) {
    require_compatible(x, y);
    if (x.rank != y.rank || x.scale_numerator != y.scale_numerator) {
        throw Error(ErrorCode::UnsupportedMode, "factor averaging needs equal rank and scaling");
    }
    LoraAdapter out;
    out.task_id = metadata.task_id;
    out.problem_type = metadata.problem_type;
    out.language = metadata.language;
    out.rank = x.rank;
    out.scale_numerator = x.scale_numerator;
    for (const auto& [key, px] : x.layers) {
        const FactorPair& py = y.layers.at(key);
        FactorPair pair;
        pair.a = (weight_x * px.a.cast<double>() + weight_y * py.a.cast<double>()).cast<float>();
        pair.b = (weight_x * px.b.cast<double>() + weight_y * py.b.cast<double>()).cast<float>();
        out.layers.emplace(key, std::move(pair));
    }
    return out;
}

} // namespace kmerge
