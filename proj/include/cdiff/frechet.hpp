#pragma once

#include <Eigen/Dense>

#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// Fréchet distance between Gaussians fitted to two feature sets:
//   ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
// Covariances are regularized with 1e-6 I; the matrix square roots go through
// eigendecompositions of symmetrized matrices with eigenvalues clipped at 0.
inline double frechet_distance(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b) {
    if (a.size() < 2 || b.size() < 2)
        fail("frechet", "need at least 2 samples per set, got " + std::to_string(a.size()) +
                            " and " + std::to_string(b.size()));
    const int d = (int)a[0].size();
    for (const auto& v : a)
        if ((int)v.size() != d) fail("frechet", "ragged feature set");
    for (const auto& v : b)
        if ((int)v.size() != d) fail("frechet", "feature dimension mismatch between sets");

    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    auto fit = [&](const std::vector<std::vector<double>>& s, Vec& mu, Mat& sigma) {
        const int n = (int)s.size();
        Mat X(n, d);
        for (int i = 0; i < n; i++)
            for (int j = 0; j < d; j++) X(i, j) = s[(size_t)i][(size_t)j];
        mu = X.colwise().mean();
        Mat C = X.rowwise() - mu.transpose();
        sigma = (C.adjoint() * C) / double(n - 1);
        sigma += 1e-6 * Mat::Identity(d, d);
    };
    Vec mu_a, mu_b;
    Mat sa, sb;
    fit(a, mu_a, sa);
    fit(b, mu_b, sb);

    auto psd_sqrt = [&](const Mat& m) {
        Mat sym = 0.5 * (m + m.transpose());
        Eigen::SelfAdjointEigenSolver<Mat> es(sym);
        Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        return Mat(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
    };
    Mat a_half = psd_sqrt(sa);
    Mat cross = psd_sqrt(a_half * sb * a_half);

    double dist = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    return dist < 0.0 ? 0.0 : dist;
}

// Convenience overload for row-major [n,d] tensors.
inline double frechet_distance(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
        fail("frechet", "expected [n,d] and [m,d] tensors, got " + shape_str(a.shape) + " and " +
                            shape_str(b.shape));
    auto to_rows = [](const Tensor& t) {
        std::vector<std::vector<double>> rows((size_t)t.shape[0]);
        for (int i = 0; i < t.shape[0]; i++) {
            rows[(size_t)i].resize((size_t)t.shape[1]);
            for (int j = 0; j < t.shape[1]; j++) rows[(size_t)i][(size_t)j] = (double)t.at2(i, j);
        }
        return rows;
    };
    return frechet_distance(to_rows(a), to_rows(b));
}

}  // namespace cdiff
