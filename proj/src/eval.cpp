#include "avafit/eval.hpp"

#include <cmath>

namespace avafit {

FrechetStats FrechetStats::from_images(const FeatureExtractor& feat, const std::vector<Image>& imgs) {
    if (imgs.size() < 50)
        throw ArgumentError("FrechetStats: need at least 50 images, got " + std::to_string(imgs.size()));
    const int d = feat.descriptor_dim();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(imgs.size()), d);
    for (size_t n = 0; n < imgs.size(); ++n) {
        const auto desc = feat.pooled_descriptor(imgs[n]);
        for (int j = 0; j < d; ++j) x(static_cast<Eigen::Index>(n), j) = desc[static_cast<size_t>(j)];
    }
    FrechetStats s;
    s.mean = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
    s.cov = centered.transpose() * centered / static_cast<real>(imgs.size() - 1);
    return s;
}

namespace {
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace

real frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    if (a.mean.size() != b.mean.size()) throw ArgumentError("frechet_distance: dimension mismatch");
    const real mean_term = (a.mean - b.mean).squaredNorm();
    // tr((C1 C2)^{1/2}) = tr((S1 C2 S1)^{1/2}) with S1 = C1^{1/2}; the inner
    // matrix is symmetric PSD, so a self-adjoint eigendecomposition suffices
    const Eigen::MatrixXd s1 = psd_sqrt(a.cov);
    const Eigen::MatrixXd inner = s1 * b.cov * s1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
    const real tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const real d2 = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d2);
}

}  // namespace avafit
