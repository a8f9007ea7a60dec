#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "avafit/losses.hpp"

namespace avafit {

/// Gaussian moments of pooled feature descriptors over an image corpus.
struct FrechetStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    /// Requires at least 50 images for stable covariance estimates.
    static FrechetStats from_images(const FeatureExtractor& feat, const std::vector<Image>& imgs);
};

/// d^2 = ||m1-m2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}), computed via a
/// symmetric eigendecomposition.
real frechet_distance(const FrechetStats& a, const FrechetStats& b);

}  // namespace avafit
