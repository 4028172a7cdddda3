#pragma once

#include "decq/tensor.hpp"

#include <limits>
#include <vector>

namespace decq::metrics {

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

/// Sentinel PSNR for identical inputs.
inline constexpr double kIdenticalPsnr = std::numeric_limits<double>::infinity();

double psnr_from_mse(double mse, double peak);

/// 10 log10(peak^2 / MSE). `peak` is the dynamic range (2 for [-1, 1]).
/// Returns kIdenticalPsnr when a == b.
template <typename S>
double psnr(const ImageBatch<S>& a, const ImageBatch<S>& b, double peak = 2.0);

struct SsimOptions {
  Index window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 2.0;
};

/// Mean local SSIM over valid Gaussian windows, averaged over channels and
/// batch. Throws ShapeError when the image is smaller than the window.
template <typename S>
double ssim(const ImageBatch<S>& a, const ImageBatch<S>& b, const SsimOptions& opts = {});

/// Separable normalized Gaussian window weights.
VectorXd gaussian_window(Index size, double sigma);

struct GaussianStats {
  VectorXd mean;
  MatrixXd cov;
  bool regularized = false;
};

/// Mean and unbiased covariance of feature rows. With fewer than dim + 1
/// samples, eps * I is added and `regularized` is set.
GaussianStats fit_gaussian(const MatrixXd& features, double eps = 1e-6);

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the trace term taken
/// from the eigenvalues of the symmetric S1^(1/2) S2 S1^(1/2) clamped at 0.
double frechet_distance(const VectorXd& mu1, const MatrixXd& cov1, const VectorXd& mu2, const MatrixXd& cov2);

struct DistributionReport {
  double fid = 0;
  double precision = 0;
  double recall = 0;
  Index real_count = 0;
  Index fake_count = 0;
  bool regularized = false;
};

/// Fraction of `queries` rows inside the k-NN ball (k-th neighbor distance,
/// self excluded) of at least one `reference` row.
double knn_coverage(const MatrixXd& reference, const MatrixXd& queries, Index k);

/// Frechet distance between Gaussian fits of two feature sets plus k-NN
/// precision (fake inside real manifold) and recall (real inside fake).
DistributionReport compare_features(const MatrixXd& real, const MatrixXd& fake, Index k = 3);

/// exp(E_x KL(p(y|x) || p(y))) over rows of class probabilities.
double inception_score(const MatrixXd& probabilities);

/// Mean over the tokens of each sample: batch x C.
template <typename S>
MatrixXd pool_tokens(const TokenSequence<S>& tokens);

/// Top-k rows of `pool` by cosine similarity to row `anchor`, anchor
/// excluded, ties broken by lower index. Throws DomainError if k >= rows.
std::vector<Index> nearest_neighbors(const MatrixXd& pool, Index anchor, Index k);

struct ProportionTest {
  double p1 = 0, p2 = 0, z = 0, p_value = 1;
};

/// One-sided two-proportion z-test of H1: x1/n1 > x2/n2 (pooled variance).
ProportionTest two_proportion_z_test(double x1, double n1, double x2, double n2);

}  // namespace decq::metrics
