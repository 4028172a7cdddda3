#include "decq/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace decq::metrics {

double psnr_from_mse(double mse, double peak) {
  if (mse <= 0) return kIdenticalPsnr;
  return 10.0 * std::log10(peak * peak / mse);
}

template <typename S>
double psnr(const ImageBatch<S>& a, const ImageBatch<S>& b, double peak) {
  if (a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols()) throw ShapeError("psnr: shape mismatch");
  const double mse = (a.data.template cast<double>() - b.data.template cast<double>()).squaredNorm() /
                     static_cast<double>(a.data.size());
  return psnr_from_mse(mse, peak);
}

VectorXd gaussian_window(Index size, double sigma) {
  VectorXd w(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  for (Index i = 0; i < size; ++i) w(i) = std::exp(-0.5 * std::pow((static_cast<double>(i) - c) / sigma, 2));
  return w / w.sum();
}

namespace {

// Valid-mode separable filtering of one channel plane.
MatrixXd filter_valid(const MatrixXd& plane, const VectorXd& w) {
  const Index k = w.size();
  const Index oh = plane.rows() - k + 1, ow = plane.cols() - k + 1;
  MatrixXd tmp = MatrixXd::Zero(plane.rows(), ow);
  for (Index y = 0; y < plane.rows(); ++y)
    for (Index x = 0; x < ow; ++x) tmp(y, x) = plane.row(y).segment(x, k).dot(w.transpose());
  MatrixXd out = MatrixXd::Zero(oh, ow);
  for (Index y = 0; y < oh; ++y)
    for (Index x = 0; x < ow; ++x) out(y, x) = tmp.col(x).segment(y, k).dot(w);
  return out;
}

}  // namespace

template <typename S>
double ssim(const ImageBatch<S>& a, const ImageBatch<S>& b, const SsimOptions& opts) {
  if (a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols() || a.height != b.height)
    throw ShapeError("ssim: shape mismatch");
  if (a.height < opts.window || a.width < opts.window) throw ShapeError("ssim: image smaller than window");
  const VectorXd w = gaussian_window(opts.window, opts.sigma);
  const double c1 = std::pow(opts.k1 * opts.peak, 2), c2 = std::pow(opts.k2 * opts.peak, 2);
  double total = 0;
  Index planes = 0;
  for (Index n = 0; n < a.batch; ++n) {
    for (Index c = 0; c < a.channels(); ++c) {
      MatrixXd x(a.height, a.width), y(a.height, a.width);
      for (Index r = 0; r < a.height; ++r)
        for (Index col = 0; col < a.width; ++col) {
          x(r, col) = static_cast<double>(a.at(n, r, col, c));
          y(r, col) = static_cast<double>(b.at(n, r, col, c));
        }
      const MatrixXd mx = filter_valid(x, w), my = filter_valid(y, w);
      const MatrixXd sxx = filter_valid(x.cwiseProduct(x), w) - mx.cwiseProduct(mx);
      const MatrixXd syy = filter_valid(y.cwiseProduct(y), w) - my.cwiseProduct(my);
      const MatrixXd sxy = filter_valid(x.cwiseProduct(y), w) - mx.cwiseProduct(my);
      const auto num = (2 * mx.cwiseProduct(my).array() + c1) * (2 * sxy.array() + c2);
      const auto den = (mx.array().square() + my.array().square() + c1) * (sxx.array() + syy.array() + c2);
      total += (num / den).mean();
      ++planes;
    }
  }
  return total / static_cast<double>(planes);
}

GaussianStats fit_gaussian(const MatrixXd& features, double eps) {
  const Index n = features.rows(), d = features.cols();
  if (n < 2) throw DomainError("fit_gaussian: need at least two samples");
  if (!features.allFinite()) throw NumericError("fit_gaussian: non-finite features");
  GaussianStats st;
  st.mean = features.colwise().mean().transpose();
  const MatrixXd centered = features.rowwise() - st.mean.transpose();
  st.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  if (n < d + 1) {
    st.cov += eps * MatrixXd::Identity(d, d);
    st.regularized = true;
  }
  return st;
}

namespace {

MatrixXd psd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
  const VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const VectorXd& mu1, const MatrixXd& cov1, const VectorXd& mu2, const MatrixXd& cov2) {
  if (mu1.size() != mu2.size() || cov1.rows() != mu1.size() || cov2.rows() != mu2.size() ||
      cov1.cols() != cov1.rows() || cov2.cols() != cov2.rows())
    throw ShapeError("frechet_distance: dimension mismatch");
  if (!mu1.allFinite() || !mu2.allFinite() || !cov1.allFinite() || !cov2.allFinite())
    throw NumericError("frechet_distance: non-finite input");
  const MatrixXd s1 = psd_sqrt(cov1);
  const MatrixXd inner = s1 * cov2 * s1;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu1 - mu2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * cross;
  return std::max(0.0, value);
}

namespace {

MatrixXd pairwise_sq_dist(const MatrixXd& a, const MatrixXd& b) {
  const VectorXd an = a.rowwise().squaredNorm(), bn = b.rowwise().squaredNorm();
  MatrixXd d = -2.0 * a * b.transpose();
  d.colwise() += an;
  d.rowwise() += bn.transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

double knn_coverage(const MatrixXd& reference, const MatrixXd& queries, Index k) {
  if (reference.rows() <= k) throw DomainError("knn_coverage: need more than k reference samples");
  const MatrixXd rr = pairwise_sq_dist(reference, reference);
  VectorXd radius(reference.rows());
  for (Index i = 0; i < reference.rows(); ++i) {
    std::vector<double> row;
    for (Index j = 0; j < reference.rows(); ++j)
      if (j != i) row.push_back(rr(i, j));
    std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
    radius(i) = row[static_cast<std::size_t>(k - 1)];
  }
  const MatrixXd qr = pairwise_sq_dist(queries, reference);
  Index inside = 0;
  for (Index q = 0; q < queries.rows(); ++q) {
    bool hit = false;
    for (Index r = 0; r < reference.rows() && !hit; ++r) hit = qr(q, r) <= radius(r) + 1e-12;
    inside += hit ? 1 : 0;
  }
  return static_cast<double>(inside) / static_cast<double>(queries.rows());
}

DistributionReport compare_features(const MatrixXd& real, const MatrixXd& fake, Index k) {
  if (real.cols() != fake.cols()) throw ShapeError("compare_features: feature width mismatch");
  DistributionReport rep;
  const GaussianStats a = fit_gaussian(real), b = fit_gaussian(fake);
  rep.fid = frechet_distance(a.mean, a.cov, b.mean, b.cov);
  rep.regularized = a.regularized || b.regularized;
  rep.precision = knn_coverage(real, fake, k);
  rep.recall = knn_coverage(fake, real, k);
  rep.real_count = real.rows();
  rep.fake_count = fake.rows();
  return rep;
}

double inception_score(const MatrixXd& p) {
  const VectorXd marginal = p.colwise().mean().transpose();
  double kl = 0;
  for (Index i = 0; i < p.rows(); ++i)
    for (Index c = 0; c < p.cols(); ++c)
      if (p(i, c) > 0) kl += p(i, c) * (std::log(p(i, c)) - std::log(std::max(marginal(c), 1e-300)));
  return std::exp(kl / static_cast<double>(p.rows()));
}

template <typename S>
MatrixXd pool_tokens(const TokenSequence<S>& tokens) {
  MatrixXd out(tokens.batch, tokens.channels());
  for (Index b = 0; b < tokens.batch; ++b) out.row(b) = tokens.sample(b).template cast<double>().colwise().mean();
  return out;
}

std::vector<Index> nearest_neighbors(const MatrixXd& pool, Index anchor, Index k) {
  if (k >= pool.rows()) throw DomainError("nearest_neighbors: k must be smaller than the pool size");
  if (anchor < 0 || anchor >= pool.rows()) throw DomainError("nearest_neighbors: anchor out of range");
  const VectorXd norms = pool.rowwise().norm();
  const VectorXd sims = (pool * pool.row(anchor).transpose()).cwiseQuotient(
      (norms * norms(anchor)).cwiseMax(1e-300));
  std::vector<Index> idx;
  for (Index i = 0; i < pool.rows(); ++i)
    if (i != anchor) idx.push_back(i);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Index a, Index b) {
    if (sims(a) != sims(b)) return sims(a) > sims(b);
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

ProportionTest two_proportion_z_test(double x1, double n1, double x2, double n2) {
  if (n1 <= 0 || n2 <= 0) throw DomainError("two_proportion_z_test: empty group");
  ProportionTest t;
  t.p1 = x1 / n1;
  t.p2 = x2 / n2;
  const double pooled = (x1 + x2) / (n1 + n2);
  const double se = std::sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2));
  if (se == 0) {
    t.z = t.p1 > t.p2 ? std::numeric_limits<double>::infinity() : 0.0;
    t.p_value = t.p1 > t.p2 ? 0.0 : 1.0;
    return t;
  }
  t.z = (t.p1 - t.p2) / se;
  t.p_value = 0.5 * std::erfc(t.z / std::sqrt(2.0));
  return t;
}

template double psnr<float>(const ImageBatch<float>&, const ImageBatch<float>&, double);
template double psnr<double>(const ImageBatch<double>&, const ImageBatch<double>&, double);
template double ssim<float>(const ImageBatch<float>&, const ImageBatch<float>&, const SsimOptions&);
template double ssim<double>(const ImageBatch<double>&, const ImageBatch<double>&, const SsimOptions&);
template MatrixXd pool_tokens<float>(const TokenSequence<float>&);
template MatrixXd pool_tokens<double>(const TokenSequence<double>&);

}  // namespace decq::metrics
