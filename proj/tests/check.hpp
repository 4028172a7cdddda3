#pragma once

#include "decq/graph.hpp"

#include <functional>
#include <random>
#include <vector>

namespace decq::test {

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over every
/// entry of every parameter, with central differences of step h.
inline double gradient_error(const std::function<Var(Graph<double>&)>& loss_fn,
                             const std::vector<Parameter<double>*>& params, double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(loss_fn(g));
  }
  double diff = 0, na = 0, nn = 0;
  for (auto* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + h;
      Graph<double> gp;
      const double up = gp.value(loss_fn(gp))(0, 0);
      x = saved - h;
      Graph<double> gm;
      const double down = gm.value(loss_fn(gm))(0, 0);
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[i];
      diff += (analytic - numeric) * (analytic - numeric);
      na += analytic * analytic;
      nn += numeric * numeric;
    }
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nn));
  return scale > 0 ? std::sqrt(diff) / scale : std::sqrt(diff);
}

template <typename S>
Matrix<S> normal_matrix(Index rows, Index cols, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <typename S>
ImageBatch<S> random_images(Index batch, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  ImageBatch<S> img(batch, size, size, 3);
  for (Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = static_cast<S>(dist(rng));
  return img;
}

}  // namespace decq::test
