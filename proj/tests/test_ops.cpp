#include "check.hpp"
#include "decq/nn.hpp"
#include "decq/ops.hpp"

#include <doctest.h>

using namespace decq;
using test::gradient_error;
using test::normal_matrix;

namespace {

struct Fixture {
  ParameterStore<double> store;
  Parameter<double>& add(const std::string& name, Index r, Index c, std::uint64_t seed, double sd = 1.0) {
    return store.add(name, normal_matrix<double>(r, c, seed, sd));
  }
};

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Fixture f;
  auto& x = f.add("x", 6, 4, 1);
  auto& w = f.add("w", 4, 3, 2);
  auto& b = f.add("b", 1, 3, 3);
  auto loss = [&](Graph<double>& g) {
    Var h = ops::linear(g, g.param(x), g.param(w), g.param(b));
    Var a = ops::gelu(g, h);
    Var s = ops::silu(g, ops::scale(g, h, 0.5));
    return ops::mse(g, ops::mul(g, a, s), ops::sub(g, a, ops::relu(g, h)));
  };
  CHECK(gradient_error(loss, {&x, &w, &b}) < 1e-6);
}

TEST_CASE("layer norm with and without affine terms") {
  Fixture f;
  auto& x = f.add("x", 5, 8, 4);
  auto& gamma = f.add("gamma", 1, 8, 5);
  auto& beta = f.add("beta", 1, 8, 6);
  auto& target = f.add("t", 5, 8, 7);
  target.trainable = false;
  auto loss = [&](Graph<double>& g) {
    Var a = ops::layer_norm(g, g.param(x));
    Var c = ops::layer_norm(g, g.param(x), g.param(gamma), g.param(beta));
    return ops::mse(g, ops::add(g, a, c), g.param(target));
  };
  CHECK(gradient_error(loss, {&x, &gamma, &beta}) < 1e-6);

  Graph<double> g;
  const auto& y = g.value(ops::layer_norm(g, g.constant(x.value)));
  for (Index r = 0; r < y.rows(); ++r) {
    CHECK(y.row(r).mean() == doctest::Approx(0.0).epsilon(1e-12));
    const double var = y.row(r).squaredNorm() / static_cast<double>(y.cols());
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("multi-head attention gradient and per-sample isolation") {
  Fixture f;
  const Index batch = 2, nq = 3, nk = 4, c = 6;
  auto& q = f.add("q", batch * nq, c, 8);
  auto& k = f.add("k", batch * nk, c, 9);
  auto& v = f.add("v", batch * nk, c, 10);
  auto loss = [&](Graph<double>& g) {
    Var o = ops::attention(g, g.param(q), g.param(k), g.param(v), batch, 2);
    return ops::mse(g, o, g.constant(Matrix<double>::Zero(batch * nq, c)));
  };
  CHECK(gradient_error(loss, {&q, &k, &v}) < 1e-6);

  // Changing sample 1's keys leaves sample 0's output untouched.
  Graph<double> g0, g1;
  Matrix<double> k2 = k.value;
  k2.bottomRows(nk).setRandom();
  const Matrix<double> o0 = g0.value(ops::attention(g0, g0.constant(q.value), g0.constant(k.value),
                                                    g0.constant(v.value), batch, 2));
  const Matrix<double> o1 =
      g1.value(ops::attention(g1, g1.constant(q.value), g1.constant(k2), g1.constant(v.value), batch, 2));
  CHECK(o0.topRows(nq) == o1.topRows(nq));
  CHECK(o0.bottomRows(nq) != o1.bottomRows(nq));
}

TEST_CASE("attention probabilities are row stochastic") {
  const Matrix<double> q = normal_matrix<double>(5, 4, 11), k = normal_matrix<double>(7, 4, 12);
  const Matrix<double> p = ops::attention_probs<double>(q, k);
  CHECK(p.rows() == 5);
  CHECK(p.cols() == 7);
  for (Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0));
  CHECK(p.minCoeff() >= 0.0);
}

TEST_CASE("token layout ops: concat, slice, tile, modulate, gate, mean") {
  Fixture f;
  const Index batch = 2;
  auto& a = f.add("a", batch * 3, 4, 13);
  auto& b = f.add("b", batch * 2, 4, 14);
  auto& table = f.add("table", 5, 4, 15);
  auto& shift = f.add("shift", batch, 4, 16);
  auto& scale = f.add("scale", batch, 4, 17);
  auto& gate = f.add("gate", batch, 4, 18);
  auto& rows = f.add("rows", 3, 4, 19);
  auto loss = [&](Graph<double>& g) {
    Var cat = ops::concat_tokens(g, g.param(a), g.param(b), batch);
    Var pos = ops::add_tiled(g, cat, g.param(table), batch);
    Var mod = ops::modulate(g, pos, g.param(shift), g.param(scale), batch);
    Var gated = ops::gate(g, mod, g.param(gate), batch);
    Var sl = ops::slice_tokens(g, gated, batch, 1, 3);
    Var ch = ops::concat_channels(g, sl, ops::slice_channels(g, sl, 1, 2));
    Var mean = ops::mean_tokens(g, ch, batch);
    Var tiled = ops::tile(g, g.param(rows), batch);
    const int idx[] = {2, 0, 2};
    Var gathered = ops::gather_rows(g, g.param(rows), idx);
    return ops::add(g, ops::mse(g, mean, g.constant(Matrix<double>::Zero(batch, 6))),
                    ops::mean_abs_error(g, tiled, ops::tile(g, gathered, batch)));
  };
  CHECK(gradient_error(loss, {&a, &b, &table, &shift, &scale, &gate, &rows}) < 1e-6);

  Graph<double> g;
  const auto& cat = g.value(ops::concat_tokens(g, g.constant(a.value), g.constant(b.value), batch));
  CHECK(cat.row(0) == a.value.row(0));
  CHECK(cat.row(3) == b.value.row(0));
  CHECK(cat.row(5) == a.value.row(3));
  CHECK(cat.row(9) == b.value.row(3));
}

TEST_CASE("cross entropy gradient and value") {
  Fixture f;
  auto& logits = f.add("logits", 4, 3, 20);
  const int labels[] = {0, 2, 1, 2};
  auto loss = [&](Graph<double>& g) { return ops::cross_entropy<double>(g, g.param(logits), labels); };
  CHECK(gradient_error(loss, {&logits}) < 1e-6);

  Graph<double> g;
  Var z = g.constant(Matrix<double>::Zero(2, 4));
  const int two[] = {1, 3};
  CHECK(g.value(ops::cross_entropy<double>(g, z, two))(0, 0) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("im2col and unpatchify") {
  Fixture f;
  const Index batch = 2, h = 4, w = 4, c = 3;
  auto& img = f.add("img", batch * h * w, c, 21);
  auto loss = [&](Graph<double>& g) {
    Var cols = ops::im2col(g, g.param(img), batch, h, w, 3, 2, 1);
    return ops::mse(g, cols, g.constant(Matrix<double>::Ones(batch * 4, 27)));
  };
  CHECK(gradient_error(loss, {&img}) < 1e-6);

  // Centre tap of a 3x3 stride-1 window reproduces the input pixel.
  Graph<double> g;
  const auto& cols = g.value(ops::im2col(g, g.constant(img.value), batch, h, w, 3, 1, 1));
  CHECK(cols.rows() == batch * h * w);
  CHECK(cols.block(0, 4 * c, cols.rows(), c).isApprox(img.value));
  // Top-left window of the first image has zero padding above and left.
  CHECK(cols.block(0, 0, 1, c).isZero());

  ImageBatch<double> x(img.value, batch, h, w);
  const Matrix<double> patches = ops::patchify_pixels(x, 2);
  CHECK(patches.rows() == batch * 4);
  CHECK(patches.cols() == 2 * 2 * c);
  const ImageBatch<double> back = ops::unpatchify_pixels(patches, batch, 2, 2, c);
  CHECK(back.data == x.data);
  Graph<double> g2;
  CHECK(g2.value(ops::unpatchify(g2, g2.constant(patches), batch, 2, 2, c)) == x.data);
}

TEST_CASE("frozen parameters receive no gradient") {
  ParameterStore<double> store;
  auto& w = store.add("w", normal_matrix<double>(3, 3, 22), false);
  auto& v = store.add("v", normal_matrix<double>(3, 3, 23));
  Graph<double> g;
  Var loss = ops::mse(g, ops::matmul(g, g.param(w), g.param(v)), g.constant(Matrix<double>::Zero(3, 3)));
  g.backward(loss);
  CHECK((w.grad.size() == 0 || w.grad.isZero()));
  CHECK_FALSE(v.grad.isZero());
}

TEST_CASE("sine-cosine position codes") {
  const RowVector<double> e = sincos_1d<double>(0.0, 8);
  CHECK(e.head(4).isZero());
  CHECK(e.tail(4).isApprox(RowVector<double>::Ones(4)));
  const Matrix<double> pe = sincos_2d<double>(3, 8);
  CHECK(pe.rows() == 9);
  CHECK(pe(4, 0) == doctest::Approx(std::sin(1.0)));  // token (1, 1), row code
  CHECK(pe(5, 4) == doctest::Approx(std::sin(2.0)));  // token (1, 2), column code
  CHECK_THROWS_AS(sincos_2d<double>(3, 6), ShapeError);
}
