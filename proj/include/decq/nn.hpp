#pragma once

#include "decq/graph.hpp"
#include "decq/ops.hpp"

#include <cmath>
#include <random>
#include <string>

namespace decq {

using Rng = std::mt19937_64;

template <typename S>
Matrix<S> random_normal(Index rows, Index cols, S stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <typename S>
Matrix<S> xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix<S> m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

/// 1D sine-cosine code of `pos` with `dim` channels: [sin(pos w_i), cos(pos w_i)],
/// w_i = 10000^(-i / (dim/2)).
template <typename S>
RowVector<S> sincos_1d(double pos, Index dim) {
  if (dim % 2 != 0) throw ShapeError("sincos_1d: dim must be even");
  const Index half = dim / 2;
  RowVector<S> out(dim);
  for (Index i = 0; i < half; ++i) {
    const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out(i) = static_cast<S>(std::sin(pos * omega));
    out(half + i) = static_cast<S>(std::cos(pos * omega));
  }
  return out;
}

/// Fixed 2D embedding over a grid x grid layout, token t at (t / grid, t % grid):
/// row code in the first dim/2 channels, column code in the rest.
template <typename S>
Matrix<S> sincos_2d(Index grid, Index dim) {
  if (dim % 4 != 0) throw ShapeError("sincos_2d: dim must be divisible by 4");
  Matrix<S> pe(grid * grid, dim);
  for (Index r = 0; r < grid; ++r)
    for (Index c = 0; c < grid; ++c) {
      pe.block(r * grid + c, 0, 1, dim / 2) = sincos_1d<S>(static_cast<double>(r), dim / 2);
      pe.block(r * grid + c, dim / 2, 1, dim / 2) = sincos_1d<S>(static_cast<double>(c), dim / 2);
    }
  return pe;
}

namespace nn {

template <typename S>
struct Linear {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  static Linear create(ParameterStore<S>& store, const std::string& name, Index in, Index out, Rng& rng,
                       bool with_bias = true) {
    Linear l;
    l.weight = &store.add(name + ".weight", xavier_uniform<S>(in, out, rng));
    if (with_bias) l.bias = &store.add(name + ".bias", Matrix<S>::Zero(1, out));
    return l;
  }

  Index in() const { return weight->value.rows(); }
  Index out() const { return weight->value.cols(); }

  Var operator()(Graph<S>& g, Var x) const {
    return ops::linear(g, x, g.param(*weight), bias ? g.param(*bias) : Var{});
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  static LayerNorm create(ParameterStore<S>& store, const std::string& name, Index dim) {
    LayerNorm ln;
    ln.gamma = &store.add(name + ".gamma", Matrix<S>::Ones(1, dim));
    ln.beta = &store.add(name + ".beta", Matrix<S>::Zero(1, dim));
    return ln;
  }

  Var operator()(Graph<S>& g, Var x) const { return ops::layer_norm(g, x, g.param(*gamma), g.param(*beta)); }
};

/// Multi-head attention with Q/K/V/O projections.
template <typename S>
struct Attention {
  Linear<S> q, k, v, o;
  Index heads = 1;

  static Attention create(ParameterStore<S>& store, const std::string& name, Index dim, Index heads, Rng& rng) {
    if (heads <= 0 || dim % heads != 0) throw ConfigError(name + ": dim must be divisible by heads");
    Attention a;
    a.q = Linear<S>::create(store, name + ".q", dim, dim, rng);
    a.k = Linear<S>::create(store, name + ".k", dim, dim, rng);
    a.v = Linear<S>::create(store, name + ".v", dim, dim, rng);
    a.o = Linear<S>::create(store, name + ".o", dim, dim, rng);
    a.heads = heads;
    return a;
  }

  Var cross(Graph<S>& g, Var queries, Var context, Index batch) const {
    Var mixed = ops::attention(g, q(g, queries), k(g, context), v(g, context), batch, heads);
    return o(g, mixed);
  }

  Var self(Graph<S>& g, Var x, Index batch) const { return cross(g, x, x, batch); }
};

template <typename S>
struct FeedForward {
  Linear<S> fc1, fc2;

  static FeedForward create(ParameterStore<S>& store, const std::string& name, Index dim, Index hidden, Rng& rng) {
    return FeedForward{Linear<S>::create(store, name + ".fc1", dim, hidden, rng),
                       Linear<S>::create(store, name + ".fc2", hidden, dim, rng)};
  }

  Var operator()(Graph<S>& g, Var x) const { return fc2(g, ops::gelu(g, fc1(g, x))); }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then h + FFN(LN(h)).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  Attention<S> attn;
  FeedForward<S> ffn;

  static TransformerBlock create(ParameterStore<S>& store, const std::string& name, Index dim, Index heads,
                                 Index ffn_dim, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm<S>::create(store, name + ".ln1", dim);
    b.attn = Attention<S>::create(store, name + ".attn", dim, heads, rng);
    b.ln2 = LayerNorm<S>::create(store, name + ".ln2", dim);
    b.ffn = FeedForward<S>::create(store, name + ".ffn", dim, ffn_dim, rng);
    return b;
  }

  Var operator()(Graph<S>& g, Var x, Index batch) const {
    Var h = ops::add(g, x, attn.self(g, ln1(g, x), batch));
    return ops::add(g, h, ffn(g, ln2(g, h)));
  }
};

}  // namespace nn
}  // namespace decq
