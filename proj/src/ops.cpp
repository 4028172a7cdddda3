#include "decq/ops.hpp"

#include <cmath>
#include <memory>

namespace decq::ops {

namespace {

template <typename S>
void require_same_shape(const Matrix<S>& a, const Matrix<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

template <typename S>
Index tokens_per_sample(const Matrix<S>& x, Index batch, const char* op) {
  if (batch <= 0 || x.rows() % batch != 0)
    throw ShapeError(std::string(op) + ": rows " + std::to_string(x.rows()) + " not divisible by batch " +
                     std::to_string(batch));
  return x.rows() / batch;
}

}  // namespace

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Matrix<S> y = g.value(a) + g.value(b);
  return g.record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(a, dy);
    g.accumulate(b, dy);
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Matrix<S> y = g.value(a) - g.value(b);
  return g.record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(a, dy);
    g.accumulate(b, -dy);
  });
}

template <typename S>
Var mul(Graph<S>& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Matrix<S> y = g.value(a).cwiseProduct(g.value(b));
  return g.record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& dy) {
    if (g.requires_grad(a)) g.accumulate(a, dy.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, dy.cwiseProduct(g.value(a)));
  });
}

template <typename S>
Var scale(Graph<S>& g, Var a, S factor) {
  Matrix<S> y = g.value(a) * factor;
  return g.record(std::move(y), {a}, [a, factor](Graph<S>& g, const Matrix<S>& dy) { g.accumulate(a, dy * factor); });
}

template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var bias) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  if (X.cols() != W.rows())
    throw ShapeError("linear: input width " + std::to_string(X.cols()) + " != weight rows " +
                     std::to_string(W.rows()));
  Matrix<S> y(X.rows(), W.cols());
  y.noalias() = X * W;
  if (bias.valid()) {
    if (g.value(bias).cols() != W.cols()) throw ShapeError("linear: bias width mismatch");
    y.rowwise() += g.value(bias).row(0);
  }
  return g.record(std::move(y), {x, w, bias}, [x, w, bias](Graph<S>& g, const Matrix<S>& dy) {
    if (g.requires_grad(x)) g.accumulate(x, dy * g.value(w).transpose());
    if (g.requires_grad(w)) g.accumulate(w, g.value(x).transpose() * dy);
    if (bias.valid() && g.requires_grad(bias)) g.accumulate(bias, dy.colwise().sum());
  });
}

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  return linear(g, a, b, Var{});
}

template <typename S>
Var gelu(Graph<S>& g, Var x) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  Matrix<S> y = g.value(x).unaryExpr([=](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  return g.record(std::move(y), {x}, [x, inv_sqrt2](Graph<S>& g, const Matrix<S>& dy) {
    const S inv_sqrt2pi = S(0.39894228040143267794);
    Matrix<S> d = g.value(x).unaryExpr([=](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(S(-0.5) * v * v);
    });
    g.accumulate(x, dy.cwiseProduct(d));
  });
}

template <typename S>
Var silu(Graph<S>& g, Var x) {
  Matrix<S> y = g.value(x).unaryExpr([](S v) { return v / (S(1) + std::exp(-v)); });
  return g.record(std::move(y), {x}, [x](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> d = g.value(x).unaryExpr([](S v) {
      S s = S(1) / (S(1) + std::exp(-v));
      return s * (S(1) + v * (S(1) - s));
    });
    g.accumulate(x, dy.cwiseProduct(d));
  });
}

template <typename S>
Var relu(Graph<S>& g, Var x) {
  Matrix<S> y = g.value(x).cwiseMax(S(0));
  return g.record(std::move(y), {x}, [x](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> mask = (g.value(x).array() > S(0)).template cast<S>().matrix();
    g.accumulate(x, dy.cwiseProduct(mask));
  });
}

namespace {

template <typename S>
struct NormStats {
  Matrix<S> xhat;
  Vector<S> rstd;
};

template <typename S>
std::shared_ptr<NormStats<S>> normalize_rows(const Matrix<S>& x, S eps) {
  auto st = std::make_shared<NormStats<S>>();
  Vector<S> mu = x.rowwise().mean();
  st->xhat = x.colwise() - mu;
  Vector<S> var = st->xhat.array().square().rowwise().mean();
  st->rstd = (var.array() + eps).rsqrt();
  st->xhat = st->xhat.array().colwise() * st->rstd.array();
  return st;
}

template <typename S>
Matrix<S> normalize_backward(const NormStats<S>& st, const Matrix<S>& dxhat) {
  Vector<S> mean_d = dxhat.rowwise().mean();
  Vector<S> mean_dx = dxhat.cwiseProduct(st.xhat).rowwise().mean();
  Matrix<S> out = dxhat.colwise() - mean_d;
  out -= (st.xhat.array().colwise() * mean_dx.array()).matrix();
  return out.array().colwise() * st.rstd.array();
}

}  // namespace

template <typename S>
Var layer_norm(Graph<S>& g, Var x, S eps) {
  auto st = normalize_rows(g.value(x), eps);
  Matrix<S> y = st->xhat;
  return g.record(std::move(y), {x}, [x, st](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(x, normalize_backward(*st, dy));
  });
}

template <typename S>
Var layer_norm(Graph<S>& g, Var x, Var gamma, Var beta, S eps) {
  auto st = normalize_rows(g.value(x), eps);
  const auto& gm = g.value(gamma);
  const auto& bt = g.value(beta);
  if (gm.cols() != st->xhat.cols() || bt.cols() != st->xhat.cols())
    throw ShapeError("layer_norm: affine width mismatch");
  Matrix<S> y = st->xhat.array().rowwise() * gm.row(0).array();
  y.rowwise() += bt.row(0);
  return g.record(std::move(y), {x, gamma, beta}, [x, gamma, beta, st](Graph<S>& g, const Matrix<S>& dy) {
    if (g.requires_grad(gamma)) g.accumulate(gamma, dy.cwiseProduct(st->xhat).colwise().sum());
    if (g.requires_grad(beta)) g.accumulate(beta, dy.colwise().sum());
    if (g.requires_grad(x)) {
      Matrix<S> dxhat = dy.array().rowwise() * g.value(gamma).row(0).array();
      g.accumulate(x, normalize_backward(*st, dxhat));
    }
  });
}

template <typename S>
Matrix<S> attention_probs(const Eigen::Ref<const Matrix<S>>& q, const Eigen::Ref<const Matrix<S>>& k) {
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key width mismatch");
  const S scale = S(1) / std::sqrt(S(q.cols()));
  Matrix<S> p(q.rows(), k.rows());
  p.noalias() = q * k.transpose();
  p *= scale;
  for (Index r = 0; r < p.rows(); ++r) {
    S m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

template <typename S>
Var attention(Graph<S>& g, Var q, Var k, Var v, Index batch, Index heads) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  const auto& V = g.value(v);
  if (Q.cols() != K.cols()) throw ShapeError("attention: channel mismatch between queries and keys");
  if (V.rows() != K.rows() || V.cols() != K.cols()) throw ShapeError("attention: key/value shape mismatch");
  if (heads <= 0 || Q.cols() % heads != 0) throw ShapeError("attention: channels not divisible by heads");
  const Index nq = tokens_per_sample(Q, batch, "attention(q)");
  const Index nk = tokens_per_sample(K, batch, "attention(k)");
  const Index d = Q.cols() / heads;

  auto probs = std::make_shared<std::vector<Matrix<S>>>(static_cast<std::size_t>(batch * heads));
  Matrix<S> out(Q.rows(), V.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
      P = attention_probs<S>(Q.block(b * nq, h * d, nq, d), K.block(b * nk, h * d, nk, d));
      out.block(b * nq, h * d, nq, d).noalias() = P * V.block(b * nk, h * d, nk, d);
    }
  }
  return g.record(std::move(out), {q, k, v}, [=](Graph<S>& g, const Matrix<S>& dy) {
    const auto& Q = g.value(q);
    const auto& K = g.value(k);
    const auto& V = g.value(v);
    const S sc = S(1) / std::sqrt(S(d));
    Matrix<S> dQ = Matrix<S>::Zero(Q.rows(), Q.cols());
    Matrix<S> dK = Matrix<S>::Zero(K.rows(), K.cols());
    Matrix<S> dV = Matrix<S>::Zero(V.rows(), V.cols());
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const auto& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
        auto dO = dy.block(b * nq, h * d, nq, d);
        Matrix<S> dP = dO * V.block(b * nk, h * d, nk, d).transpose();
        dV.block(b * nk, h * d, nk, d).noalias() += P.transpose() * dO;
        Vector<S> rs = dP.cwiseProduct(P).rowwise().sum();
        Matrix<S> dS = P.cwiseProduct(dP.colwise() - rs) * sc;
        dQ.block(b * nq, h * d, nq, d).noalias() += dS * K.block(b * nk, h * d, nk, d);
        dK.block(b * nk, h * d, nk, d).noalias() += dS.transpose() * Q.block(b * nq, h * d, nq, d);
      }
    }
    g.accumulate(q, dQ);
    g.accumulate(k, dK);
    g.accumulate(v, dV);
  });
}

template <typename S>
Var concat_tokens(Graph<S>& g, Var a, Var b, Index batch) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.cols() != B.cols()) throw ShapeError("concat_tokens: channel mismatch");
  const Index na = tokens_per_sample(A, batch, "concat_tokens(a)");
  const Index nb = tokens_per_sample(B, batch, "concat_tokens(b)");
  Matrix<S> y(A.rows() + B.rows(), A.cols());
  for (Index s = 0; s < batch; ++s) {
    y.middleRows(s * (na + nb), na) = A.middleRows(s * na, na);
    y.middleRows(s * (na + nb) + na, nb) = B.middleRows(s * nb, nb);
  }
  return g.record(std::move(y), {a, b}, [=](Graph<S>& g, const Matrix<S>& dy) {
    if (g.requires_grad(a)) {
      Matrix<S> da(batch * na, dy.cols());
      for (Index s = 0; s < batch; ++s) da.middleRows(s * na, na) = dy.middleRows(s * (na + nb), na);
      g.accumulate(a, da);
    }
    if (g.requires_grad(b)) {
      Matrix<S> db(batch * nb, dy.cols());
      for (Index s = 0; s < batch; ++s) db.middleRows(s * nb, nb) = dy.middleRows(s * (na + nb) + na, nb);
      g.accumulate(b, db);
    }
  });
}

template <typename S>
Var slice_tokens(Graph<S>& g, Var x, Index batch, Index start, Index count) {
  const auto& X = g.value(x);
  const Index n = tokens_per_sample(X, batch, "slice_tokens");
  if (start < 0 || count < 0 || start + count > n) throw ShapeError("slice_tokens: range out of bounds");
  Matrix<S> y(batch * count, X.cols());
  for (Index s = 0; s < batch; ++s) y.middleRows(s * count, count) = X.middleRows(s * n + start, count);
  return g.record(std::move(y), {x}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dx = Matrix<S>::Zero(batch * n, dy.cols());
    for (Index s = 0; s < batch; ++s) dx.middleRows(s * n + start, count) = dy.middleRows(s * count, count);
    g.accumulate(x, dx);
  });
}

template <typename S>
Var concat_channels(Graph<S>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.rows() != B.rows()) throw ShapeError("concat_channels: row mismatch");
  const Index ca = A.cols();
  const Index cb = B.cols();
  Matrix<S> y(A.rows(), ca + cb);
  y.leftCols(ca) = A;
  y.rightCols(cb) = B;
  return g.record(std::move(y), {a, b}, [=](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(a, dy.leftCols(ca));
    g.accumulate(b, dy.rightCols(cb));
  });
}

template <typename S>
Var slice_channels(Graph<S>& g, Var x, Index start, Index count) {
  const auto& X = g.value(x);
  if (start < 0 || count < 0 || start + count > X.cols()) throw ShapeError("slice_channels: range out of bounds");
  const Index c = X.cols();
  Matrix<S> y = X.middleCols(start, count);
  return g.record(std::move(y), {x}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dx = Matrix<S>::Zero(dy.rows(), c);
    dx.middleCols(start, count) = dy;
    g.accumulate(x, dx);
  });
}

template <typename S>
Var add_tiled(Graph<S>& g, Var x, Var table, Index batch) {
  const auto& X = g.value(x);
  const auto& T = g.value(table);
  const Index n = tokens_per_sample(X, batch, "add_tiled");
  if (T.rows() != n || T.cols() != X.cols()) throw ShapeError("add_tiled: table shape mismatch");
  Matrix<S> y = X;
  for (Index s = 0; s < batch; ++s) y.middleRows(s * n, n) += T;
  return g.record(std::move(y), {x, table}, [=](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(x, dy);
    if (g.requires_grad(table)) {
      Matrix<S> dt = Matrix<S>::Zero(n, dy.cols());
      for (Index s = 0; s < batch; ++s) dt += dy.middleRows(s * n, n);
      g.accumulate(table, dt);
    }
  });
}

template <typename S>
Var tile(Graph<S>& g, Var table, Index batch) {
  const auto& T = g.value(table);
  const Index n = T.rows();
  Matrix<S> y(batch * n, T.cols());
  for (Index s = 0; s < batch; ++s) y.middleRows(s * n, n) = T;
  return g.record(std::move(y), {table}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dt = Matrix<S>::Zero(n, dy.cols());
    for (Index s = 0; s < batch; ++s) dt += dy.middleRows(s * n, n);
    g.accumulate(table, dt);
  });
}

template <typename S>
Var modulate(Graph<S>& g, Var x, Var shift, Var scale_rows, Index batch) {
  const auto& X = g.value(x);
  const auto& Sh = g.value(shift);
  const auto& Sc = g.value(scale_rows);
  const Index n = tokens_per_sample(X, batch, "modulate");
  if (Sh.rows() != batch || Sc.rows() != batch || Sh.cols() != X.cols() || Sc.cols() != X.cols())
    throw ShapeError("modulate: conditioning shape mismatch");
  Matrix<S> y(X.rows(), X.cols());
  for (Index s = 0; s < batch; ++s) {
    y.middleRows(s * n, n) = X.middleRows(s * n, n).array().rowwise() * (Sc.row(s).array() + S(1));
    y.middleRows(s * n, n).rowwise() += Sh.row(s);
  }
  return g.record(std::move(y), {x, shift, scale_rows}, [=](Graph<S>& g, const Matrix<S>& dy) {
    const auto& X = g.value(x);
    const auto& Sc = g.value(scale_rows);
    Matrix<S> dx(X.rows(), X.cols());
    Matrix<S> dsh(batch, X.cols());
    Matrix<S> dsc(batch, X.cols());
    for (Index s = 0; s < batch; ++s) {
      auto blk = dy.middleRows(s * n, n);
      dx.middleRows(s * n, n) = blk.array().rowwise() * (Sc.row(s).array() + S(1));
      dsh.row(s) = blk.colwise().sum();
      dsc.row(s) = blk.cwiseProduct(X.middleRows(s * n, n)).colwise().sum();
    }
    g.accumulate(x, dx);
    g.accumulate(shift, dsh);
    g.accumulate(scale_rows, dsc);
  });
}

template <typename S>
Var gate(Graph<S>& g, Var x, Var gate_rows, Index batch) {
  const auto& X = g.value(x);
  const auto& G = g.value(gate_rows);
  const Index n = tokens_per_sample(X, batch, "gate");
  if (G.rows() != batch || G.cols() != X.cols()) throw ShapeError("gate: shape mismatch");
  Matrix<S> y(X.rows(), X.cols());
  for (Index s = 0; s < batch; ++s) y.middleRows(s * n, n) = X.middleRows(s * n, n).array().rowwise() * G.row(s).array();
  return g.record(std::move(y), {x, gate_rows}, [=](Graph<S>& g, const Matrix<S>& dy) {
    const auto& X = g.value(x);
    const auto& G = g.value(gate_rows);
    Matrix<S> dx(X.rows(), X.cols());
    Matrix<S> dg(batch, X.cols());
    for (Index s = 0; s < batch; ++s) {
      auto blk = dy.middleRows(s * n, n);
      dx.middleRows(s * n, n) = blk.array().rowwise() * G.row(s).array();
      dg.row(s) = blk.cwiseProduct(X.middleRows(s * n, n)).colwise().sum();
    }
    g.accumulate(x, dx);
    g.accumulate(gate_rows, dg);
  });
}

template <typename S>
Var mean_tokens(Graph<S>& g, Var x, Index batch) {
  const auto& X = g.value(x);
  const Index n = tokens_per_sample(X, batch, "mean_tokens");
  Matrix<S> y(batch, X.cols());
  for (Index s = 0; s < batch; ++s) y.row(s) = X.middleRows(s * n, n).colwise().mean();
  return g.record(std::move(y), {x}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dx(batch * n, dy.cols());
    for (Index s = 0; s < batch; ++s) dx.middleRows(s * n, n).rowwise() = dy.row(s) / S(n);
    g.accumulate(x, dx);
  });
}

template <typename S>
Var gather_rows(Graph<S>& g, Var table, std::span<const int> rows) {
  const auto& T = g.value(table);
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix<S> y(static_cast<Index>(idx.size()), T.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= T.rows()) throw DomainError("gather_rows: index out of range");
    y.row(static_cast<Index>(i)) = T.row(idx[i]);
  }
  const Index tr = T.rows();
  return g.record(std::move(y), {table}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dt = Matrix<S>::Zero(tr, dy.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += dy.row(static_cast<Index>(i));
    g.accumulate(table, dt);
  });
}

template <typename S>
Var im2col(Graph<S>& g, Var image, Index batch, Index height, Index width, Index kernel, Index stride, Index pad) {
  const auto& X = g.value(image);
  if (X.rows() != batch * height * width) throw ShapeError("im2col: image rows mismatch");
  const Index ch = X.cols();
  const Index oh = (height + 2 * pad - kernel) / stride + 1;
  const Index ow = (width + 2 * pad - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("im2col: kernel larger than padded image");
  Matrix<S> y = Matrix<S>::Zero(batch * oh * ow, kernel * kernel * ch);
  for (Index b = 0; b < batch; ++b)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        const Index r = (b * oh + oy) * ow + ox;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= width) continue;
            y.block(r, (ky * kernel + kx) * ch, 1, ch) = X.row((b * height + iy) * width + ix);
          }
        }
      }
  return g.record(std::move(y), {image}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> dx = Matrix<S>::Zero(batch * height * width, ch);
    for (Index b = 0; b < batch; ++b)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          const Index r = (b * oh + oy) * ow + ox;
          for (Index ky = 0; ky < kernel; ++ky) {
            const Index iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= height) continue;
            for (Index kx = 0; kx < kernel; ++kx) {
              const Index ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= width) continue;
              dx.row((b * height + iy) * width + ix) += dy.block(r, (ky * kernel + kx) * ch, 1, ch);
            }
          }
        }
    g.accumulate(image, dx);
  });
}

template <typename S>
Matrix<S> patchify_pixels(const ImageBatch<S>& images, Index patch) {
  if (patch <= 0 || images.height % patch != 0 || images.width % patch != 0)
    throw ShapeError("patchify: image size not divisible by patch size");
  const Index gh = images.height / patch;
  const Index gw = images.width / patch;
  const Index ch = images.channels();
  Matrix<S> out(images.batch * gh * gw, patch * patch * ch);
  for (Index b = 0; b < images.batch; ++b)
    for (Index gy = 0; gy < gh; ++gy)
      for (Index gx = 0; gx < gw; ++gx) {
        const Index r = (b * gh + gy) * gw + gx;
        for (Index py = 0; py < patch; ++py)
          for (Index px = 0; px < patch; ++px)
            out.block(r, (py * patch + px) * ch, 1, ch) =
                images.data.row((b * images.height + gy * patch + py) * images.width + gx * patch + px);
      }
  return out;
}

template <typename S>
ImageBatch<S> unpatchify_pixels(const Matrix<S>& patches, Index batch, Index grid, Index patch, Index channels) {
  if (patches.rows() != batch * grid * grid || patches.cols() != patch * patch * channels)
    throw ShapeError("unpatchify: patch matrix shape mismatch");
  ImageBatch<S> img(batch, grid * patch, grid * patch, channels);
  for (Index b = 0; b < batch; ++b)
    for (Index gy = 0; gy < grid; ++gy)
      for (Index gx = 0; gx < grid; ++gx) {
        const Index r = (b * grid + gy) * grid + gx;
        for (Index py = 0; py < patch; ++py)
          for (Index px = 0; px < patch; ++px)
            img.data.row((b * img.height + gy * patch + py) * img.width + gx * patch + px) =
                patches.block(r, (py * patch + px) * channels, 1, channels);
      }
  return img;
}

template <typename S>
Var unpatchify(Graph<S>& g, Var patches, Index batch, Index grid, Index patch, Index channels) {
  ImageBatch<S> img = unpatchify_pixels(g.value(patches), batch, grid, patch, channels);
  const Index h = img.height;
  return g.record(std::move(img.data), {patches}, [=](Graph<S>& g, const Matrix<S>& dy) {
    g.accumulate(patches, patchify_pixels(ImageBatch<S>(dy, batch, h, h), patch));
  });
}

template <typename S>
Var mse(Graph<S>& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mse");
  const S n = S(g.value(a).size());
  Matrix<S> y(1, 1);
  y(0, 0) = (g.value(a) - g.value(b)).squaredNorm() / n;
  return g.record(std::move(y), {a, b}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> d = (g.value(a) - g.value(b)) * (S(2) * dy(0, 0) / n);
    g.accumulate(a, d);
    g.accumulate(b, -d);
  });
}

template <typename S>
Var mean_abs_error(Graph<S>& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mean_abs_error");
  const S n = S(g.value(a).size());
  Matrix<S> y(1, 1);
  y(0, 0) = (g.value(a) - g.value(b)).cwiseAbs().sum() / n;
  return g.record(std::move(y), {a, b}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> d = (g.value(a) - g.value(b)).array().sign().matrix() * (dy(0, 0) / n);
    g.accumulate(a, d);
    g.accumulate(b, -d);
  });
}

template <typename S>
Var cross_entropy(Graph<S>& g, Var logits, std::span<const int> labels) {
  const auto& L = g.value(logits);
  if (static_cast<Index>(labels.size()) != L.rows()) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<int> lab(labels.begin(), labels.end());
  auto probs = std::make_shared<Matrix<S>>(L.rows(), L.cols());
  S total = 0;
  for (Index r = 0; r < L.rows(); ++r) {
    if (lab[r] < 0 || lab[r] >= L.cols()) throw DomainError("cross_entropy: label out of range");
    S m = L.row(r).maxCoeff();
    probs->row(r) = (L.row(r).array() - m).exp();
    S z = probs->row(r).sum();
    probs->row(r) /= z;
    total -= L(r, lab[r]) - m - std::log(z);
  }
  Matrix<S> y(1, 1);
  y(0, 0) = total / S(L.rows());
  return g.record(std::move(y), {logits}, [=](Graph<S>& g, const Matrix<S>& dy) {
    Matrix<S> d = *probs;
    for (Index r = 0; r < d.rows(); ++r) d(r, lab[r]) -= S(1);
    g.accumulate(logits, d * (dy(0, 0) / S(d.rows())));
  });
}

#define DECQ_INSTANTIATE_OPS(S)                                                                          \
  template Var add<S>(Graph<S>&, Var, Var);                                                              \
  template Var sub<S>(Graph<S>&, Var, Var);                                                              \
  template Var mul<S>(Graph<S>&, Var, Var);                                                              \
  template Var scale<S>(Graph<S>&, Var, S);                                                              \
  template Var linear<S>(Graph<S>&, Var, Var, Var);                                                      \
  template Var matmul<S>(Graph<S>&, Var, Var);                                                           \
  template Var gelu<S>(Graph<S>&, Var);                                                                  \
  template Var silu<S>(Graph<S>&, Var);                                                                  \
  template Var relu<S>(Graph<S>&, Var);                                                                  \
  template Var layer_norm<S>(Graph<S>&, Var, S);                                                         \
  template Var layer_norm<S>(Graph<S>&, Var, Var, Var, S);                                               \
  template Var attention<S>(Graph<S>&, Var, Var, Var, Index, Index);                                     \
  template Matrix<S> attention_probs<S>(const Eigen::Ref<const Matrix<S>>&, const Eigen::Ref<const Matrix<S>>&); \
  template Var concat_tokens<S>(Graph<S>&, Var, Var, Index);                                             \
  template Var slice_tokens<S>(Graph<S>&, Var, Index, Index, Index);                                     \
  template Var concat_channels<S>(Graph<S>&, Var, Var);                                                  \
  template Var slice_channels<S>(Graph<S>&, Var, Index, Index);                                          \
  template Var add_tiled<S>(Graph<S>&, Var, Var, Index);                                                 \
  template Var tile<S>(Graph<S>&, Var, Index);                                                           \
  template Var modulate<S>(Graph<S>&, Var, Var, Var, Index);                                             \
  template Var gate<S>(Graph<S>&, Var, Var, Index);                                                      \
  template Var mean_tokens<S>(Graph<S>&, Var, Index);                                                    \
  template Var gather_rows<S>(Graph<S>&, Var, std::span<const int>);                                     \
  template Var im2col<S>(Graph<S>&, Var, Index, Index, Index, Index, Index, Index);                      \
  template Var unpatchify<S>(Graph<S>&, Var, Index, Index, Index, Index);                                \
  template Var mse<S>(Graph<S>&, Var, Var);                                                              \
  template Var mean_abs_error<S>(Graph<S>&, Var, Var);                                                   \
  template Var cross_entropy<S>(Graph<S>&, Var, std::span<const int>);                                   \
  template Matrix<S> patchify_pixels<S>(const ImageBatch<S>&, Index);                                    \
  template ImageBatch<S> unpatchify_pixels<S>(const Matrix<S>&, Index, Index, Index, Index);

DECQ_INSTANTIATE_OPS(float)
DECQ_INSTANTIATE_OPS(double)

}  // namespace decq::ops
