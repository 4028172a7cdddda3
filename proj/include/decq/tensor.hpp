#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace decq {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A batch of token embeddings. Rows are laid out sample-major: row
/// `b * tokens + t` holds token t of sample b.
template <typename Scalar>
struct TokenSequence {
  Matrix<Scalar> data;
  Index batch = 0;
  Index tokens = 0;

  TokenSequence() = default;
  TokenSequence(Matrix<Scalar> d, Index b, Index n) : data(std::move(d)), batch(b), tokens(n) {
    if (data.rows() != batch * tokens)
      throw ShapeError("token sequence: rows " + std::to_string(data.rows()) + " != batch*tokens " +
                       std::to_string(batch * tokens));
  }

  Index channels() const { return data.cols(); }
  auto sample(Index b) { return data.middleRows(b * tokens, tokens); }
  auto sample(Index b) const { return data.middleRows(b * tokens, tokens); }
  bool all_finite() const { return data.allFinite(); }

  template <typename Other>
  TokenSequence<Other> cast() const {
    return TokenSequence<Other>(data.template cast<Other>(), batch, tokens);
  }
};

/// A batch of images in channels-last layout: row `(b * H + y) * W + x`
/// holds the channel vector of pixel (y, x) of image b.
template <typename Scalar>
struct ImageBatch {
  Matrix<Scalar> data;
  Index batch = 0;
  Index height = 0;
  Index width = 0;

  ImageBatch() = default;
  ImageBatch(Index b, Index h, Index w, Index ch)
      : data(Matrix<Scalar>::Zero(b * h * w, ch)), batch(b), height(h), width(w) {}
  ImageBatch(Matrix<Scalar> d, Index b, Index h, Index w)
      : data(std::move(d)), batch(b), height(h), width(w) {
    if (data.rows() != batch * height * width) throw ShapeError("image batch: row count mismatch");
  }

  Index channels() const { return data.cols(); }
  Index pixels() const { return height * width; }
  auto image(Index b) { return data.middleRows(b * pixels(), pixels()); }
  auto image(Index b) const { return data.middleRows(b * pixels(), pixels()); }
  Scalar& at(Index b, Index y, Index x, Index c) { return data((b * height + y) * width + x, c); }
  Scalar at(Index b, Index y, Index x, Index c) const { return data((b * height + y) * width + x, c); }

  template <typename Other>
  ImageBatch<Other> cast() const {
    return ImageBatch<Other>(data.template cast<Other>(), batch, height, width);
  }
};

/// FNV-1a over the raw bytes of a matrix; used to fingerprint parameters.
template <typename Derived>
std::uint64_t fingerprint(const Eigen::DenseBase<Derived>& m, std::uint64_t seed = 1469598103934665603ULL) {
  std::uint64_t h = seed;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      auto v = m(i, j);
      const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
      for (std::size_t k = 0; k < sizeof(v); ++k) {
        h ^= bytes[k];
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

}  // namespace decq
