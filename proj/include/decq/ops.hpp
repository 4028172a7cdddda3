#pragma once

#include "decq/graph.hpp"

#include <span>
#include <vector>

/// Differentiable operations over Graph nodes. Token tensors are
/// (batch * tokens) x channels; `batch` tells the op where samples split.
namespace decq::ops {

template <typename S> Var add(Graph<S>& g, Var a, Var b);
template <typename S> Var sub(Graph<S>& g, Var a, Var b);
template <typename S> Var mul(Graph<S>& g, Var a, Var b);
template <typename S> Var scale(Graph<S>& g, Var a, S factor);

/// x * w + bias, with `bias` a 1 x out row (pass an invalid Var to skip it).
template <typename S> Var linear(Graph<S>& g, Var x, Var w, Var bias);
template <typename S> Var matmul(Graph<S>& g, Var a, Var b);

template <typename S> Var gelu(Graph<S>& g, Var x);
template <typename S> Var silu(Graph<S>& g, Var x);
template <typename S> Var relu(Graph<S>& g, Var x);

/// Per-row layer normalization without affine terms.
template <typename S> Var layer_norm(Graph<S>& g, Var x, S eps = S(1e-6));
/// Per-row layer normalization followed by elementwise gamma/beta (1 x C rows).
template <typename S> Var layer_norm(Graph<S>& g, Var x, Var gamma, Var beta, S eps = S(1e-6));

/// Scaled dot-product attention on already projected q, k, v. Heads split
/// the channel axis; each sample attends only within itself.
template <typename S> Var attention(Graph<S>& g, Var q, Var k, Var v, Index batch, Index heads);

/// Row-stochastic attention weights for one head: softmax(q k^T / sqrt(d)).
template <typename S>
Matrix<S> attention_probs(const Eigen::Ref<const Matrix<S>>& q, const Eigen::Ref<const Matrix<S>>& k);

/// Per sample: [a_b ; b_b] along the token axis.
template <typename S> Var concat_tokens(Graph<S>& g, Var a, Var b, Index batch);
/// Per sample: tokens [start, start + count).
template <typename S> Var slice_tokens(Graph<S>& g, Var x, Index batch, Index start, Index count);
template <typename S> Var concat_channels(Graph<S>& g, Var a, Var b);
template <typename S> Var slice_channels(Graph<S>& g, Var x, Index start, Index count);

/// x + table, with the tokens x channels table repeated for every sample.
template <typename S> Var add_tiled(Graph<S>& g, Var x, Var table, Index batch);
/// Repeats a tokens x channels table `batch` times along rows.
template <typename S> Var tile(Graph<S>& g, Var table, Index batch);
/// x * (1 + scale_b) + shift_b; shift and scale are batch x C.
template <typename S> Var modulate(Graph<S>& g, Var x, Var shift, Var scale, Index batch);
/// x * gate_b; gate is batch x C.
template <typename S> Var gate(Graph<S>& g, Var x, Var gate_rows, Index batch);
/// Mean over the tokens of each sample, giving batch x C.
template <typename S> Var mean_tokens(Graph<S>& g, Var x, Index batch);
/// Selects rows of `table`.
template <typename S> Var gather_rows(Graph<S>& g, Var table, std::span<const int> rows);

/// Extracts k x k patches (zero padded) from a channels-last image batch.
/// Output rows are (b, oy, ox); columns are (ky, kx, c).
template <typename S>
Var im2col(Graph<S>& g, Var image, Index batch, Index height, Index width, Index kernel, Index stride, Index pad);

/// Reorders per-patch pixel rows (b, patch) x (py, px, c) into a
/// channels-last image batch.
template <typename S> Var unpatchify(Graph<S>& g, Var patches, Index batch, Index grid, Index patch, Index channels);

/// Scalar losses (1 x 1 outputs).
template <typename S> Var mse(Graph<S>& g, Var a, Var b);
template <typename S> Var mean_abs_error(Graph<S>& g, Var a, Var b);
template <typename S> Var cross_entropy(Graph<S>& g, Var logits, std::span<const int> labels);

/// Non-differentiable layout helpers.
template <typename S> Matrix<S> patchify_pixels(const ImageBatch<S>& images, Index patch);
template <typename S> ImageBatch<S> unpatchify_pixels(const Matrix<S>& patches, Index batch, Index grid, Index patch, Index channels);

}  // namespace decq::ops
