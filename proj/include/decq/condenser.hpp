#pragma once

#include "decq/backbone.hpp"

#include <optional>

namespace decq {

struct CondenserConfig {
  Index queries = 8;
  std::vector<Index> tap_layers{0, 3, 6, 9};
  Index dim = 192;
  Index heads = 3;
  Index ffn_dim = 768;

  void validate(const BackboneConfig& backbone) const;
  bool operator==(const CondenserConfig&) const = default;
};

/// Tokenizer output: semantic patch latents plus detail-condensing query
/// latents. `z_query` has zero tokens when queries are disabled.
template <typename S>
struct LatentPair {
  TokenSequence<S> z_patch;
  TokenSequence<S> z_query;

  Index batch() const { return z_patch.batch; }
};

/// One condenser: residual cross-attention from queries onto tapped patch
/// tokens, then a residual FFN. Patches are keys and values only.
template <typename S>
struct CondenserModule {
  nn::LayerNorm<S> ln_query, ln_patch, ln_ffn;
  nn::Attention<S> attn;
  nn::FeedForward<S> ffn;

  static CondenserModule create(ParameterStore<S>& store, const std::string& name, const CondenserConfig& cfg,
                                Rng& rng);

  /// Softmax(Q Wq (P Wk)^T / sqrt(d)) P Wv per head, concatenated, then Wo.
  Var cross_attend(Graph<S>& g, Var queries, Var patches, Index batch) const {
    if (g.value(queries).cols() != g.value(patches).cols())
      throw ShapeError("cross_attend: query width " + std::to_string(g.value(queries).cols()) +
                       " != patch width " + std::to_string(g.value(patches).cols()));
    return attn.cross(g, queries, patches, batch);
  }

  /// Q~ = Q + CrossAttn(LN(Q), LN(P));  Q' = Q~ + FFN(LN(Q~)).
  Var step(Graph<S>& g, Var queries, Var patches, Index batch) const;
};

template <typename S>
class Condenser {
 public:
  Condenser(const CondenserConfig& cfg, const BackboneConfig& backbone, std::uint64_t seed = 1);

  const CondenserConfig& config() const { return cfg_; }

  /// Threads the learnable initial queries through one module per tap, in
  /// ascending tap order. `tapped[i]` is the backbone state at tap_layers[i].
  Var run(Graph<S>& g, std::span<const Var> tapped, Index batch) const;

  const CondenserModule<S>& module(std::size_t i) const { return modules_.at(i); }
  Parameter<S>& initial_queries() { return *queries_; }

  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  CondenserConfig cfg_;
  ParameterStore<S> store_;
  Parameter<S>* queries_ = nullptr;
  std::vector<CondenserModule<S>> modules_;
};

struct EncodeOptions {
  bool train_mode = false;
  double noise_sigma = 0.1;
  Rng* rng = nullptr;
};

/// Graph-level encoder output.
struct EncodedVars {
  Var patch;
  Var query;  // invalid when queries are disabled
  Var backbone_final;
};

/// Runs the backbone with the condenser taps, normalizes both streams with
/// an affine-free per-token layer norm, and in train mode adds Gaussian
/// noise of the same sigma to both (after normalization).
template <typename S>
EncodedVars encode(Graph<S>& g, const ImageBatch<S>& images, const Backbone<S>& backbone,
                   const Condenser<S>* condenser, const EncodeOptions& opts);

/// Evaluation-mode convenience returning materialized latents.
template <typename S>
LatentPair<S> encode(const ImageBatch<S>& images, const Backbone<S>& backbone, const Condenser<S>* condenser);

extern template class Condenser<float>;
extern template class Condenser<double>;

}  // namespace decq
