#pragma once

#include "decq/condenser.hpp"

namespace decq {

struct DecoderConfig {
  Index depth = 8;
  Index dim = 384;
  Index heads = 6;
  Index ffn_dim = 1536;
  Index patch_size = 8;
  Index image_size = 64;
  Index channels = 3;
  Index latent_dim = 192;  // width of z_patch (C, or C + b for feature concat)
  Index query_dim = 192;   // width of z_query
  Index queries = 8;       // K; 0 gives a patch-only decoder

  Index grid() const { return image_size / patch_size; }
  Index tokens() const { return grid() * grid(); }
  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

/// ViT decoder over [proj_p(z_patch) + PE_2D || proj_q(z_query) + PE_Q].
/// Query positions take part in every self-attention block and are dropped
/// before the pixel head.
template <typename S>
class DualDecoder {
 public:
  explicit DualDecoder(const DecoderConfig& cfg, std::uint64_t seed = 2);

  const DecoderConfig& config() const { return cfg_; }

  Var assemble(Graph<S>& g, Var z_patch, Var z_query, Index batch) const;

  /// Predicted pixels per patch: (batch * N) x (patch^2 * channels).
  Var forward_patches(Graph<S>& g, Var z_patch, Var z_query, Index batch) const;
  /// Predicted image, channels-last (batch * H * W) x channels.
  Var forward_image(Graph<S>& g, Var z_patch, Var z_query, Index batch) const;

  ImageBatch<S> decode(const LatentPair<S>& latents) const;

  const Matrix<S>& patch_position() const { return patch_pe_; }

  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  DecoderConfig cfg_;
  ParameterStore<S> store_;
  nn::Linear<S> proj_patch_, proj_query_;
  Parameter<S>* query_pe_ = nullptr;
  Matrix<S> patch_pe_;
  std::vector<nn::TransformerBlock<S>> blocks_;
  nn::LayerNorm<S> final_ln_;
  nn::Linear<S> head_;
};

extern template class DualDecoder<float>;
extern template class DualDecoder<double>;

}  // namespace decq
