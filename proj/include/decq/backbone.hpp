#pragma once

#include "decq/nn.hpp"

#include <span>
#include <vector>

namespace decq {

/// Structure of the frozen ViT encoder. Desk defaults keep depth 12 so the
/// tap layers 0/3/6/9 exist unchanged.
struct BackboneConfig {
  Index depth = 12;
  Index dim = 192;
  Index heads = 3;
  Index ffn_dim = 768;
  Index patch_size = 8;
  Index image_size = 64;
  Index channels = 3;

  Index grid() const { return image_size / patch_size; }
  Index tokens() const { return grid() * grid(); }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

struct TapOutput {
  Var final;
  std::vector<Var> tapped;
};

/// Pre-norm ViT without class or register tokens. Tap l is the token state
/// entering block l; tap 0 is the embedded patch state.
template <typename S>
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg, std::uint64_t seed = 0, const std::string& prefix = "backbone");

  const BackboneConfig& config() const { return cfg_; }

  /// Linear projection of flattened non-overlapping patches, row-major over
  /// the patch grid. Throws ShapeError naming the mismatched axis.
  Var patchify(Graph<S>& g, const ImageBatch<S>& images) const;

  /// Adds the fixed 2D position code and runs every block. `taps` must be
  /// strictly ascending in [0, depth). Taps only read intermediate states.
  TapOutput forward_with_taps(Graph<S>& g, Var tokens, Index batch, std::span<const Index> taps) const;

  TapOutput forward(Graph<S>& g, const ImageBatch<S>& images, std::span<const Index> taps = {}) const {
    return forward_with_taps(g, patchify(g, images), images.batch, taps);
  }

  /// Final tokens without building a persistent graph.
  TokenSequence<S> final_tokens(const ImageBatch<S>& images) const;

  void freeze() { store_.set_trainable(false); frozen_ = true; }
  void unfreeze() { store_.set_trainable(true); frozen_ = false; }
  bool frozen() const { return frozen_; }

  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  BackboneConfig cfg_;
  ParameterStore<S> store_;
  nn::Linear<S> embed_;
  Matrix<S> position_;
  std::vector<nn::TransformerBlock<S>> blocks_;
  bool frozen_ = false;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace decq
