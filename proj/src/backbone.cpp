#include "decq/backbone.hpp"

namespace decq {

void BackboneConfig::validate() const {
  if (depth <= 0 || dim <= 0 || heads <= 0 || ffn_dim <= 0 || patch_size <= 0 || image_size <= 0 || channels <= 0)
    throw ConfigError("backbone: all dimensions must be positive");
  if (image_size % patch_size != 0) throw ConfigError("backbone: image_size must be divisible by patch_size");
  if (dim % heads != 0) throw ConfigError("backbone: dim must be divisible by heads");
  if (dim % 4 != 0) throw ConfigError("backbone: dim must be divisible by 4 for the 2D position code");
}

template <typename S>
Backbone<S>::Backbone(const BackboneConfig& cfg, std::uint64_t seed, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  embed_ = nn::Linear<S>::create(store_, prefix + ".embed", cfg_.patch_size * cfg_.patch_size * cfg_.channels,
                                 cfg_.dim, rng);
  position_ = sincos_2d<S>(cfg_.grid(), cfg_.dim);
  for (Index l = 0; l < cfg_.depth; ++l)
    blocks_.push_back(nn::TransformerBlock<S>::create(store_, prefix + ".block" + std::to_string(l), cfg_.dim,
                                                      cfg_.heads, cfg_.ffn_dim, rng));
}

template <typename S>
Var Backbone<S>::patchify(Graph<S>& g, const ImageBatch<S>& images) const {
  if (images.height != cfg_.image_size)
    throw ShapeError("patchify: height " + std::to_string(images.height) + " != image_size " +
                     std::to_string(cfg_.image_size));
  if (images.width != cfg_.image_size)
    throw ShapeError("patchify: width " + std::to_string(images.width) + " != image_size " +
                     std::to_string(cfg_.image_size));
  if (images.channels() != cfg_.channels)
    throw ShapeError("patchify: channels " + std::to_string(images.channels()) + " != " +
                     std::to_string(cfg_.channels));
  Var pixels = g.constant(ops::patchify_pixels(images, cfg_.patch_size));
  return embed_(g, pixels);
}

template <typename S>
TapOutput Backbone<S>::forward_with_taps(Graph<S>& g, Var tokens, Index batch, std::span<const Index> taps) const {
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 0 || taps[i] >= cfg_.depth)
      throw ConfigError("tap layer " + std::to_string(taps[i]) + " outside [0, " + std::to_string(cfg_.depth - 1) +
                        "]");
    if (i > 0 && taps[i] <= taps[i - 1]) throw ConfigError("tap layers must be strictly ascending");
  }
  if (g.value(tokens).rows() != batch * cfg_.tokens() || g.value(tokens).cols() != cfg_.dim)
    throw ShapeError("backbone: token tensor does not match config");

  TapOutput out;
  Var x = ops::add_tiled(g, tokens, g.constant(position_), batch);
  std::size_t next = 0;
  for (Index l = 0; l < cfg_.depth; ++l) {
    if (next < taps.size() && taps[next] == l) {
      out.tapped.push_back(x);
      ++next;
    }
    x = blocks_[static_cast<std::size_t>(l)](g, x, batch);
  }
  out.final = x;
  return out;
}

template <typename S>
TokenSequence<S> Backbone<S>::final_tokens(const ImageBatch<S>& images) const {
  Graph<S> g;
  TapOutput out = forward(g, images);
  return TokenSequence<S>(g.value(out.final), images.batch, cfg_.tokens());
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace decq
