#include "decq/decoder.hpp"

namespace decq {

void DecoderConfig::validate() const {
  if (depth < 0 || dim <= 0 || heads <= 0 || ffn_dim <= 0 || patch_size <= 0 || image_size <= 0 || channels <= 0 ||
      latent_dim <= 0 || query_dim <= 0 || queries < 0)
    throw ConfigError("decoder: invalid dimensions");
  if (image_size % patch_size != 0) throw ConfigError("decoder: image_size must be divisible by patch_size");
  if (dim % heads != 0) throw ConfigError("decoder: dim must be divisible by heads");
  if (dim % 4 != 0) throw ConfigError("decoder: dim must be divisible by 4 for the 2D position code");
}

template <typename S>
DualDecoder<S>::DualDecoder(const DecoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  proj_patch_ = nn::Linear<S>::create(store_, "decoder.proj_patch", cfg_.latent_dim, cfg_.dim, rng);
  if (cfg_.queries > 0) {
    proj_query_ = nn::Linear<S>::create(store_, "decoder.proj_query", cfg_.query_dim, cfg_.dim, rng);
    query_pe_ = &store_.add("decoder.query_pe", random_normal<S>(cfg_.queries, cfg_.dim, S(0.02), rng));
  }
  patch_pe_ = sincos_2d<S>(cfg_.grid(), cfg_.dim);
  for (Index l = 0; l < cfg_.depth; ++l)
    blocks_.push_back(nn::TransformerBlock<S>::create(store_, "decoder.block" + std::to_string(l), cfg_.dim,
                                                      cfg_.heads, cfg_.ffn_dim, rng));
  final_ln_ = nn::LayerNorm<S>::create(store_, "decoder.final_ln", cfg_.dim);
  head_ = nn::Linear<S>::create(store_, "decoder.head", cfg_.dim, cfg_.patch_size * cfg_.patch_size * cfg_.channels,
                                rng);
}

template <typename S>
Var DualDecoder<S>::assemble(Graph<S>& g, Var z_patch, Var z_query, Index batch) const {
  if (g.value(z_patch).cols() != cfg_.latent_dim)
    throw ShapeError("decoder: patch latent width " + std::to_string(g.value(z_patch).cols()) +
                     " != projector input " + std::to_string(cfg_.latent_dim));
  if (g.value(z_patch).rows() != batch * cfg_.tokens()) throw ShapeError("decoder: patch token count mismatch");
  Var h = ops::add_tiled(g, proj_patch_(g, z_patch), g.constant(patch_pe_), batch);
  if (cfg_.queries == 0) return h;
  if (!z_query.valid()) throw ShapeError("decoder: query latents required (K > 0)");
  if (g.value(z_query).cols() != cfg_.query_dim)
    throw ShapeError("decoder: query latent width " + std::to_string(g.value(z_query).cols()) +
                     " != projector input " + std::to_string(cfg_.query_dim));
  if (g.value(z_query).rows() != batch * cfg_.queries) throw ShapeError("decoder: query token count mismatch");
  Var q = ops::add_tiled(g, proj_query_(g, z_query), g.param(*query_pe_), batch);
  return ops::concat_tokens(g, h, q, batch);
}

template <typename S>
Var DualDecoder<S>::forward_patches(Graph<S>& g, Var z_patch, Var z_query, Index batch) const {
  Var h = assemble(g, z_patch, z_query, batch);
  for (const auto& block : blocks_) h = block(g, h, batch);
  if (cfg_.queries > 0) h = ops::slice_tokens(g, h, batch, 0, cfg_.tokens());
  return head_(g, final_ln_(g, h));
}

template <typename S>
Var DualDecoder<S>::forward_image(Graph<S>& g, Var z_patch, Var z_query, Index batch) const {
  return ops::unpatchify(g, forward_patches(g, z_patch, z_query, batch), batch, cfg_.grid(), cfg_.patch_size,
                         cfg_.channels);
}

template <typename S>
ImageBatch<S> DualDecoder<S>::decode(const LatentPair<S>& latents) const {
  Graph<S> g;
  const Index batch = latents.z_patch.batch;
  Var zp = g.constant(latents.z_patch.data);
  Var zq = cfg_.queries > 0 ? g.constant(latents.z_query.data) : Var{};
  Var patches = forward_patches(g, zp, zq, batch);
  return ops::unpatchify_pixels(g.value(patches), batch, cfg_.grid(), cfg_.patch_size, cfg_.channels);
}

template class DualDecoder<float>;
template class DualDecoder<double>;

}  // namespace decq
