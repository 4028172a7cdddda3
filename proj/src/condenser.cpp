#include "decq/condenser.hpp"

namespace decq {

void CondenserConfig::validate(const BackboneConfig& backbone) const {
  if (queries < 1) throw ConfigError("condenser: K must be >= 1");
  if (tap_layers.empty()) throw ConfigError("condenser: at least one tap layer is required");
  for (std::size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 0 || tap_layers[i] >= backbone.depth)
      throw ConfigError("condenser: tap layer " + std::to_string(tap_layers[i]) + " outside backbone depth " +
                        std::to_string(backbone.depth));
    if (i > 0 && tap_layers[i] <= tap_layers[i - 1]) throw ConfigError("condenser: tap layers must be ascending");
  }
  if (dim != backbone.dim) throw ConfigError("condenser: dim must equal backbone dim");
  if (heads <= 0 || dim % heads != 0) throw ConfigError("condenser: dim must be divisible by heads");
  if (ffn_dim <= 0) throw ConfigError("condenser: ffn_dim must be positive");
}

template <typename S>
CondenserModule<S> CondenserModule<S>::create(ParameterStore<S>& store, const std::string& name,
                                              const CondenserConfig& cfg, Rng& rng) {
  CondenserModule m;
  m.ln_query = nn::LayerNorm<S>::create(store, name + ".ln_query", cfg.dim);
  m.ln_patch = nn::LayerNorm<S>::create(store, name + ".ln_patch", cfg.dim);
  m.attn = nn::Attention<S>::create(store, name + ".attn", cfg.dim, cfg.heads, rng);
  m.ln_ffn = nn::LayerNorm<S>::create(store, name + ".ln_ffn", cfg.dim);
  m.ffn = nn::FeedForward<S>::create(store, name + ".ffn", cfg.dim, cfg.ffn_dim, rng);
  return m;
}

template <typename S>
Var CondenserModule<S>::step(Graph<S>& g, Var queries, Var patches, Index batch) const {
  Var attended = cross_attend(g, ln_query(g, queries), ln_patch(g, patches), batch);
  Var mid = ops::add(g, queries, attended);
  return ops::add(g, mid, ffn(g, ln_ffn(g, mid)));
}

template <typename S>
Condenser<S>::Condenser(const CondenserConfig& cfg, const BackboneConfig& backbone, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate(backbone);
  Rng rng(seed);
  queries_ = &store_.add("condenser.queries", random_normal<S>(cfg_.queries, cfg_.dim, S(0.02), rng));
  for (std::size_t i = 0; i < cfg_.tap_layers.size(); ++i)
    modules_.push_back(CondenserModule<S>::create(store_, "condenser.module" + std::to_string(i), cfg_, rng));
}

template <typename S>
Var Condenser<S>::run(Graph<S>& g, std::span<const Var> tapped, Index batch) const {
  if (tapped.size() != modules_.size())
    throw ConfigError("condenser: expected " + std::to_string(modules_.size()) + " tapped states, got " +
                      std::to_string(tapped.size()));
  Var q = ops::tile(g, g.param(*queries_), batch);
  for (std::size_t i = 0; i < modules_.size(); ++i) q = modules_[i].step(g, q, tapped[i], batch);
  return q;
}

template <typename S>
EncodedVars encode(Graph<S>& g, const ImageBatch<S>& images, const Backbone<S>& backbone,
                   const Condenser<S>* condenser, const EncodeOptions& opts) {
  std::vector<Index> taps;
  if (condenser) {
    condenser->config().validate(backbone.config());
    taps = condenser->config().tap_layers;
  }
  TapOutput out = backbone.forward(g, images, taps);
  EncodedVars enc;
  enc.backbone_final = out.final;
  enc.patch = ops::layer_norm(g, out.final);
  if (condenser) enc.query = ops::layer_norm(g, condenser->run(g, out.tapped, images.batch));

  if (opts.train_mode && opts.noise_sigma > 0) {
    if (!opts.rng) throw ConfigError("encode: train mode requires an rng for noise augmentation");
    auto noisy = [&](Var v) {
      const auto& m = g.value(v);
      return ops::add(g, v, g.constant(random_normal<S>(m.rows(), m.cols(), S(opts.noise_sigma), *opts.rng)));
    };
    enc.patch = noisy(enc.patch);
    if (enc.query.valid()) enc.query = noisy(enc.query);
  }
  return enc;
}

template <typename S>
LatentPair<S> encode(const ImageBatch<S>& images, const Backbone<S>& backbone, const Condenser<S>* condenser) {
  Graph<S> g;
  EncodedVars enc = encode(g, images, backbone, condenser, EncodeOptions{});
  LatentPair<S> out;
  out.z_patch = TokenSequence<S>(g.value(enc.patch), images.batch, backbone.config().tokens());
  if (enc.query.valid())
    out.z_query = TokenSequence<S>(g.value(enc.query), images.batch, condenser->config().queries);
  else
    out.z_query = TokenSequence<S>(Matrix<S>(0, backbone.config().dim), images.batch, 0);
  return out;
}

template struct CondenserModule<float>;
template struct CondenserModule<double>;
template class Condenser<float>;
template class Condenser<double>;
template EncodedVars encode<float>(Graph<float>&, const ImageBatch<float>&, const Backbone<float>&,
                                   const Condenser<float>*, const EncodeOptions&);
template EncodedVars encode<double>(Graph<double>&, const ImageBatch<double>&, const Backbone<double>&,
                                    const Condenser<double>*, const EncodeOptions&);
template LatentPair<float> encode<float>(const ImageBatch<float>&, const Backbone<float>&, const Condenser<float>*);
template LatentPair<double> encode<double>(const ImageBatch<double>&, const Backbone<double>&,
                                           const Condenser<double>*);

}  // namespace decq
