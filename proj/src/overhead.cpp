#include "decq/overhead.hpp"

#include "decq/tensor.hpp"

namespace decq::overhead {

ArchConfig ArchConfig::vitb_xl() {
  ArchConfig c;
  c.generator.head = HeadArch{2, 2048, 8192};
  return c;
}

ArchConfig ArchConfig::desk_small() {
  ArchConfig c;
  c.encoder = EncoderArch{12, 64, 192, 768, 8, 3};
  c.condenser = CondenserArch{4, 8, 192, 768};
  c.decoder = DecoderArch{8, 64, 384, 1536, 192, 8, 3};
  c.generator = GeneratorArch{6, 64, 256, 1024, 192, HeadArch{}};
  c.steps = 50;
  return c;
}

ArchConfig ArchConfig::preset(const std::string& name) {
  if (name == "vitb-xl") return vitb_xl();
  if (name == "desk-small") return desk_small();
  throw ConfigError("unknown overhead preset: " + name + " (expected vitb-xl or desk-small)");
}

void ArchConfig::validate() const {
  auto pos = [](Count v, const char* what) {
    if (v <= 0) throw ConfigError(std::string("arch config: ") + what + " must be positive");
  };
  pos(encoder.depth, "encoder.depth");
  pos(encoder.tokens, "encoder.tokens");
  pos(encoder.dim, "encoder.dim");
  pos(encoder.ffn_dim, "encoder.ffn_dim");
  pos(decoder.depth, "decoder.depth");
  pos(decoder.tokens, "decoder.tokens");
  pos(decoder.dim, "decoder.dim");
  pos(decoder.ffn_dim, "decoder.ffn_dim");
  pos(generator.depth, "generator.depth");
  pos(generator.tokens, "generator.tokens");
  pos(generator.dim, "generator.dim");
  pos(generator.ffn_dim, "generator.ffn_dim");
  pos(steps, "steps");
  if (condenser.modules < 0 || condenser.queries < 0) throw ConfigError("arch config: M and K must be >= 0");
  if (generator.head.depth < 0) throw ConfigError("arch config: head depth must be >= 0");
}

Count layer_macs(Count n, Count d, Count dff) { return 4 * n * d * d + 2 * n * n * d + 2 * n * d * dff; }

Count layer_params(Count d, Count dff) { return 4 * d * d + 4 * d + 2 * d * dff + dff + d + 4 * d; }

Count condenser_macs(Count k, Count n, Count d, Count dff) {
  return 2 * k * d * d + 2 * n * d * d + 2 * k * n * d + 2 * k * d * dff;
}

Count condenser_params(Count d, Count dff) { return 4 * d * d + 4 * d + 2 * d * dff + dff + d + 4 * d; }

Count linear_params(Count in, Count out) { return in * out + out; }

TokenizerReport tokenizer_report(const ArchConfig& cfg) {
  cfg.validate();
  const auto& e = cfg.encoder;
  const auto& c = cfg.condenser;
  const auto& d = cfg.decoder;
  const Count k = c.modules > 0 ? c.queries : 0;

  TokenizerReport r;
  r.baseline_encoder_macs = e.depth * layer_macs(e.tokens, e.dim, e.ffn_dim);
  r.baseline_decoder_macs = d.depth * layer_macs(d.tokens, d.dim, d.ffn_dim);
  r.baseline_total_macs = r.baseline_encoder_macs + r.baseline_decoder_macs;

  r.condenser_macs = k > 0 ? c.modules * condenser_macs(k, e.tokens, c.dim, c.ffn_dim) : 0;
  r.encoder_macs = r.baseline_encoder_macs + r.condenser_macs;
  r.decoder_macs = d.depth * layer_macs(d.tokens + k, d.dim, d.ffn_dim);
  r.total_macs = r.encoder_macs + r.decoder_macs;

  r.patch_embed_macs = e.tokens * e.patch_size * e.patch_size * e.channels * e.dim;
  r.pixel_head_macs = d.tokens * d.dim * d.patch_size * d.patch_size * d.channels;

  const Count encoder_params = e.depth * layer_params(e.dim, e.ffn_dim) +
                               linear_params(e.patch_size * e.patch_size * e.channels, e.dim);
  const Count decoder_params = d.depth * layer_params(d.dim, d.ffn_dim) + linear_params(d.latent_dim, d.dim) +
                               2 * d.dim + linear_params(d.dim, d.patch_size * d.patch_size * d.channels);
  r.baseline_params = encoder_params + decoder_params;

  if (k > 0) {
    r.condenser_params_total = c.modules * condenser_params(c.dim, c.ffn_dim);
    r.extra_params = r.condenser_params_total + k * c.dim + linear_params(c.dim, d.dim) + k * d.dim;
  }
  r.flops_overhead = static_cast<double>(r.total_macs - r.baseline_total_macs) / static_cast<double>(r.baseline_total_macs);
  r.params_overhead = static_cast<double>(r.extra_params) / static_cast<double>(r.baseline_params);
  return r;
}

Count generator_step_macs(const GeneratorArch& g, Count k) {
  const Count n = g.tokens + k;
  Count macs = g.depth * layer_macs(n, g.dim, g.ffn_dim);
  Count per_token = g.latent_dim * g.dim;  // input projection
  if (g.head.depth > 0) {
    macs += g.head.depth * layer_macs(n, g.head.dim, g.head.ffn_dim);
    per_token += g.latent_dim * g.head.dim + g.dim * g.head.dim + g.head.dim * g.latent_dim;
  } else {
    per_token += g.dim * g.latent_dim;
  }
  return macs + n * per_token;
}

Count generator_query_params(const GeneratorArch& g, Count k) {
  if (k == 0) return 0;
  Count p = linear_params(g.latent_dim, g.dim) + linear_params(g.dim, g.latent_dim) + k * g.dim;
  if (g.head.depth > 0) p += linear_params(g.latent_dim, g.head.dim);
  return p;
}

GenerationReport generation_report(const ArchConfig& cfg) {
  cfg.validate();
  const Count k = cfg.condenser.modules > 0 ? cfg.condenser.queries : 0;
  const auto& d = cfg.decoder;
  GenerationReport r;
  r.baseline_per_step_macs = generator_step_macs(cfg.generator, 0);
  r.per_step_macs = generator_step_macs(cfg.generator, k);
  r.step_delta = r.per_step_macs - r.baseline_per_step_macs;
  const Count dec0 = d.depth * layer_macs(d.tokens, d.dim, d.ffn_dim);
  const Count deck = d.depth * layer_macs(d.tokens + k, d.dim, d.ffn_dim);
  r.decoder_delta = deck - dec0;
  r.baseline_total_macs = cfg.steps * r.baseline_per_step_macs + dec0;
  r.total_macs = cfg.steps * r.per_step_macs + deck;
  r.total_delta = r.total_macs - r.baseline_total_macs;
  r.delta_fraction = static_cast<double>(r.total_delta) / static_cast<double>(r.baseline_total_macs);
  r.param_delta = generator_query_params(cfg.generator, k);
  return r;
}

}  // namespace decq::overhead
