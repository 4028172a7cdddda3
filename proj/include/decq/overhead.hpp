#pragma once

#include <cstdint>
#include <string>

namespace decq::overhead {

using Count = std::int64_t;

struct EncoderArch {
  Count depth = 12;
  Count tokens = 256;
  Count dim = 768;
  Count ffn_dim = 3072;
  Count patch_size = 14;
  Count channels = 3;
};

struct CondenserArch {
  Count modules = 4;  // M
  Count queries = 8;  // K
  Count dim = 768;
  Count ffn_dim = 3072;
};

struct DecoderArch {
  Count depth = 28;
  Count tokens = 257;  // N_dec, including the extra class-style token
  Count dim = 1152;
  Count ffn_dim = 4096;
  Count latent_dim = 768;
  Count patch_size = 16;
  Count channels = 3;
};

/// Optional prediction head after the generator trunk; depth 0 disables it.
struct HeadArch {
  Count depth = 0;
  Count dim = 0;
  Count ffn_dim = 0;
};

struct GeneratorArch {
  Count depth = 28;
  Count tokens = 256;  // patch tokens; queries are added on top
  Count dim = 1152;
  Count ffn_dim = 4608;
  Count latent_dim = 768;
  HeadArch head;
};

struct ArchConfig {
  EncoderArch encoder;
  CondenserArch condenser;
  DecoderArch decoder;
  GeneratorArch generator;
  Count steps = 50;

  /// ViT-B/14 encoder, ViT-XL decoder, DiT-XL generator with a 2-layer
  /// 2048-wide head.
  static ArchConfig vitb_xl();
  /// Defaults of the desk-scale models in this repository.
  static ArchConfig desk_small();
  static ArchConfig preset(const std::string& name);
  void validate() const;
};

/// MACs of one transformer layer over N tokens: QKVO projections,
/// score and value products, and the FFN. LN, softmax and biases are omitted.
Count layer_macs(Count tokens, Count dim, Count ffn_dim);
/// Parameters of one pre-norm transformer layer with biases and LN affine.
Count layer_params(Count dim, Count ffn_dim);
/// MACs of one condenser: K queries attending over N patch tokens.
Count condenser_macs(Count queries, Count tokens, Count dim, Count ffn_dim);
/// 4d^2 + 4d (attention) + 2 d d_ff + d_ff + d (FFN) + 4d (LN affine).
Count condenser_params(Count dim, Count ffn_dim);
Count linear_params(Count in, Count out) ;

struct TokenizerReport {
  Count encoder_macs = 0;    // frozen encoder layers
  Count condenser_macs = 0;  // all M condensers
  Count decoder_macs = 0;    // decoder layers at N_dec + K tokens
  Count total_macs = 0;
  Count baseline_encoder_macs = 0;
  Count baseline_decoder_macs = 0;
  Count baseline_total_macs = 0;
  Count patch_embed_macs = 0;  // line items, excluded from totals
  Count pixel_head_macs = 0;
  Count baseline_params = 0;
  Count condenser_params_total = 0;
  Count extra_params = 0;
  double flops_overhead = 0;   // fraction of baseline
  double params_overhead = 0;  // fraction of baseline
};

struct GenerationReport {
  Count per_step_macs = 0;
  Count baseline_per_step_macs = 0;
  Count step_delta = 0;
  Count decoder_delta = 0;
  Count total_macs = 0;
  Count baseline_total_macs = 0;
  Count total_delta = 0;
  double delta_fraction = 0;
  Count param_delta = 0;
};

TokenizerReport tokenizer_report(const ArchConfig& cfg);
GenerationReport generation_report(const ArchConfig& cfg);

/// Generator trunk + head MACs for one sampling step over N + K tokens.
Count generator_step_macs(const GeneratorArch& gen, Count queries);
/// Parameters the query stream adds to the generator.
Count generator_query_params(const GeneratorArch& gen, Count queries);

}  // namespace decq::overhead
