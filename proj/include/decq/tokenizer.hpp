#pragma once

#include "decq/data.hpp"
#include "decq/decoder.hpp"
#include "decq/optim.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>

namespace decq {

/// Tokenizer training paradigms compared in the trade-off study.
enum class Paradigm { freeze, finetune, distill, feat_concat, decq };

std::string to_string(Paradigm p);
Paradigm parse_paradigm(const std::string& name);

struct VariantSpec {
  Paradigm mode = Paradigm::decq;
  double distill_weight = 1.0;
  Index bottleneck_dim = 16;

  bool backbone_trainable() const { return mode == Paradigm::finetune || mode == Paradigm::distill; }
  bool uses_queries() const { return mode == Paradigm::decq; }
  void validate() const;
  bool operator==(const VariantSpec&) const = default;
};

struct TokenizerConfig {
  BackboneConfig backbone;
  CondenserConfig condenser;
  DecoderConfig decoder;
  VariantSpec variant;
  double noise_sigma = 0.1;
  double perceptual_weight = 0.5;

  /// Derives decoder/condenser fields that must agree with the backbone and
  /// variant (widths, K, patch layout) and validates the result.
  void resolve();
  bool operator==(const TokenizerConfig&) const = default;
};

/// Trainable low-level branch for the feature-concatenation paradigm: a
/// per-patch MLP stem bottlenecked to b channels.
template <typename S>
class FeatureBranch {
 public:
  FeatureBranch(const BackboneConfig& backbone, Index bottleneck, std::uint64_t seed);
  Var operator()(Graph<S>& g, const ImageBatch<S>& images) const;
  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  Index patch_;
  ParameterStore<S> store_;
  nn::Linear<S> fc1_, fc2_;
};

/// Small fixed convolutional network used for the perceptual loss proxy and
/// for distribution-metric features.
template <typename S>
class PerceptualNet {
 public:
  PerceptualNet(Index image_size, int classes, std::uint64_t seed = 7);

  /// Feature maps of both conv stages for a channels-last image node.
  std::vector<Var> features(Graph<S>& g, Var image, Index batch) const;
  Var logits(Graph<S>& g, Var image, Index batch) const;

  /// Mean-pooled concatenated features, one row per image.
  Eigen::MatrixXd pooled_features(const ImageBatch<S>& images) const;
  Eigen::MatrixXd class_probabilities(const ImageBatch<S>& images) const;

  /// Brief supervised training of the conv stages and head; the network is
  /// frozen afterwards.
  void train_classifier(const Dataset& data, std::int64_t steps, Index batch, double lr, std::uint64_t seed);

  Index image_size() const { return image_size_; }
  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  Index image_size_;
  ParameterStore<S> store_;
  nn::Linear<S> conv1_, conv2_, head_;
};

struct ReconLoss {
  Var total;
  Var l1;
  Var perceptual;  // invalid when the weight is zero
};

/// mean|pred - target| + w_perc * perceptual proxy (sum of feature-map MSEs).
template <typename S>
ReconLoss recon_loss(Graph<S>& g, Var pred, const ImageBatch<S>& target, double perceptual_weight,
                     const PerceptualNet<S>* net);

/// Mean squared error over all tokens and channels.
template <typename S>
Var distill_loss(Graph<S>& g, Var student, Var teacher);

/// Backbone + optional condenser / feature branch / teacher + decoder, wired
/// according to the variant.
template <typename S>
class Tokenizer {
 public:
  /// `pretrained` (optional) supplies initial backbone weights.
  Tokenizer(TokenizerConfig cfg, std::uint64_t seed, const Backbone<S>* pretrained = nullptr);

  const TokenizerConfig& config() const { return cfg_; }

  /// Latents for the decoder. In train mode both streams receive noise.
  EncodedVars encode(Graph<S>& g, const ImageBatch<S>& images, const EncodeOptions& opts) const;
  LatentPair<S> latents(const ImageBatch<S>& images) const;
  ImageBatch<S> reconstruct(const ImageBatch<S>& images) const;

  Backbone<S>& backbone() { return backbone_; }
  const Backbone<S>& backbone() const { return backbone_; }
  const Backbone<S>* teacher() const { return teacher_ ? teacher_.get() : nullptr; }
  Condenser<S>* condenser() { return condenser_.get(); }
  const Condenser<S>* condenser() const { return condenser_.get(); }
  FeatureBranch<S>* branch() { return branch_.get(); }
  const FeatureBranch<S>* branch() const { return branch_.get(); }
  DualDecoder<S>& decoder() { return decoder_; }
  const DualDecoder<S>& decoder() const { return decoder_; }

  /// Every parameter store, in a fixed order (checkpoint layout).
  std::vector<ParameterStore<S>*> stores();
  std::vector<Parameter<S>*> trainable_parameters();
  /// Fingerprint of the backbone that feeds the latents.
  std::uint64_t backbone_fingerprint() const { return backbone_.parameters().fingerprint(); }

 private:
  TokenizerConfig cfg_;
  Backbone<S> backbone_;
  std::unique_ptr<Backbone<S>> teacher_;
  std::unique_ptr<Condenser<S>> condenser_;
  std::unique_ptr<FeatureBranch<S>> branch_;
  DualDecoder<S> decoder_;
};

struct Schedule {
  std::int64_t steps = 1000;
  Index batch_size = 16;
  double lr = 2.0e-4;
  double weight_decay = 0.0;
  double ema_decay = 0.9999;
  double clip = 1.0;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 0;  // 0: every steps / 20
  Index eval_samples = 64;
  bool eval_ema = false;

  std::int64_t eval_interval() const { return eval_every > 0 ? eval_every : std::max<std::int64_t>(1, steps / 20); }
  bool operator==(const Schedule&) const = default;
};

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0;
  double l1 = 0;
  double perceptual = 0;
  double distill = 0;
  double grad_norm = 0;
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
};

struct ReconMetrics {
  double psnr = 0;
  double ssim = 0;
};

/// Held-out PSNR/SSIM over the first `max_samples` items of `data`.
template <typename S>
ReconMetrics evaluate_reconstruction(const Tokenizer<S>& tok, const Dataset& data, Index max_samples, Index batch = 16);

/// Optimization state for one tokenizer: AdamW over the trainable
/// parameters, global-norm clipping, EMA, and a step counter. Batches and
/// noise draws are pure functions of (seed, step).
template <typename S>
class TokenizerTrainer {
 public:
  TokenizerTrainer(Tokenizer<S>& tok, const Dataset& train, const Dataset& val, Schedule schedule,
                   const PerceptualNet<S>* perceptual);

  /// One optimization step; throws NumericError on a non-finite loss.
  TrainRecord step();
  /// Runs until `schedule.steps` (or `stop_at` if smaller), evaluating on the
  /// held-out split at the configured cadence.
  std::vector<TrainRecord> run(const std::function<void(const TrainRecord&)>& on_record = {},
                               std::int64_t stop_at = -1);
  /// Held-out metrics; uses the EMA weights when `schedule.eval_ema` is set.
  ReconMetrics evaluate();

  std::int64_t current_step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; optimizer_.set_steps(s); }
  AdamW<S>& optimizer() { return optimizer_; }
  Ema<S>& ema() { return ema_; }
  const Schedule& schedule() const { return schedule_; }

 private:
  Tokenizer<S>& tok_;
  const Dataset& train_;
  const Dataset& val_;
  Schedule schedule_;
  const PerceptualNet<S>* perceptual_;
  std::vector<Parameter<S>*> params_;
  AdamW<S> optimizer_;
  Ema<S> ema_;
  BatchSampler sampler_;
  std::int64_t step_ = 0;
};

/// Proxy pretraining of the stand-in foundation backbone: shape
/// classification from mean-pooled final tokens. Returns final-batch accuracy.
template <typename S>
double pretrain_backbone(Backbone<S>& backbone, const Dataset& data, std::int64_t steps, Index batch, double lr,
                         std::uint64_t seed);

extern template class Tokenizer<float>;
extern template class Tokenizer<double>;
extern template class TokenizerTrainer<float>;
extern template class TokenizerTrainer<double>;
extern template class PerceptualNet<float>;
extern template class PerceptualNet<double>;

}  // namespace decq
