#pragma once

#include "decq/condenser.hpp"
#include "decq/data.hpp"
#include "decq/optim.hpp"

#include <functional>
#include <limits>
#include <span>

namespace decq {

struct GenConfig {
  Index depth = 4;
  Index dim = 128;
  Index heads = 4;
  Index ffn_dim = 512;
  Index latent_dim = 64;  // C of both streams
  Index grid = 8;         // patch tokens N = grid^2
  Index queries = 8;      // K; 0 gives the patch-only formulation
  Index fourier_dim = 64;
  double fourier_scale = 1.0;
  Index head_depth = 0;  // optional prediction head
  Index head_dim = 0;
  int class_count = 10;
  double lambda_query = 1.0;
  Index steps = 50;
  double shift = 1.0;
  double guidance_scale = 1.6;
  double label_drop = 0.1;
  double noise_sigma = 0.1;  // latent augmentation during training; 0 disables

  Index patch_tokens() const { return grid * grid; }
  Index null_class() const { return class_count; }
  void validate() const;
  bool operator==(const GenConfig&) const = default;
};

/// (1 - t) z + t eps on both streams. Throws DomainError if t is outside [0, 1].
template <typename S>
LatentPair<S> interpolate(const LatentPair<S>& z, const LatentPair<S>& eps, double t);

/// Per-sample times: sample b uses t[b].
template <typename S>
LatentPair<S> interpolate(const LatentPair<S>& z, const LatentPair<S>& eps, std::span<const double> t);

/// eps - z on both streams.
template <typename S>
LatentPair<S> velocity_target(const LatentPair<S>& z, const LatentPair<S>& eps);

/// alpha t / (1 + (alpha - 1) t), a monotone bijection of [0, 1].
double time_shift(double t, double alpha);

/// Shifted Euler grid from t = 1 down to t = 0 with `steps` intervals.
std::vector<double> time_grid(Index steps, double alpha);

struct FmLossValue {
  double total = 0;
  double patch = 0;
  double query = 0;
};

/// MSE(v_patch, eps - z) + lambda * MSE(v_query, eps - z) with each MSE a
/// mean over batch, tokens and channels. An empty query stream contributes 0.
template <typename S>
FmLossValue fm_loss(const LatentPair<S>& v_pred, const LatentPair<S>& z, const LatentPair<S>& eps, double lambda_query);

struct FmLossVars {
  Var total;
  Var patch;
  Var query;  // invalid for an empty query stream
};

template <typename S>
FmLossVars fm_loss(Graph<S>& g, Var v_patch, Var v_query, const LatentPair<S>& target, double lambda_query);

/// v_weak + scale (v_strong - v_weak) on both streams.
template <typename S>
LatentPair<S> autoguide(const LatentPair<S>& v_strong, const LatentPair<S>& v_weak, double scale);

/// Anything that predicts a velocity for a noisy latent pair at per-sample
/// times and labels.
template <typename S>
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual LatentPair<S> velocity(const LatentPair<S>& z_t, std::span<const double> t,
                                 std::span<const int> labels) const = 0;
};

/// Returns the given constant velocity everywhere.
template <typename S>
class ConstantField final : public VelocityField<S> {
 public:
  explicit ConstantField(LatentPair<S> v) : v_(std::move(v)) {}
  LatentPair<S> velocity(const LatentPair<S>&, std::span<const double>, std::span<const int>) const override {
    return v_;
  }

 private:
  LatentPair<S> v_;
};

/// Exact velocity field of the straight paths ending at one fixed latent
/// z*: v(z_t, t) = (z_t - z*) / t.
template <typename S>
class PointTargetField final : public VelocityField<S> {
 public:
  explicit PointTargetField(LatentPair<S> target) : target_(std::move(target)) {}
  LatentPair<S> velocity(const LatentPair<S>& z_t, std::span<const double> t, std::span<const int>) const override;

 private:
  LatentPair<S> target_;
};

struct FlowOutput {
  Var patch;
  Var query;  // invalid when K = 0
};

/// DiT-style velocity model over the joint [patch || query] sequence with
/// adaLN-zero conditioning on Gaussian Fourier time features plus a class
/// embedding (row class_count is the null class).
template <typename S>
class FlowTransformer final : public VelocityField<S> {
 public:
  explicit FlowTransformer(const GenConfig& cfg, std::uint64_t seed = 0);

  const GenConfig& config() const { return cfg_; }

  FlowOutput forward(Graph<S>& g, Var z_patch, Var z_query, std::span<const double> t, std::span<const int> labels,
                     Index batch) const;

  LatentPair<S> velocity(const LatentPair<S>& z_t, std::span<const double> t,
                         std::span<const int> labels) const override;

  /// Replaces every parameter with N(0, stddev^2) draws (tests use this to
  /// leave the zero-initialized regime).
  void randomize(double stddev, std::uint64_t seed);

  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

 private:
  struct Block {
    nn::Linear<S> modulation;  // D -> 6D
    nn::Attention<S> attn;
    nn::FeedForward<S> ffn;
  };

  Var conditioning(Graph<S>& g, std::span<const double> t, std::span<const int> labels) const;

  GenConfig cfg_;
  ParameterStore<S> store_;
  Matrix<S> fourier_;  // 1 x fourier_dim/2 fixed frequencies
  nn::Linear<S> time_fc1_, time_fc2_;
  Parameter<S>* class_table_ = nullptr;
  nn::Linear<S> in_patch_, in_query_;
  Parameter<S>* query_pe_ = nullptr;
  Matrix<S> patch_pe_;
  std::vector<Block> blocks_;
  nn::Linear<S> final_modulation_;  // D -> 2D
  nn::Linear<S> head_in_;
  std::vector<nn::TransformerBlock<S>> head_blocks_;
  nn::Linear<S> out_patch_, out_query_;
};

struct SampleOptions {
  Index steps = 50;
  double shift = 1.0;
  double guidance_scale = 1.0;  // used only with a weak model
};

/// Draws N(0, I) noise for both streams from `seed` and integrates
/// dz/dt = v from t = 1 to t = 0 with Euler steps on the shifted grid.
template <typename S>
LatentPair<S> sample(const VelocityField<S>& model, Index patch_tokens, Index queries, Index channels,
                     std::span<const int> labels, const SampleOptions& opts, std::uint64_t seed,
                     const VelocityField<S>* weak = nullptr);

/// Euler integration from given noise.
template <typename S>
LatentPair<S> sample_from(const VelocityField<S>& model, LatentPair<S> noise, std::span<const int> labels,
                          const SampleOptions& opts, const VelocityField<S>* weak = nullptr);

/// Standard normal latents of the given layout.
template <typename S>
LatentPair<S> gaussian_latents(Index batch, Index patch_tokens, Index queries, Index channels, Rng& rng);

/// Latent corpus for generator training: row blocks of N (patch) and K
/// (query) tokens per item.
template <typename S>
struct LatentDataset {
  Matrix<S> patch;
  Matrix<S> query;
  std::vector<int> labels;
  Index patch_tokens = 0;
  Index queries = 0;

  std::size_t size() const { return labels.size(); }
  Index channels() const { return patch.cols(); }
  LatentPair<S> batch(std::span<const std::size_t> indices) const;
  void append(const LatentPair<S>& latents, std::span<const int> batch_labels);
};

struct GenRecord {
  std::int64_t step = 0;
  double loss = 0;
  double patch = 0;
  double query = 0;
  double grad_norm = 0;
};

struct GenSchedule {
  std::int64_t steps = 1000;
  Index batch_size = 32;
  double lr = 2.0e-4;
  double weight_decay = 0.0;
  double ema_decay = 0.9999;
  double clip = 1.0;
  std::uint64_t seed = 0;
  bool operator==(const GenSchedule&) const = default;
};

/// Optimizes the joint flow-matching loss. Each step draws labels with
/// drop-out to the null class, t ~ U(0, 1) shifted, and Gaussian noise from
/// an rng derived from (seed, step).
template <typename S>
class GeneratorTrainer {
 public:
  GeneratorTrainer(FlowTransformer<S>& model, const LatentDataset<S>& data, GenSchedule schedule);

  GenRecord step();
  std::vector<GenRecord> run(const std::function<void(const GenRecord&)>& on_record = {}, std::int64_t stop_at = -1);

  std::int64_t current_step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; optimizer_.set_steps(s); }
  AdamW<S>& optimizer() { return optimizer_; }
  Ema<S>& ema() { return ema_; }

 private:
  FlowTransformer<S>& model_;
  const LatentDataset<S>& data_;
  GenSchedule schedule_;
  std::vector<Parameter<S>*> params_;
  AdamW<S> optimizer_;
  Ema<S> ema_;
  BatchSampler sampler_;
  std::int64_t step_ = 0;
};

extern template class FlowTransformer<float>;
extern template class FlowTransformer<double>;
extern template class GeneratorTrainer<float>;
extern template class GeneratorTrainer<double>;

}  // namespace decq
