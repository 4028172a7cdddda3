#include "decq/tokenizer.hpp"

#include "decq/metrics.hpp"

#include <cmath>
#include <sstream>

namespace decq {

std::string to_string(Paradigm p) {
  switch (p) {
    case Paradigm::freeze: return "freeze";
    case Paradigm::finetune: return "finetune";
    case Paradigm::distill: return "distill";
    case Paradigm::feat_concat: return "feat_concat";
    case Paradigm::decq: return "decq";
  }
  return "unknown";
}

Paradigm parse_paradigm(const std::string& name) {
  for (Paradigm p : {Paradigm::freeze, Paradigm::finetune, Paradigm::distill, Paradigm::feat_concat, Paradigm::decq})
    if (to_string(p) == name) return p;
  if (name == "feat-concat") return Paradigm::feat_concat;
  throw ConfigError("unknown variant '" + name + "' (expected freeze, finetune, distill, feat_concat or decq)");
}

void VariantSpec::validate() const {
  if (distill_weight < 0) throw ConfigError("variant: distill_weight must be nonnegative");
  if (bottleneck_dim < 0) throw ConfigError("variant: bottleneck_dim must be nonnegative");
}

void TokenizerConfig::resolve() {
  backbone.validate();
  variant.validate();
  if (noise_sigma < 0) throw ConfigError("tokenizer: noise_sigma must be nonnegative");
  if (perceptual_weight < 0) throw ConfigError("tokenizer: perceptual_weight must be nonnegative");
  condenser.dim = backbone.dim;
  if (variant.uses_queries()) condenser.validate(backbone);
  decoder.patch_size = backbone.patch_size;
  decoder.image_size = backbone.image_size;
  decoder.channels = backbone.channels;
  decoder.latent_dim = backbone.dim + (variant.mode == Paradigm::feat_concat ? variant.bottleneck_dim : 0);
  decoder.query_dim = backbone.dim;
  decoder.queries = variant.uses_queries() ? condenser.queries : 0;
  decoder.validate();
}

// ---------------------------------------------------------------------------

template <typename S>
FeatureBranch<S>::FeatureBranch(const BackboneConfig& backbone, Index bottleneck, std::uint64_t seed)
    : patch_(backbone.patch_size) {
  if (bottleneck <= 0) throw ConfigError("feature branch: bottleneck must be positive");
  Rng rng(seed);
  const Index in = backbone.patch_size * backbone.patch_size * backbone.channels;
  const Index hidden = std::max<Index>(4 * bottleneck, 32);
  fc1_ = nn::Linear<S>::create(store_, "branch.fc1", in, hidden, rng);
  fc2_ = nn::Linear<S>::create(store_, "branch.fc2", hidden, bottleneck, rng);
}

template <typename S>
Var FeatureBranch<S>::operator()(Graph<S>& g, const ImageBatch<S>& images) const {
  Var pixels = g.constant(ops::patchify_pixels(images, patch_));
  return fc2_(g, ops::gelu(g, fc1_(g, pixels)));
}

// ---------------------------------------------------------------------------

template <typename S>
PerceptualNet<S>::PerceptualNet(Index image_size, int classes, std::uint64_t seed) : image_size_(image_size) {
  if (image_size < 4) throw ConfigError("perceptual net: image too small");
  if (classes < 1) throw ConfigError("perceptual net: need at least one class");
  Rng rng(seed);
  conv1_ = nn::Linear<S>::create(store_, "perceptual.conv1", 3 * 3 * 3, 16, rng);
  conv2_ = nn::Linear<S>::create(store_, "perceptual.conv2", 3 * 3 * 16, 32, rng);
  head_ = nn::Linear<S>::create(store_, "perceptual.head", 32, classes, rng);
  store_.set_trainable(false);
}

template <typename S>
std::vector<Var> PerceptualNet<S>::features(Graph<S>& g, Var image, Index batch) const {
  const Index s1 = (image_size_ + 2 - 3) / 2 + 1;
  Var f1 = ops::relu(g, conv1_(g, ops::im2col(g, image, batch, image_size_, image_size_, 3, 2, 1)));
  Var f2 = ops::relu(g, conv2_(g, ops::im2col(g, f1, batch, s1, s1, 3, 2, 1)));
  return {f1, f2};
}

template <typename S>
Var PerceptualNet<S>::logits(Graph<S>& g, Var image, Index batch) const {
  auto f = features(g, image, batch);
  return head_(g, ops::mean_tokens(g, f[1], batch));
}

template <typename S>
Eigen::MatrixXd PerceptualNet<S>::pooled_features(const ImageBatch<S>& images) const {
  Graph<S> g;
  auto f = features(g, g.constant(images.data), images.batch);
  Var p1 = ops::mean_tokens(g, f[0], images.batch);
  Var p2 = ops::mean_tokens(g, f[1], images.batch);
  return g.value(ops::concat_channels(g, p1, p2)).template cast<double>();
}

template <typename S>
Eigen::MatrixXd PerceptualNet<S>::class_probabilities(const ImageBatch<S>& images) const {
  Graph<S> g;
  Eigen::MatrixXd z = g.value(logits(g, g.constant(images.data), images.batch)).template cast<double>();
  for (Index i = 0; i < z.rows(); ++i) {
    z.row(i).array() -= z.row(i).maxCoeff();
    z.row(i) = z.row(i).array().exp().matrix();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

template <typename S>
void PerceptualNet<S>::train_classifier(const Dataset& data, std::int64_t steps, Index batch, double lr,
                                        std::uint64_t seed) {
  if (data.size() == 0) throw ConfigError("perceptual net: empty dataset");
  if (data.image_size != image_size_) throw ShapeError("perceptual net: dataset image size mismatch");
  store_.set_trainable(true);
  AdamW<S> opt(store_.trainable(), AdamWOptions{lr});
  BatchSampler sampler(data.size(), static_cast<std::size_t>(batch), seed);
  for (std::int64_t s = 0; s < steps; ++s) {
    auto idx = sampler.indices_for_step(static_cast<std::uint64_t>(s));
    ImageBatch<S> x = data.batch<S>(idx);
    auto labels = data.batch_labels(idx);
    Graph<S> g;
    Var loss = ops::cross_entropy(g, logits(g, g.constant(x.data), x.batch), labels);
    opt.zero_grad();
    g.backward(loss);
    opt.step();
  }
  store_.set_trainable(false);
}

// ---------------------------------------------------------------------------

template <typename S>
ReconLoss recon_loss(Graph<S>& g, Var pred, const ImageBatch<S>& target, double perceptual_weight,
                     const PerceptualNet<S>* net) {
  const auto& p = g.value(pred);
  if (p.rows() != target.data.rows() || p.cols() != target.data.cols())
    throw ShapeError("recon_loss: prediction " + std::to_string(p.rows()) + "x" + std::to_string(p.cols()) +
                     " vs target " + std::to_string(target.data.rows()) + "x" + std::to_string(target.data.cols()));
  ReconLoss out;
  Var tgt = g.constant(target.data);
  out.l1 = ops::mean_abs_error(g, pred, tgt);
  out.total = out.l1;
  if (perceptual_weight > 0 && net) {
    auto fp = net->features(g, pred, target.batch);
    auto ft = net->features(g, tgt, target.batch);
    Var perc;
    for (std::size_t i = 0; i < fp.size(); ++i) {
      Var term = ops::mse(g, fp[i], ft[i]);
      perc = perc.valid() ? ops::add(g, perc, term) : term;
    }
    out.perceptual = perc;
    out.total = ops::add(g, out.l1, ops::scale(g, perc, S(perceptual_weight)));
  }
  return out;
}

template <typename S>
Var distill_loss(Graph<S>& g, Var student, Var teacher) {
  return ops::mse(g, student, teacher);
}

// ---------------------------------------------------------------------------

template <typename S>
Tokenizer<S>::Tokenizer(TokenizerConfig cfg, std::uint64_t seed, const Backbone<S>* pretrained)
    : cfg_((cfg.resolve(), std::move(cfg))),
      backbone_(cfg_.backbone, mix_seed(seed, 1)),
      decoder_(cfg_.decoder, mix_seed(seed, 4)) {
  if (pretrained) {
    if (!(pretrained->config() == cfg_.backbone)) throw ConfigError("tokenizer: pretrained backbone config differs");
    backbone_.parameters().copy_values_from(pretrained->parameters());
  }
  const Paradigm mode = cfg_.variant.mode;
  if (cfg_.variant.backbone_trainable())
    backbone_.unfreeze();
  else
    backbone_.freeze();
  if (mode == Paradigm::distill) {
    teacher_ = std::make_unique<Backbone<S>>(cfg_.backbone, 0, "teacher");
    teacher_->parameters().copy_values_from(backbone_.parameters());
    teacher_->freeze();
  }
  if (mode == Paradigm::decq) condenser_ = std::make_unique<Condenser<S>>(cfg_.condenser, cfg_.backbone, mix_seed(seed, 2));
  if (mode == Paradigm::feat_concat && cfg_.variant.bottleneck_dim > 0)
    branch_ = std::make_unique<FeatureBranch<S>>(cfg_.backbone, cfg_.variant.bottleneck_dim, mix_seed(seed, 3));
}

template <typename S>
EncodedVars Tokenizer<S>::encode(Graph<S>& g, const ImageBatch<S>& images, const EncodeOptions& opts) const {
  EncodedVars enc = decq::encode(g, images, backbone_, condenser_.get(), opts);
  if (branch_) {
    Var extra = ops::layer_norm(g, (*branch_)(g, images));
    if (opts.train_mode && opts.noise_sigma > 0) {
      const auto& m = g.value(extra);
      extra = ops::add(g, extra, g.constant(random_normal<S>(m.rows(), m.cols(), S(opts.noise_sigma), *opts.rng)));
    }
    enc.patch = ops::concat_channels(g, enc.patch, extra);
  }
  return enc;
}

template <typename S>
LatentPair<S> Tokenizer<S>::latents(const ImageBatch<S>& images) const {
  Graph<S> g;
  EncodedVars enc = encode(g, images, EncodeOptions{});
  LatentPair<S> out;
  out.z_patch = TokenSequence<S>(g.value(enc.patch), images.batch, cfg_.backbone.tokens());
  if (enc.query.valid())
    out.z_query = TokenSequence<S>(g.value(enc.query), images.batch, cfg_.condenser.queries);
  else
    out.z_query = TokenSequence<S>(Matrix<S>(0, cfg_.backbone.dim), images.batch, 0);
  return out;
}

template <typename S>
ImageBatch<S> Tokenizer<S>::reconstruct(const ImageBatch<S>& images) const {
  return decoder_.decode(latents(images));
}

template <typename S>
std::vector<ParameterStore<S>*> Tokenizer<S>::stores() {
  std::vector<ParameterStore<S>*> out{&backbone_.parameters()};
  if (teacher_) out.push_back(&teacher_->parameters());
  if (condenser_) out.push_back(&condenser_->parameters());
  if (branch_) out.push_back(&branch_->parameters());
  out.push_back(&decoder_.parameters());
  return out;
}

template <typename S>
std::vector<Parameter<S>*> Tokenizer<S>::trainable_parameters() {
  std::vector<Parameter<S>*> out;
  for (auto* store : stores())
    for (auto* p : store->trainable()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
ReconMetrics evaluate_reconstruction(const Tokenizer<S>& tok, const Dataset& data, Index max_samples, Index batch) {
  const std::size_t n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(std::max<Index>(max_samples, 0)));
  if (n == 0) throw ConfigError("evaluate_reconstruction: no samples");
  double sq = 0, count = 0, ssim_sum = 0;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(batch)); ++i) idx.push_back(i);
    ImageBatch<S> x = data.batch<S>(idx);
    ImageBatch<S> y = tok.reconstruct(x);
    sq += (y.data - x.data).template cast<double>().squaredNorm();
    count += static_cast<double>(x.data.size());
    ssim_sum += metrics::ssim(x, y) * static_cast<double>(idx.size());
  }
  return ReconMetrics{metrics::psnr_from_mse(sq / count, 2.0), ssim_sum / static_cast<double>(n)};
}

template <typename S>
TokenizerTrainer<S>::TokenizerTrainer(Tokenizer<S>& tok, const Dataset& train, const Dataset& val, Schedule schedule,
                                      const PerceptualNet<S>* perceptual)
    : tok_(tok),
      train_(train),
      val_(val),
      schedule_(schedule),
      perceptual_(perceptual),
      params_(tok.trainable_parameters()),
      optimizer_(params_, AdamWOptions{schedule.lr, 0.9, 0.999, 1e-8, schedule.weight_decay}),
      ema_(params_, schedule.ema_decay),
      sampler_(train.size(), static_cast<std::size_t>(schedule.batch_size), schedule.seed) {
  if (train.size() == 0) throw ConfigError("tokenizer trainer: empty training set");
  if (schedule.batch_size <= 0 || schedule.steps < 0) throw ConfigError("tokenizer trainer: invalid schedule");
}

template <typename S>
TrainRecord TokenizerTrainer<S>::step() {
  const auto& cfg = tok_.config();
  auto idx = sampler_.indices_for_step(static_cast<std::uint64_t>(step_));
  ImageBatch<S> images = train_.batch<S>(idx);
  Rng rng(mix_seed(schedule_.seed, static_cast<std::uint64_t>(step_)));

  Graph<S> g;
  EncodedVars enc = tok_.encode(g, images, EncodeOptions{true, cfg.noise_sigma, &rng});
  Var pred = tok_.decoder().forward_image(g, enc.patch, enc.query, images.batch);
  ReconLoss rl = recon_loss(g, pred, images, cfg.perceptual_weight, perceptual_);
  Var total = rl.total;

  TrainRecord rec;
  rec.step = step_ + 1;
  if (cfg.variant.mode == Paradigm::distill) {
    Var teacher = tok_.teacher()->forward(g, images).final;
    Var d = distill_loss(g, ops::layer_norm(g, enc.backbone_final), ops::layer_norm(g, teacher));
    rec.distill = static_cast<double>(g.value(d)(0, 0));
    total = ops::add(g, total, ops::scale(g, d, S(cfg.variant.distill_weight)));
  }
  rec.loss = static_cast<double>(g.value(total)(0, 0));
  rec.l1 = static_cast<double>(g.value(rl.l1)(0, 0));
  if (rl.perceptual.valid()) rec.perceptual = static_cast<double>(g.value(rl.perceptual)(0, 0));
  if (!std::isfinite(rec.loss)) {
    std::ostringstream msg;
    msg << "non-finite tokenizer loss at step " << rec.step << " (lr " << optimizer_.options().lr << ", l1 "
        << rec.l1 << ", perceptual " << rec.perceptual << ", distill " << rec.distill << ")";
    throw NumericError(msg.str());
  }

  optimizer_.zero_grad();
  g.backward(total);
  rec.grad_norm = clip_grad_norm(params_, schedule_.clip);
  optimizer_.step();
  ema_.update();
  ++step_;
  return rec;
}

template <typename S>
std::vector<TrainRecord> TokenizerTrainer<S>::run(const std::function<void(const TrainRecord&)>& on_record,
                                                  std::int64_t stop_at) {
  const std::int64_t limit = stop_at >= 0 ? std::min(stop_at, schedule_.steps) : schedule_.steps;
  const std::int64_t every = schedule_.eval_interval();
  std::vector<TrainRecord> out;
  while (step_ < limit) {
    TrainRecord rec = step();
    if (val_.size() > 0 && (step_ % every == 0 || step_ == schedule_.steps)) {
      ReconMetrics m = evaluate();
      rec.psnr = m.psnr;
      rec.ssim = m.ssim;
    }
    if (on_record) on_record(rec);
    out.push_back(rec);
  }
  return out;
}

template <typename S>
ReconMetrics TokenizerTrainer<S>::evaluate() {
  if (schedule_.eval_ema) ema_.swap();
  ReconMetrics m = evaluate_reconstruction(tok_, val_, schedule_.eval_samples);
  if (schedule_.eval_ema) ema_.swap();
  return m;
}

// ---------------------------------------------------------------------------

template <typename S>
double pretrain_backbone(Backbone<S>& backbone, const Dataset& data, std::int64_t steps, Index batch, double lr,
                         std::uint64_t seed) {
  if (data.size() == 0) throw ConfigError("pretrain: empty dataset");
  if (data.class_count() < 2) throw ConfigError("pretrain: need at least two classes");
  const bool was_frozen = backbone.frozen();
  backbone.unfreeze();
  ParameterStore<S> head_store;
  Rng rng(mix_seed(seed, 99));
  auto head = nn::Linear<S>::create(head_store, "pretrain.head", backbone.config().dim, data.class_count(), rng);
  auto params = backbone.parameters().trainable();
  for (auto* p : head_store.trainable()) params.push_back(p);
  AdamW<S> opt(params, AdamWOptions{lr});
  BatchSampler sampler(data.size(), static_cast<std::size_t>(batch), seed);
  double accuracy = 0;
  for (std::int64_t s = 0; s < steps; ++s) {
    auto idx = sampler.indices_for_step(static_cast<std::uint64_t>(s));
    ImageBatch<S> x = data.batch<S>(idx);
    auto labels = data.batch_labels(idx);
    Graph<S> g;
    Var pooled = ops::mean_tokens(g, ops::layer_norm(g, backbone.forward(g, x).final), x.batch);
    Var logits = head(g, pooled);
    Var loss = ops::cross_entropy(g, logits, labels);
    if (!std::isfinite(static_cast<double>(g.value(loss)(0, 0))))
      throw NumericError("non-finite pretraining loss at step " + std::to_string(s));
    const auto& z = g.value(logits);
    int correct = 0;
    for (Index i = 0; i < z.rows(); ++i) {
      Index arg;
      z.row(i).maxCoeff(&arg);
      correct += arg == labels[static_cast<std::size_t>(i)];
    }
    accuracy = static_cast<double>(correct) / static_cast<double>(z.rows());
    opt.zero_grad();
    g.backward(loss);
    clip_grad_norm(params, 1.0);
    opt.step();
  }
  if (was_frozen) backbone.freeze();
  return accuracy;
}

#define DECQ_INSTANTIATE(S)                                                                                  \
  template class FeatureBranch<S>;                                                                           \
  template class PerceptualNet<S>;                                                                           \
  template class Tokenizer<S>;                                                                               \
  template class TokenizerTrainer<S>;                                                                        \
  template ReconLoss recon_loss<S>(Graph<S>&, Var, const ImageBatch<S>&, double, const PerceptualNet<S>*);   \
  template Var distill_loss<S>(Graph<S>&, Var, Var);                                                         \
  template ReconMetrics evaluate_reconstruction<S>(const Tokenizer<S>&, const Dataset&, Index, Index);       \
  template double pretrain_backbone<S>(Backbone<S>&, const Dataset&, std::int64_t, Index, double, std::uint64_t);

DECQ_INSTANTIATE(float)
DECQ_INSTANTIATE(double)

}  // namespace decq
