#include "decq/flow.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace decq {

void GenConfig::validate() const {
  if (depth < 0 || dim <= 0 || heads <= 0 || ffn_dim <= 0 || latent_dim <= 0 || grid <= 0 || queries < 0)
    throw ConfigError("generator: invalid dimensions");
  if (dim % heads != 0) throw ConfigError("generator: dim must be divisible by heads");
  if (dim % 4 != 0) throw ConfigError("generator: dim must be divisible by 4 for the 2D position code");
  if (fourier_dim <= 0 || fourier_dim % 2 != 0) throw ConfigError("generator: fourier_dim must be positive and even");
  if (head_depth < 0 || (head_depth > 0 && (head_dim <= 0 || head_dim % heads != 0)))
    throw ConfigError("generator: head_dim must be positive and divisible by heads when a head is used");
  if (class_count < 1) throw ConfigError("generator: class_count must be positive");
  if (lambda_query < 0) throw ConfigError("generator: lambda_query must be nonnegative");
  if (steps < 1) throw ConfigError("generator: steps must be at least 1");
  if (shift < 1) throw ConfigError("generator: shift must be >= 1");
  if (guidance_scale < 0) throw ConfigError("generator: guidance_scale must be nonnegative");
  if (label_drop < 0 || label_drop > 1) throw ConfigError("generator: label_drop must lie in [0, 1]");
  if (noise_sigma < 0) throw ConfigError("generator: noise_sigma must be nonnegative");
}

namespace {

template <typename S>
void require_same_layout(const LatentPair<S>& a, const LatentPair<S>& b, const char* what) {
  if (a.z_patch.data.rows() != b.z_patch.data.rows() || a.z_patch.data.cols() != b.z_patch.data.cols() ||
      a.z_query.data.rows() != b.z_query.data.rows() || a.z_query.data.cols() != b.z_query.data.cols())
    throw ShapeError(std::string(what) + ": latent layouts differ");
}

template <typename S, typename F>
LatentPair<S> combine(const LatentPair<S>& a, const LatentPair<S>& b, F f) {
  LatentPair<S> out;
  out.z_patch = TokenSequence<S>(f(a.z_patch.data, b.z_patch.data), a.z_patch.batch, a.z_patch.tokens);
  out.z_query = TokenSequence<S>(f(a.z_query.data, b.z_query.data), a.z_query.batch, a.z_query.tokens);
  return out;
}

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time " + std::to_string(t) + " outside [0, 1]");
}

template <typename S>
void scale_rows_per_sample(Matrix<S>& m, Index tokens, std::span<const double> w) {
  for (std::size_t b = 0; b < w.size(); ++b) m.middleRows(static_cast<Index>(b) * tokens, tokens) *= S(w[b]);
}

}  // namespace

template <typename S>
LatentPair<S> interpolate(const LatentPair<S>& z, const LatentPair<S>& eps, double t) {
  check_time(t);
  require_same_layout(z, eps, "interpolate");
  if (t == 0.0) return z;
  if (t == 1.0) return eps;
  const S a = S(1.0 - t), b = S(t);
  return combine(z, eps, [&](const Matrix<S>& x, const Matrix<S>& e) -> Matrix<S> { return a * x + b * e; });
}

template <typename S>
LatentPair<S> interpolate(const LatentPair<S>& z, const LatentPair<S>& eps, std::span<const double> t) {
  require_same_layout(z, eps, "interpolate");
  if (static_cast<Index>(t.size()) != z.batch()) throw ShapeError("interpolate: one time per sample required");
  for (double v : t) check_time(v);
  std::vector<double> keep(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) keep[i] = 1.0 - t[i];
  LatentPair<S> a = z, b = eps;
  scale_rows_per_sample(a.z_patch.data, a.z_patch.tokens, keep);
  scale_rows_per_sample(a.z_query.data, a.z_query.tokens, keep);
  scale_rows_per_sample(b.z_patch.data, b.z_patch.tokens, t);
  scale_rows_per_sample(b.z_query.data, b.z_query.tokens, t);
  return combine(a, b, [](const Matrix<S>& x, const Matrix<S>& e) -> Matrix<S> { return x + e; });
}

template <typename S>
LatentPair<S> velocity_target(const LatentPair<S>& z, const LatentPair<S>& eps) {
  require_same_layout(z, eps, "velocity_target");
  return combine(z, eps, [](const Matrix<S>& x, const Matrix<S>& e) -> Matrix<S> { return e - x; });
}

double time_shift(double t, double alpha) {
  check_time(t);
  if (!(alpha >= 1.0)) throw DomainError("time shift alpha must be >= 1");
  return alpha * t / (1.0 + (alpha - 1.0) * t);
}

std::vector<double> time_grid(Index steps, double alpha) {
  if (steps < 1) throw ConfigError("sampling needs at least one step");
  std::vector<double> grid(static_cast<std::size_t>(steps + 1));
  for (Index i = 0; i <= steps; ++i)
    grid[static_cast<std::size_t>(i)] = time_shift(1.0 - static_cast<double>(i) / static_cast<double>(steps), alpha);
  grid.front() = 1.0;
  grid.back() = 0.0;
  return grid;
}

template <typename S>
FmLossValue fm_loss(const LatentPair<S>& v_pred, const LatentPair<S>& z, const LatentPair<S>& eps,
                    double lambda_query) {
  require_same_layout(v_pred, z, "fm_loss");
  LatentPair<S> target = velocity_target(z, eps);
  FmLossValue out;
  out.patch = (v_pred.z_patch.data - target.z_patch.data).template cast<double>().squaredNorm() /
              static_cast<double>(target.z_patch.data.size());
  if (target.z_query.data.size() > 0)
    out.query = (v_pred.z_query.data - target.z_query.data).template cast<double>().squaredNorm() /
                static_cast<double>(target.z_query.data.size());
  out.total = out.patch + lambda_query * out.query;
  return out;
}

template <typename S>
FmLossVars fm_loss(Graph<S>& g, Var v_patch, Var v_query, const LatentPair<S>& target, double lambda_query) {
  FmLossVars out;
  out.patch = ops::mse(g, v_patch, g.constant(target.z_patch.data));
  out.total = out.patch;
  if (target.z_query.data.size() > 0) {
    if (!v_query.valid()) throw ShapeError("fm_loss: query prediction missing");
    out.query = ops::mse(g, v_query, g.constant(target.z_query.data));
    if (lambda_query != 0) out.total = ops::add(g, out.patch, ops::scale(g, out.query, S(lambda_query)));
  }
  return out;
}

template <typename S>
LatentPair<S> autoguide(const LatentPair<S>& v_strong, const LatentPair<S>& v_weak, double scale) {
  if (scale < 0) throw DomainError("guidance scale must be nonnegative");
  require_same_layout(v_strong, v_weak, "autoguide");
  const S s = S(scale);
  return combine(v_strong, v_weak,
                 [&](const Matrix<S>& a, const Matrix<S>& w) -> Matrix<S> { return w + s * (a - w); });
}

template <typename S>
LatentPair<S> PointTargetField<S>::velocity(const LatentPair<S>& z_t, std::span<const double> t,
                                            std::span<const int>) const {
  LatentPair<S> out = z_t;
  for (Index b = 0; b < z_t.batch(); ++b) {
    const double tb = t[static_cast<std::size_t>(b)];
    if (tb <= 0) throw DomainError("point-target field is singular at t = 0");
    const S inv = S(1.0 / tb);
    out.z_patch.sample(b) = (z_t.z_patch.sample(b) - target_.z_patch.data) * inv;
    if (z_t.z_query.tokens > 0) out.z_query.sample(b) = (z_t.z_query.sample(b) - target_.z_query.data) * inv;
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
FlowTransformer<S>::FlowTransformer(const GenConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const Index D = cfg_.dim;
  fourier_ = random_normal<S>(1, cfg_.fourier_dim / 2, S(cfg_.fourier_scale), rng);
  time_fc1_ = nn::Linear<S>::create(store_, "gen.time.fc1", cfg_.fourier_dim, D, rng);
  time_fc2_ = nn::Linear<S>::create(store_, "gen.time.fc2", D, D, rng);
  class_table_ = &store_.add("gen.class_table", random_normal<S>(cfg_.class_count + 1, D, S(0.02), rng));
  in_patch_ = nn::Linear<S>::create(store_, "gen.in_patch", cfg_.latent_dim, D, rng);
  if (cfg_.queries > 0) {
    in_query_ = nn::Linear<S>::create(store_, "gen.in_query", cfg_.latent_dim, D, rng);
    query_pe_ = &store_.add("gen.query_pe", random_normal<S>(cfg_.queries, D, S(0.02), rng));
  }
  patch_pe_ = sincos_2d<S>(cfg_.grid, D);
  for (Index l = 0; l < cfg_.depth; ++l) {
    const std::string name = "gen.block" + std::to_string(l);
    Block b;
    b.modulation = nn::Linear<S>::create(store_, name + ".modulation", D, 6 * D, rng);
    b.modulation.weight->value.setZero();
    b.attn = nn::Attention<S>::create(store_, name + ".attn", D, cfg_.heads, rng);
    b.ffn = nn::FeedForward<S>::create(store_, name + ".ffn", D, cfg_.ffn_dim, rng);
    blocks_.push_back(b);
  }
  final_modulation_ = nn::Linear<S>::create(store_, "gen.final.modulation", D, 2 * D, rng);
  final_modulation_.weight->value.setZero();
  Index out_width = D;
  if (cfg_.head_depth > 0) {
    head_in_ = nn::Linear<S>::create(store_, "gen.head.in", D, cfg_.head_dim, rng);
    for (Index l = 0; l < cfg_.head_depth; ++l)
      head_blocks_.push_back(nn::TransformerBlock<S>::create(store_, "gen.head.block" + std::to_string(l),
                                                             cfg_.head_dim, cfg_.heads, 4 * cfg_.head_dim, rng));
    out_width = cfg_.head_dim;
  }
  out_patch_ = nn::Linear<S>::create(store_, "gen.out_patch", out_width, cfg_.latent_dim, rng);
  out_patch_.weight->value.setZero();
  if (cfg_.queries > 0) {
    out_query_ = nn::Linear<S>::create(store_, "gen.out_query", out_width, cfg_.latent_dim, rng);
    out_query_.weight->value.setZero();
  }
}

template <typename S>
Var FlowTransformer<S>::conditioning(Graph<S>& g, std::span<const double> t, std::span<const int> labels) const {
  const Index batch = static_cast<Index>(t.size());
  if (static_cast<Index>(labels.size()) != batch) throw ShapeError("generator: one label per sample required");
  for (int y : labels)
    if (y < 0 || y > cfg_.class_count)
      throw DomainError("class label " + std::to_string(y) + " outside [0, " + std::to_string(cfg_.class_count) +
                        "] (the last index is the null class)");
  const Index half = fourier_.cols();
  Matrix<S> feats(batch, 2 * half);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < half; ++i) {
      const double a = 2.0 * std::numbers::pi * t[static_cast<std::size_t>(b)] * static_cast<double>(fourier_(0, i));
      feats(b, i) = S(std::sin(a));
      feats(b, half + i) = S(std::cos(a));
    }
  Var temb = time_fc2_(g, ops::silu(g, time_fc1_(g, g.constant(std::move(feats)))));
  Var yemb = ops::gather_rows(g, g.param(*class_table_), labels);
  return ops::add(g, temb, yemb);
}

template <typename S>
FlowOutput FlowTransformer<S>::forward(Graph<S>& g, Var z_patch, Var z_query, std::span<const double> t,
                                       std::span<const int> labels, Index batch) const {
  const Index N = cfg_.patch_tokens(), K = cfg_.queries, D = cfg_.dim;
  if (static_cast<Index>(t.size()) != batch) throw ShapeError("generator: one time per sample required");
  if (g.value(z_patch).rows() != batch * N || g.value(z_patch).cols() != cfg_.latent_dim)
    throw ShapeError("generator: patch latents must be (batch*" + std::to_string(N) + ") x " +
                     std::to_string(cfg_.latent_dim));
  Var x = ops::add_tiled(g, in_patch_(g, z_patch), g.constant(patch_pe_), batch);
  if (K > 0) {
    if (!z_query.valid() || g.value(z_query).rows() != batch * K || g.value(z_query).cols() != cfg_.latent_dim)
      throw ShapeError("generator: query latents must be (batch*" + std::to_string(K) + ") x " +
                       std::to_string(cfg_.latent_dim));
    Var q = ops::add_tiled(g, in_query_(g, z_query), g.param(*query_pe_), batch);
    x = ops::concat_tokens(g, x, q, batch);
  }
  Var c = ops::silu(g, conditioning(g, t, labels));
  for (const auto& blk : blocks_) {
    Var mod = blk.modulation(g, c);
    auto part = [&](Index i) { return ops::slice_channels(g, mod, i * D, D); };
    Var h = ops::modulate(g, ops::layer_norm(g, x), part(0), part(1), batch);
    x = ops::add(g, x, ops::gate(g, blk.attn.self(g, h, batch), part(2), batch));
    h = ops::modulate(g, ops::layer_norm(g, x), part(3), part(4), batch);
    x = ops::add(g, x, ops::gate(g, blk.ffn(g, h), part(5), batch));
  }
  Var fmod = final_modulation_(g, c);
  x = ops::modulate(g, ops::layer_norm(g, x), ops::slice_channels(g, fmod, 0, D), ops::slice_channels(g, fmod, D, D),
                    batch);
  if (cfg_.head_depth > 0) {
    x = head_in_(g, x);
    for (const auto& blk : head_blocks_) x = blk(g, x, batch);
  }
  FlowOutput out;
  if (K == 0) {
    out.patch = out_patch_(g, x);
    return out;
  }
  out.patch = out_patch_(g, ops::slice_tokens(g, x, batch, 0, N));
  out.query = out_query_(g, ops::slice_tokens(g, x, batch, N, K));
  return out;
}

template <typename S>
LatentPair<S> FlowTransformer<S>::velocity(const LatentPair<S>& z_t, std::span<const double> t,
                                           std::span<const int> labels) const {
  Graph<S> g;
  const Index batch = z_t.batch();
  Var zq = cfg_.queries > 0 ? g.constant(z_t.z_query.data) : Var{};
  FlowOutput out = forward(g, g.constant(z_t.z_patch.data), zq, t, labels, batch);
  LatentPair<S> v;
  v.z_patch = TokenSequence<S>(g.value(out.patch), batch, cfg_.patch_tokens());
  if (out.query.valid())
    v.z_query = TokenSequence<S>(g.value(out.query), batch, cfg_.queries);
  else
    v.z_query = TokenSequence<S>(Matrix<S>(0, cfg_.latent_dim), batch, 0);
  return v;
}

template <typename S>
void FlowTransformer<S>::randomize(double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (auto* p : store_.all()) p->value = random_normal<S>(p->value.rows(), p->value.cols(), S(stddev), rng);
}

// ---------------------------------------------------------------------------

template <typename S>
LatentPair<S> gaussian_latents(Index batch, Index patch_tokens, Index queries, Index channels, Rng& rng) {
  LatentPair<S> out;
  out.z_patch = TokenSequence<S>(random_normal<S>(batch * patch_tokens, channels, S(1), rng), batch, patch_tokens);
  out.z_query = TokenSequence<S>(random_normal<S>(batch * queries, channels, S(1), rng), batch, queries);
  return out;
}

template <typename S>
LatentPair<S> sample_from(const VelocityField<S>& model, LatentPair<S> z, std::span<const int> labels,
                          const SampleOptions& opts, const VelocityField<S>* weak) {
  const std::vector<double> grid = time_grid(opts.steps, opts.shift);
  std::vector<double> t(static_cast<std::size_t>(z.batch()));
  for (Index i = 0; i < opts.steps; ++i) {
    const double ti = grid[static_cast<std::size_t>(i)];
    std::fill(t.begin(), t.end(), ti);
    LatentPair<S> v = model.velocity(z, t, labels);
    if (weak) v = autoguide(v, weak->velocity(z, t, labels), opts.guidance_scale);
    const S dt = S(ti - grid[static_cast<std::size_t>(i + 1)]);
    z.z_patch.data -= dt * v.z_patch.data;
    z.z_query.data -= dt * v.z_query.data;
  }
  return z;
}

template <typename S>
LatentPair<S> sample(const VelocityField<S>& model, Index patch_tokens, Index queries, Index channels,
                     std::span<const int> labels, const SampleOptions& opts, std::uint64_t seed,
                     const VelocityField<S>* weak) {
  Rng rng(seed);
  LatentPair<S> noise =
      gaussian_latents<S>(static_cast<Index>(labels.size()), patch_tokens, queries, channels, rng);
  return sample_from(model, std::move(noise), labels, opts, weak);
}

// ---------------------------------------------------------------------------

template <typename S>
LatentPair<S> LatentDataset<S>::batch(std::span<const std::size_t> indices) const {
  const Index B = static_cast<Index>(indices.size());
  Matrix<S> p(B * patch_tokens, channels());
  Matrix<S> q(B * queries, channels());
  for (Index b = 0; b < B; ++b) {
    const Index i = static_cast<Index>(indices[static_cast<std::size_t>(b)]);
    if (i < 0 || i >= static_cast<Index>(size())) throw ShapeError("latent dataset: index out of range");
    p.middleRows(b * patch_tokens, patch_tokens) = patch.middleRows(i * patch_tokens, patch_tokens);
    if (queries > 0) q.middleRows(b * queries, queries) = query.middleRows(i * queries, queries);
  }
  return LatentPair<S>{TokenSequence<S>(std::move(p), B, patch_tokens), TokenSequence<S>(std::move(q), B, queries)};
}

template <typename S>
void LatentDataset<S>::append(const LatentPair<S>& latents, std::span<const int> batch_labels) {
  if (static_cast<Index>(batch_labels.size()) != latents.batch())
    throw ShapeError("latent dataset: one label per sample required");
  if (size() == 0) {
    patch_tokens = latents.z_patch.tokens;
    queries = latents.z_query.tokens;
    patch.resize(0, latents.z_patch.channels());
    query.resize(0, latents.z_patch.channels());
  }
  if (latents.z_patch.tokens != patch_tokens || latents.z_query.tokens != queries ||
      latents.z_patch.channels() != patch.cols())
    throw ShapeError("latent dataset: layout mismatch");
  Matrix<S> p(patch.rows() + latents.z_patch.data.rows(), patch.cols());
  p << patch, latents.z_patch.data;
  patch = std::move(p);
  if (queries > 0) {
    Matrix<S> q(query.rows() + latents.z_query.data.rows(), query.cols());
    q << query, latents.z_query.data;
    query = std::move(q);
  }
  labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
}

template <typename S>
GeneratorTrainer<S>::GeneratorTrainer(FlowTransformer<S>& model, const LatentDataset<S>& data, GenSchedule schedule)
    : model_(model),
      data_(data),
      schedule_(schedule),
      params_(model.parameters().trainable()),
      optimizer_(params_, AdamWOptions{schedule.lr, 0.9, 0.999, 1e-8, schedule.weight_decay}),
      ema_(params_, schedule.ema_decay),
      sampler_(data.size(), static_cast<std::size_t>(schedule.batch_size), schedule.seed) {
  if (data.size() == 0) throw ConfigError("generator trainer: empty latent dataset");
  if (data.channels() != model.config().latent_dim || data.patch_tokens != model.config().patch_tokens() ||
      data.queries != model.config().queries)
    throw ShapeError("generator trainer: latent layout does not match the generator config");
}

template <typename S>
GenRecord GeneratorTrainer<S>::step() {
  const GenConfig& cfg = model_.config();
  auto idx = sampler_.indices_for_step(static_cast<std::uint64_t>(step_));
  LatentPair<S> z = data_.batch(idx);
  const Index B = z.batch();
  Rng rng(mix_seed(schedule_.seed, static_cast<std::uint64_t>(step_)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(unit(rng) < cfg.label_drop ? cfg.null_class() : data_.labels[i]);
  if (cfg.noise_sigma > 0) {
    z.z_patch.data += random_normal<S>(z.z_patch.data.rows(), z.z_patch.data.cols(), S(cfg.noise_sigma), rng);
    z.z_query.data += random_normal<S>(z.z_query.data.rows(), z.z_query.data.cols(), S(cfg.noise_sigma), rng);
  }
  std::vector<double> t(static_cast<std::size_t>(B));
  for (auto& v : t) v = time_shift(unit(rng), cfg.shift);
  LatentPair<S> eps = gaussian_latents<S>(B, data_.patch_tokens, data_.queries, data_.channels(), rng);
  LatentPair<S> zt = interpolate(z, eps, t);
  LatentPair<S> target = velocity_target(z, eps);

  Graph<S> g;
  Var zq = cfg.queries > 0 ? g.constant(zt.z_query.data) : Var{};
  FlowOutput out = model_.forward(g, g.constant(zt.z_patch.data), zq, t, labels, B);
  FmLossVars loss = fm_loss(g, out.patch, out.query, target, cfg.lambda_query);

  GenRecord rec;
  rec.step = step_ + 1;
  rec.loss = static_cast<double>(g.value(loss.total)(0, 0));
  rec.patch = static_cast<double>(g.value(loss.patch)(0, 0));
  if (loss.query.valid()) rec.query = static_cast<double>(g.value(loss.query)(0, 0));
  if (!std::isfinite(rec.loss)) {
    std::ostringstream msg;
    msg << "non-finite generator loss at step " << rec.step << " (lr " << optimizer_.options().lr << ", patch "
        << rec.patch << ", query " << rec.query << ")";
    throw NumericError(msg.str());
  }
  optimizer_.zero_grad();
  g.backward(loss.total);
  rec.grad_norm = clip_grad_norm(params_, schedule_.clip);
  optimizer_.step();
  ema_.update();
  ++step_;
  return rec;
}

template <typename S>
std::vector<GenRecord> GeneratorTrainer<S>::run(const std::function<void(const GenRecord&)>& on_record,
                                                std::int64_t stop_at) {
  const std::int64_t limit = stop_at >= 0 ? std::min(stop_at, schedule_.steps) : schedule_.steps;
  std::vector<GenRecord> out;
  while (step_ < limit) {
    out.push_back(step());
    if (on_record) on_record(out.back());
  }
  return out;
}

#define DECQ_INSTANTIATE(S)                                                                                   \
  template LatentPair<S> interpolate<S>(const LatentPair<S>&, const LatentPair<S>&, double);                  \
  template LatentPair<S> interpolate<S>(const LatentPair<S>&, const LatentPair<S>&, std::span<const double>); \
  template LatentPair<S> velocity_target<S>(const LatentPair<S>&, const LatentPair<S>&);                      \
  template FmLossValue fm_loss<S>(const LatentPair<S>&, const LatentPair<S>&, const LatentPair<S>&, double);  \
  template FmLossVars fm_loss<S>(Graph<S>&, Var, Var, const LatentPair<S>&, double);                           \
  template LatentPair<S> autoguide<S>(const LatentPair<S>&, const LatentPair<S>&, double);                    \
  template class PointTargetField<S>;                                                                         \
  template class FlowTransformer<S>;                                                                          \
  template LatentPair<S> gaussian_latents<S>(Index, Index, Index, Index, Rng&);                               \
  template LatentPair<S> sample_from<S>(const VelocityField<S>&, LatentPair<S>, std::span<const int>,         \
                                        const SampleOptions&, const VelocityField<S>*);                       \
  template LatentPair<S> sample<S>(const VelocityField<S>&, Index, Index, Index, std::span<const int>,        \
                                   const SampleOptions&, std::uint64_t, const VelocityField<S>*);             \
  template struct LatentDataset<S>;                                                                           \
  template class GeneratorTrainer<S>;

DECQ_INSTANTIATE(float)
DECQ_INSTANTIATE(double)

}  // namespace decq
