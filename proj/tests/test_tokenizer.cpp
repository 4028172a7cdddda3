#include "check.hpp"
#include "decq/metrics.hpp"
#include "decq/tokenizer.hpp"

#include <doctest.h>

using namespace decq;
using test::normal_matrix;
using test::random_images;

namespace {

TokenizerConfig micro_config(Paradigm mode) {
  TokenizerConfig c;
  c.backbone = BackboneConfig{3, 8, 2, 16, 4, 16, 3};
  c.condenser = CondenserConfig{2, {0, 1}, 8, 2, 16};
  c.decoder.depth = 1;
  c.decoder.dim = 8;
  c.decoder.heads = 2;
  c.decoder.ffn_dim = 16;
  c.variant.mode = mode;
  c.variant.bottleneck_dim = 4;
  c.perceptual_weight = 0.0;
  c.resolve();
  return c;
}

Dataset micro_data(Index n = 24) {
  SyntheticSpec s{4, 3, n, 16, 5};
  return make_synthetic(s);
}

Schedule micro_schedule(std::int64_t steps) {
  Schedule s;
  s.steps = steps;
  s.batch_size = 4;
  s.lr = 1e-2;
  s.seed = 9;
  s.eval_every = 1000;
  s.eval_samples = 4;
  s.ema_decay = 0.9;
  return s;
}

}  // namespace

TEST_CASE("variant names round trip") {
  for (Paradigm p : {Paradigm::freeze, Paradigm::finetune, Paradigm::distill, Paradigm::feat_concat, Paradigm::decq})
    CHECK(parse_paradigm(to_string(p)) == p);
  CHECK(parse_paradigm("feat-concat") == Paradigm::feat_concat);
  CHECK_THROWS_AS(parse_paradigm("vae"), ConfigError);
}

TEST_CASE("resolve derives decoder layout from the variant") {
  const auto decq_cfg = micro_config(Paradigm::decq);
  CHECK(decq_cfg.decoder.queries == 2);
  CHECK(decq_cfg.decoder.latent_dim == 8);
  CHECK(decq_cfg.decoder.query_dim == 8);
  CHECK(decq_cfg.decoder.image_size == 16);
  const auto freeze_cfg = micro_config(Paradigm::freeze);
  CHECK(freeze_cfg.decoder.queries == 0);
  const auto concat_cfg = micro_config(Paradigm::feat_concat);
  CHECK(concat_cfg.decoder.latent_dim == 8 + 4);
  CHECK(concat_cfg.decoder.queries == 0);

  TokenizerConfig bad = micro_config(Paradigm::distill);
  bad.variant.distill_weight = -1;
  CHECK_THROWS_AS(bad.resolve(), ConfigError);
  TokenizerConfig bad_tap = micro_config(Paradigm::decq);
  bad_tap.condenser.tap_layers = {0, 5};
  CHECK_THROWS_AS(bad_tap.resolve(), ConfigError);
}

TEST_CASE("L1 term of the reconstruction loss matches a hand-computed mean") {
  ImageBatch<double> target = random_images<double>(2, 16, 1);
  Matrix<double> pred = target.data;
  pred.array() += 0.25;
  pred(0, 0) -= 1.0;  // |0.25 - 1| = 0.75 at one entry
  const double n = static_cast<double>(pred.size());
  const double expected = ((n - 1) * 0.25 + 0.75) / n;
  Graph<double> g;
  ReconLoss rl = recon_loss<double>(g, g.constant(pred), target, 0.0, nullptr);
  CHECK(g.value(rl.l1)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_FALSE(rl.perceptual.valid());
}

TEST_CASE("perceptual term vanishes on a perfect reconstruction and is weighted into the total") {
  PerceptualNet<double> net(16, 4, 3);
  ImageBatch<double> target = random_images<double>(2, 16, 2);
  Graph<double> g;
  ReconLoss same = recon_loss<double>(g, g.constant(target.data), target, 0.5, &net);
  CHECK(g.value(same.total)(0, 0) == doctest::Approx(0.0));
  Matrix<double> pred = normal_matrix<double>(target.data.rows(), 3, 4, 0.5);
  ReconLoss rl = recon_loss<double>(g, g.constant(pred), target, 0.5, &net);
  const double l1 = g.value(rl.l1)(0, 0), perc = g.value(rl.perceptual)(0, 0);
  CHECK(perc > 0);
  CHECK(g.value(rl.total)(0, 0) == doctest::Approx(l1 + 0.5 * perc));
  CHECK_THROWS_AS(recon_loss<double>(g, g.constant(Matrix<double>::Zero(3, 3)), target, 0.0, nullptr), ShapeError);
}

TEST_CASE("training moves exactly the parameters the variant allows") {
  const Dataset data = micro_data();
  for (Paradigm mode : {Paradigm::freeze, Paradigm::decq, Paradigm::feat_concat, Paradigm::finetune, Paradigm::distill}) {
    CAPTURE(to_string(mode));
    Tokenizer<double> tok(micro_config(mode), 1);
    const auto before = tok.backbone_fingerprint();
    const auto decoder_before = tok.decoder().parameters().fingerprint();
    const auto teacher_before = tok.teacher() ? tok.teacher()->parameters().fingerprint() : 0;
    TokenizerTrainer<double> tr(tok, data, data, micro_schedule(3), nullptr);
    tr.run();
    CHECK(tr.current_step() == 3);
    CHECK(tok.decoder().parameters().fingerprint() != decoder_before);
    const bool backbone_moves = mode == Paradigm::finetune || mode == Paradigm::distill;
    CHECK((tok.backbone_fingerprint() != before) == backbone_moves);
    if (tok.teacher()) CHECK(tok.teacher()->parameters().fingerprint() == teacher_before);
  }
}

TEST_CASE("feature concatenation keeps the frozen-token slice independent of the branch") {
  Tokenizer<double> tok(micro_config(Paradigm::feat_concat), 2);
  const auto img = random_images<double>(2, 16, 3);
  const LatentPair<double> a = tok.latents(img);
  CHECK(a.z_patch.channels() == 12);
  for (auto* p : tok.branch()->parameters().all()) p->value.setRandom();
  const LatentPair<double> b = tok.latents(img);
  CHECK(a.z_patch.data.leftCols(8) == b.z_patch.data.leftCols(8));
  CHECK(a.z_patch.data.rightCols(4) != b.z_patch.data.rightCols(4));
}

TEST_CASE("resuming from saved optimizer state reproduces an uninterrupted run") {
  const Dataset data = micro_data();
  const auto cfg = micro_config(Paradigm::decq);

  Tokenizer<double> straight(cfg, 3);
  TokenizerTrainer<double> t1(straight, data, data, micro_schedule(4), nullptr);
  t1.run();

  Tokenizer<double> first(cfg, 3);
  TokenizerTrainer<double> t2(first, data, data, micro_schedule(4), nullptr);
  t2.run({}, 2);
  CHECK(t2.current_step() == 2);

  Tokenizer<double> resumed(cfg, 3);
  TokenizerTrainer<double> t3(resumed, data, data, micro_schedule(4), nullptr);
  auto src = first.stores();
  auto dst = resumed.stores();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->copy_values_from(*src[i]);
  t3.optimizer().first_moments() = t2.optimizer().first_moments();
  t3.optimizer().second_moments() = t2.optimizer().second_moments();
  t3.ema().shadow() = t2.ema().shadow();
  t3.set_step(t2.current_step());
  t3.run();

  auto a = straight.stores();
  auto b = resumed.stores();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->fingerprint() == b[i]->fingerprint());
}

TEST_CASE("non-finite loss raises a NumericError naming the step") {
  const Dataset data = micro_data();
  Tokenizer<double> tok(micro_config(Paradigm::freeze), 4);
  tok.decoder().parameters().at("decoder.head.bias").value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TokenizerTrainer<double> tr(tok, data, data, micro_schedule(2), nullptr);
  try {
    tr.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("training lowers the reconstruction loss") {
  const Dataset data = micro_data(32);
  Tokenizer<double> tok(micro_config(Paradigm::decq), 5);
  Schedule s = micro_schedule(60);
  s.lr = 3e-3;
  TokenizerTrainer<double> tr(tok, data, data, s, nullptr);
  auto records = tr.run();
  double first = 0, last = 0;
  for (int i = 0; i < 6; ++i) {
    first += records[static_cast<std::size_t>(i)].loss;
    last += records[records.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < first);
}

TEST_CASE("held-out PSNR is computed from the aggregate squared error") {
  const Dataset data = micro_data(10);
  Tokenizer<double> tok(micro_config(Paradigm::freeze), 6);
  const ReconMetrics m = evaluate_reconstruction(tok, data, 7, 3);
  double sq = 0, count = 0;
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6};
  ImageBatch<double> x = data.batch<double>(idx);
  ImageBatch<double> y = tok.reconstruct(x);
  sq = (y.data - x.data).squaredNorm();
  count = static_cast<double>(x.data.size());
  CHECK(m.psnr == doctest::Approx(10 * std::log10(4.0 / (sq / count))).epsilon(1e-9));
  CHECK(m.ssim < 1.0);
}

TEST_CASE("backbone proxy pretraining leaves a frozen backbone frozen") {
  const Dataset data = micro_data(16);
  Backbone<double> bb(micro_config(Paradigm::freeze).backbone, 7);
  bb.freeze();
  const auto before = bb.parameters().fingerprint();
  const double acc = pretrain_backbone(bb, data, 3, 4, 1e-3, 1);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(bb.frozen());
  CHECK(bb.parameters().fingerprint() != before);
}
