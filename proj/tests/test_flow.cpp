#include "check.hpp"
#include "decq/flow.hpp"

#include <doctest.h>

using namespace decq;
using test::gradient_error;
using test::normal_matrix;

namespace {

LatentPair<double> pair(Index batch, Index n, Index k, Index c, std::uint64_t seed) {
  LatentPair<double> z;
  z.z_patch = TokenSequence<double>(normal_matrix<double>(batch * n, c, seed), batch, n);
  z.z_query = TokenSequence<double>(normal_matrix<double>(batch * k, c, seed + 1), batch, k);
  return z;
}

double distance(const LatentPair<double>& a, const LatentPair<double>& b) {
  return std::sqrt((a.z_patch.data - b.z_patch.data).squaredNorm() + (a.z_query.data - b.z_query.data).squaredNorm());
}

GenConfig micro_gen() {
  GenConfig c;
  c.depth = 1;
  c.dim = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.latent_dim = 4;
  c.grid = 2;
  c.queries = 2;
  c.fourier_dim = 4;
  c.class_count = 3;
  return c;
}

}  // namespace

TEST_CASE("interpolation endpoints are exact and interior points are affine") {
  const auto z = pair(2, 3, 2, 4, 1), eps = pair(2, 3, 2, 4, 3);
  CHECK(interpolate(z, eps, 0.0).z_patch.data == z.z_patch.data);
  CHECK(interpolate(z, eps, 1.0).z_query.data == eps.z_query.data);
  const auto mid = interpolate(z, eps, 0.25);
  CHECK(mid.z_patch.data.isApprox(0.75 * z.z_patch.data + 0.25 * eps.z_patch.data));
  const double ts[] = {0.0, 1.0};
  const auto per = interpolate<double>(z, eps, ts);
  CHECK(per.z_patch.sample(0) == z.z_patch.sample(0));
  CHECK(per.z_query.sample(1) == eps.z_query.sample(1));
  CHECK_THROWS_AS(interpolate(z, eps, 1.5), DomainError);
  CHECK_THROWS_AS(interpolate(z, eps, -0.1), DomainError);
}

TEST_CASE("flow-matching loss: zero for the exact target, hand value otherwise") {
  const auto z = pair(2, 3, 2, 4, 5), eps = pair(2, 3, 2, 4, 7);
  const auto target = velocity_target(z, eps);
  CHECK(target.z_patch.data == eps.z_patch.data - z.z_patch.data);
  const FmLossValue perfect = fm_loss(target, z, eps, 1.0);
  CHECK(perfect.total == 0.0);

  LatentPair<double> off = target;
  off.z_patch.data.array() += 1.0;  // patch MSE exactly 1
  off.z_query.data.array() += 2.0;  // query MSE exactly 4
  const FmLossValue v = fm_loss(off, z, eps, 0.5);
  CHECK(v.patch == doctest::Approx(1.0));
  CHECK(v.query == doctest::Approx(4.0));
  CHECK(v.total == doctest::Approx(3.0));

  Graph<double> g;
  FmLossVars vars = fm_loss(g, g.constant(off.z_patch.data), g.constant(off.z_query.data), target, 0.5);
  CHECK(g.value(vars.total)(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("time shift: endpoints fixed, monotone, identity at alpha 1") {
  for (double a : {1.0, 2.0, 3.0, 6.5}) {
    CHECK(time_shift(0.0, a) == 0.0);
    CHECK(time_shift(1.0, a) == 1.0);
    double prev = -1;
    for (int i = 0; i <= 100; ++i) {
      const double s = time_shift(i / 100.0, a);
      CHECK(s > prev);
      CHECK(s >= i / 100.0 - 1e-15);  // shifting moves mass towards noise
      prev = s;
    }
  }
  CHECK(time_shift(0.3, 1.0) == doctest::Approx(0.3));
  CHECK(time_shift(0.5, 3.0) == doctest::Approx(0.75));
  CHECK_THROWS_AS(time_shift(0.5, 0.5), DomainError);
  const auto grid = time_grid(4, 2.0);
  REQUIRE(grid.size() == 5);
  CHECK(grid.front() == 1.0);
  CHECK(grid.back() == 0.0);
  CHECK(grid[2] == doctest::Approx(time_shift(0.5, 2.0)));
}

TEST_CASE("autoguidance affine identities") {
  const auto strong = pair(1, 2, 1, 3, 9), weak = pair(1, 2, 1, 3, 11);
  CHECK(autoguide(strong, weak, 1.0).z_patch.data.isApprox(strong.z_patch.data, 1e-14));
  CHECK(autoguide(strong, weak, 0.0).z_query.data == weak.z_query.data);
  CHECK(autoguide(strong, strong, 3.7).z_patch.data.isApprox(strong.z_patch.data));
  const auto g2 = autoguide(strong, weak, 2.0);
  CHECK(g2.z_patch.data.isApprox(2.0 * strong.z_patch.data - weak.z_patch.data));
  CHECK_THROWS_AS(autoguide(strong, weak, -1.0), DomainError);
}

TEST_CASE("one Euler step with a constant field has the closed form z1 - v") {
  const auto noise = pair(2, 3, 2, 4, 13), v = pair(2, 3, 2, 4, 15);
  ConstantField<double> field(v);
  const int labels[] = {0, 1};
  for (Index steps : {1, 7}) {
    const auto out = sample_from<double>(field, noise, labels, SampleOptions{steps, 2.0, 1.0});
    CHECK(out.z_patch.data.isApprox(noise.z_patch.data - v.z_patch.data, 1e-12));
    CHECK(out.z_query.data.isApprox(noise.z_query.data - v.z_query.data, 1e-12));
  }
}

TEST_CASE("sampling the exact single-target field converges to the target") {
  const auto target = pair(1, 4, 2, 3, 17);
  PointTargetField<double> field(target);
  const int label[] = {0};
  const auto out = sample<double>(field, 4, 2, 3, label, SampleOptions{50, 1.0, 1.0}, 99);
  CHECK(distance(out, target) < 1e-2);
}

TEST_CASE("adaLN-zero generator predicts zero velocity at initialization") {
  FlowTransformer<double> gen(micro_gen(), 1);
  const auto z = pair(2, 4, 2, 4, 19);
  const double t[] = {0.3, 0.9};
  const int labels[] = {0, 3};
  const auto v = gen.velocity(z, t, labels);
  CHECK(v.z_patch.data.isZero());
  CHECK(v.z_query.data.isZero());
}

TEST_CASE("generator conditions on time and class and validates labels") {
  FlowTransformer<double> gen(micro_gen(), 2);
  gen.randomize(0.2, 3);
  const auto z = pair(1, 4, 2, 4, 21);
  const double t1[] = {0.2}, t2[] = {0.8};
  const int c0[] = {0}, c1[] = {1}, null_class[] = {3}, bad[] = {4};
  const auto a = gen.velocity(z, t1, c0);
  CHECK(distance(a, gen.velocity(z, t2, c0)) > 1e-6);
  CHECK(distance(a, gen.velocity(z, t1, c1)) > 1e-6);
  CHECK_NOTHROW(gen.velocity(z, t1, null_class));
  CHECK_THROWS_AS(gen.velocity(z, t1, bad), DomainError);
}

TEST_CASE("joint flow-matching loss gradient matches central differences") {
  FlowTransformer<double> gen(micro_gen(), 4);
  gen.randomize(0.3, 5);
  const auto z = pair(2, 4, 2, 4, 23), eps = pair(2, 4, 2, 4, 25);
  const double t[] = {0.35, 0.7};
  const int labels[] = {1, 3};
  const auto zt = interpolate<double>(z, eps, t);
  const auto target = velocity_target(z, eps);
  auto loss = [&](Graph<double>& g) {
    FlowOutput out = gen.forward(g, g.constant(zt.z_patch.data), g.constant(zt.z_query.data), t, labels, 2);
    return fm_loss(g, out.patch, out.query, target, 0.7).total;
  };
  CHECK(gradient_error(loss, gen.parameters().trainable()) < 1e-4);
}

TEST_CASE("generator training lowers the loss and resumes deterministically") {
  const GenConfig cfg = micro_gen();
  LatentDataset<double> data;
  for (int i = 0; i < 12; ++i) {
    LatentPair<double> z = pair(1, 4, 2, 4, 100 + static_cast<std::uint64_t>(i));
    z.z_patch.data.array() += (i % 2 == 0 ? 1.0 : -1.0);
    const int label[] = {i % 2};
    data.append(z, label);
  }
  CHECK(data.size() == 12);
  CHECK(data.patch_tokens == 4);
  CHECK(data.queries == 2);
  GenSchedule s;
  s.steps = 6;
  s.batch_size = 4;
  s.lr = 5e-3;
  s.seed = 3;

  FlowTransformer<double> a(cfg, 7);
  GeneratorTrainer<double> ta(a, data, s);
  auto rec = ta.run();
  CHECK(rec.size() == 6);

  FlowTransformer<double> b(cfg, 7);
  GeneratorTrainer<double> tb(b, data, s);
  tb.run({}, 3);
  FlowTransformer<double> c(cfg, 7);
  GeneratorTrainer<double> tc(c, data, s);
  c.parameters().copy_values_from(b.parameters());
  tc.optimizer().first_moments() = tb.optimizer().first_moments();
  tc.optimizer().second_moments() = tb.optimizer().second_moments();
  tc.ema().shadow() = tb.ema().shadow();
  tc.set_step(3);
  tc.run();
  CHECK(c.parameters().fingerprint() == a.parameters().fingerprint());

  FlowTransformer<double> long_run(cfg, 8);
  s.steps = 150;
  GeneratorTrainer<double> tl(long_run, data, s);
  auto records = tl.run();
  double first = 0, last = 0;
  for (int i = 0; i < 15; ++i) {
    first += records[static_cast<std::size_t>(i)].loss;
    last += records[records.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < first);
}

TEST_CASE("generator config validation") {
  GenConfig c = micro_gen();
  c.shift = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = micro_gen();
  c.label_drop = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(micro_gen().null_class() == 3);
  CHECK(micro_gen().patch_tokens() == 4);
}
