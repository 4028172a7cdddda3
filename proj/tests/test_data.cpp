#include "decq/checkpoint.hpp"
#include "decq/data.hpp"
#include "decq/experiment.hpp"
#include "decq/image_io.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace decq;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("decq-test-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig micro() {
  ExperimentConfig c = ExperimentConfig::preset_named("micro");
  c.pretrain.steps = 4;
  c.perceptual.steps = 4;
  c.schedule.steps = 6;
  c.schedule.eval_every = 3;
  c.gen_schedule.steps = 4;
  return c;
}

}  // namespace

TEST_CASE("synthetic corpus is a pure function of its spec") {
  SyntheticSpec s{4, 3, 20, 16, 7};
  const Dataset a = make_synthetic(s), b = make_synthetic(s);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i] == b.images[i]);
    CHECK(a.labels[i] == b.labels[i]);
    CHECK(a.labels[i] >= 0);
    CHECK(a.labels[i] < 4);
    CHECK(a.colors[i] < 3);
    CHECK(a.images[i].maxCoeff() <= 1.0f);
    CHECK(a.images[i].minCoeff() >= -1.0f);
  }
  s.seed = 8;
  CHECK(make_synthetic(s).images[0] != a.images[0]);
  CHECK_THROWS_AS((SyntheticSpec{SyntheticSpec::shape_count() + 1, 3, 10, 16, 0}.validate()), ConfigError);
}

TEST_CASE("name-hash split is disjoint, complete and stable") {
  const Dataset d = make_synthetic(SyntheticSpec{4, 3, 200, 8, 1});
  const Split s = split_by_name(d);
  CHECK(s.train.size() + s.val.size() == d.size());
  CHECK(s.val.size() > 5);
  CHECK(s.val.size() < 40);
  std::set<std::string> train(s.train.names.begin(), s.train.names.end());
  for (const auto& n : s.val.names) CHECK(train.count(n) == 0);
  CHECK(split_by_name(d).val.names == s.val.names);
}

TEST_CASE("batch sampler: full epochs, pure in (seed, step)") {
  BatchSampler a(10, 4, 3), b(10, 4, 3);
  std::multiset<std::size_t> seen;
  for (std::uint64_t step = 0; step < 5; ++step) {
    const auto idx = a.indices_for_step(step);
    CHECK(idx == b.indices_for_step(step));
    seen.insert(idx.begin(), idx.end());
  }
  for (std::size_t i = 0; i < 10; ++i) CHECK(seen.count(i) == 2);
  const auto perm = shuffled_indices(50, 4);
  CHECK(std::set<std::size_t>(perm.begin(), perm.end()).size() == 50);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

TEST_CASE("PNG round trip is exact at 8-bit levels and folders ingest with unreadable files skipped") {
  const fs::path root = fresh_dir("ingest");
  Matrix<float> img = render_shape(1, 2, 8, 3);
  img = ((img.array() + 1.0f) * 127.5f).round() / 127.5f - 1.0f;  // snap to 8-bit levels
  fs::create_directories(root / "cats");
  fs::create_directories(root / "dogs");
  ImageBatch<float> batch(1, 8, 8, 3);
  batch.data = img;
  write_image(root / "cats" / "a.png", batch);
  write_image(root / "dogs" / "b.png", batch);
  std::ofstream(root / "dogs" / "broken.png") << "not an image";

  const auto back = read_image(root / "cats" / "a.png", 8);
  REQUIRE(back.has_value());
  CHECK((*back - img).cwiseAbs().maxCoeff() < 1e-5f);
  CHECK_FALSE(read_image(root / "dogs" / "broken.png", 8).has_value());

  const Dataset d = ingest_folder(root, 8);
  CHECK(d.size() == 2);
  CHECK(d.class_count() == 2);
  CHECK(d.labels == std::vector<int>{0, 1});
  CHECK_THROWS_AS(ingest_folder(root / "missing", 8), ConfigError);
  fs::remove_all(root);
}

TEST_CASE("archives round trip and reject damaged files") {
  const fs::path root = fresh_dir("archive");
  Archive a;
  a.kind = "test";
  a.meta = R"({"x":1})";
  a.put("w", Eigen::MatrixXd::Random(3, 4));
  a.put("b", Eigen::MatrixXd::Zero(1, 2));
  write_archive(root / "a.arc", a);
  const Archive b = read_archive(root / "a.arc");
  CHECK(b.kind == "test");
  CHECK(b.meta == a.meta);
  CHECK(b.get("w") == a.get("w"));
  CHECK(b.contains("b"));
  try {
    b.get("missing");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }

  const auto size = fs::file_size(root / "a.arc");
  fs::copy_file(root / "a.arc", root / "short.arc");
  fs::resize_file(root / "short.arc", size - 9);
  CHECK_THROWS_AS(read_archive(root / "short.arc"), ConfigError);
  std::ofstream(root / "bad.arc") << "garbage that is long enough to hold a header";
  CHECK_THROWS_AS(read_archive(root / "bad.arc"), ConfigError);
  CHECK_THROWS_AS(read_archive(root / "nope.arc"), ConfigError);

  ParameterStore<double> store, other;
  store.add("p", Matrix<double>::Random(2, 2));
  other.add("p", Matrix<double>::Zero(2, 2));
  Archive c;
  put_parameters(c, store, "m.");
  get_parameters(c, other, "m.");
  CHECK(other.at("p").value == store.at("p").value);
  ParameterStore<double> wrong;
  wrong.add("p", Matrix<double>::Zero(3, 2));
  CHECK_THROWS_AS(get_parameters(c, wrong, "m."), ShapeError);
  fs::remove_all(root);
}

TEST_CASE("config JSON: round trip, preset merge, hash, bad input") {
  ExperimentConfig c = micro();
  c.seed = 42;
  const ExperimentConfig back = config_from_json_string(to_json_string(c));
  CHECK(to_json_string(back) == to_json_string(c));
  CHECK(config_hash(back) == config_hash(c));

  const ExperimentConfig merged = config_from_json_string(R"({"preset": "micro", "schedule": {"steps": 77}})");
  CHECK(merged.schedule.steps == 77);
  CHECK(merged.schedule.batch_size == ExperimentConfig::preset_named("micro").schedule.batch_size);
  CHECK(config_hash(merged) != config_hash(ExperimentConfig::preset_named("micro")));

  CHECK_THROWS_AS(config_from_json_string("{not json"), ConfigError);
  CHECK_THROWS_AS(config_from_json_string(R"({"preset": "huge"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json_string(R"({"preset": "micro", "schedule": {"steps": "many"}})"), ConfigError);
}

TEST_CASE("relative dataset folders resolve against the data root variable") {
  const fs::path root = fresh_dir("dataroot");
  fs::create_directories(root / "set" / "only");
  ImageBatch<float> batch(1, 8, 8, 3);
  batch.data = render_shape(0, 0, 8, 1);
  write_image(root / "set" / "only" / "x.png", batch);
  ::setenv(kDataRootEnv, root.c_str(), 1);
  DataSpec spec;
  spec.folder = "set";
  CHECK(load_dataset(spec, 8).size() == 1);
  ::unsetenv(kDataRootEnv);
  fs::remove_all(root);
}

TEST_CASE("run directory lock refuses a second holder") {
  const fs::path root = fresh_dir("lock");
  {
    RunDir a(root);
    CHECK(fs::exists(root / "checkpoints"));
    CHECK_THROWS_AS(RunDir{root}, ConfigError);
  }
  CHECK_NOTHROW(RunDir{root});
  fs::remove_all(root);
}

TEST_CASE("experiment: interrupted tokenizer training resumes to the same weights") {
  const fs::path a = fresh_dir("resume-a"), b = fresh_dir("resume-b");
  VariantSpec v;
  v.mode = Paradigm::decq;
  {
    Experiment straight(micro(), a, true);
    straight.train_tokenizer(v, "decq");
  }
  {
    Experiment first(micro(), b, true);
    const TokenizerRun part = first.train_tokenizer(v, "decq", 3);
    CHECK(part.steps == 3);
  }
  {
    Experiment second(micro(), b, true);
    const TokenizerRun rest = second.train_tokenizer(v, "decq");
    CHECK(rest.steps == 6);
  }
  const Archive x = read_archive(a / "checkpoints" / "tokenizer-decq.arc");
  const Archive y = read_archive(b / "checkpoints" / "tokenizer-decq.arc");
  REQUIRE(x.arrays.size() == y.arrays.size());
  for (std::size_t i = 0; i < x.arrays.size(); ++i) {
    CAPTURE(x.arrays[i].first);
    CHECK(x.arrays[i].second == y.arrays[i].second);
  }

  Experiment e(micro(), a, true);
  try {
    e.load_generator("decq");
    FAIL("expected ConfigError");
  } catch (const ConfigError& err) {
    CHECK(std::string(err.what()).find("train-generator --variant decq") != std::string::npos);
  }
  try {
    e.load_tokenizer("finetune");
    FAIL("expected ConfigError");
  } catch (const ConfigError& err) {
    CHECK(std::string(err.what()).find("train-tokenizer --variant finetune") != std::string::npos);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}
