#include "decq/experiment.hpp"

#include "decq/image_io.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using nlohmann::json;

namespace decq {

NLOHMANN_JSON_SERIALIZE_ENUM(Paradigm, {{Paradigm::freeze, "freeze"},
                                        {Paradigm::finetune, "finetune"},
                                        {Paradigm::distill, "distill"},
                                        {Paradigm::feat_concat, "feat_concat"},
                                        {Paradigm::decq, "decq"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneConfig, depth, dim, heads, ffn_dim, patch_size, image_size,
                                                channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CondenserConfig, queries, tap_layers, dim, heads, ffn_dim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecoderConfig, depth, dim, heads, ffn_dim, patch_size, image_size,
                                                channels, latent_dim, query_dim, queries)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VariantSpec, mode, distill_weight, bottleneck_dim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerConfig, backbone, condenser, decoder, variant, noise_sigma,
                                                perceptual_weight)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Schedule, steps, batch_size, lr, weight_decay, ema_decay, clip, seed,
                                                eval_every, eval_samples, eval_ema)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenConfig, depth, dim, heads, ffn_dim, latent_dim, grid, queries,
                                                fourier_dim, fourier_scale, head_depth, head_dim, class_count,
                                                lambda_query, steps, shift, guidance_scale, label_drop, noise_sigma)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenSchedule, steps, batch_size, lr, weight_decay, ema_decay, clip,
                                                seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, classes, colors, samples, image_size, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSpec, folder, synthetic)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainSpec, steps, batch_size, lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PerceptualSpec, steps, batch_size, lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSpec, recon_samples, gen_samples, cluster_anchors, cluster_k)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, preset, seed, data, pretrain, perceptual, tokenizer,
                                                schedule, generator, gen_schedule, eval)

namespace overhead {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderArch, depth, tokens, dim, ffn_dim, patch_size, channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CondenserArch, modules, queries, dim, ffn_dim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecoderArch, depth, tokens, dim, ffn_dim, latent_dim, patch_size,
                                                channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HeadArch, depth, dim, ffn_dim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorArch, depth, tokens, dim, ffn_dim, latent_dim, head)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ArchConfig, encoder, condenser, decoder, generator, steps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TokenizerReport, encoder_macs, condenser_macs, decoder_macs, total_macs,
                                   baseline_encoder_macs, baseline_decoder_macs, baseline_total_macs, patch_embed_macs,
                                   pixel_head_macs, baseline_params, condenser_params_total, extra_params,
                                   flops_overhead, params_overhead)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GenerationReport, per_step_macs, baseline_per_step_macs, step_delta, decoder_delta,
                                   total_macs, baseline_total_macs, total_delta, delta_fraction, param_delta)
}  // namespace overhead

namespace {

std::string strf(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json to_json_value(const metrics::DistributionReport& r) {
  return json{{"fid_proxy", finite_or_null(r.fid)}, {"precision_proxy", r.precision}, {"recall_proxy", r.recall},
              {"real_count", r.real_count},         {"fake_count", r.fake_count},   {"regularized", r.regularized}};
}

json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(where + ": invalid JSON (" + e.what() + ")");
  }
}

template <typename T>
T from_json_checked(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return idx;
}

/// Keeps only records with step <= `step` in a JSONL log.
void truncate_log(const std::filesystem::path& path, std::int64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.value("step", std::int64_t{0}) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

std::vector<double> log_losses(const std::filesystem::path& path) {
  std::vector<double> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    json j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.contains("loss")) out.push_back(j["loss"].get<double>());
  }
  return out;
}

std::pair<double, double> decile_means(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const std::size_t n = std::max<std::size_t>(1, v.size() / 10);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    a += v[i];
    b += v[v.size() - n + i];
  }
  return {a / static_cast<double>(n), b / static_cast<double>(n)};
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  out << line << '\n';
}

Archive tokenizer_archive(Tokenizer<float>& tok, TokenizerTrainer<float>* trainer, std::int64_t step,
                          std::uint64_t initial_fingerprint) {
  Archive a;
  a.kind = "tokenizer";
  a.meta = json{{"config", tok.config()},
                {"step", step},
                {"backbone_initial", std::to_string(initial_fingerprint)}}
               .dump();
  for (auto* store : tok.stores()) put_parameters(a, *store, "p.");
  if (trainer) {
    auto params = tok.trainable_parameters();
    put_state(a, "ema.", params, trainer->ema().shadow());
    put_state(a, "opt.m.", params, trainer->optimizer().first_moments());
    put_state(a, "opt.v.", params, trainer->optimizer().second_moments());
  }
  return a;
}

Archive generator_archive(FlowTransformer<float>& gen, GeneratorTrainer<float>* trainer, std::int64_t step,
                          const std::string& tokenizer_tag) {
  Archive a;
  a.kind = "generator";
  a.meta = json{{"config", gen.config()}, {"step", step}, {"tokenizer", tokenizer_tag}}.dump();
  put_parameters(a, gen.parameters(), "p.");
  if (trainer) {
    auto params = gen.parameters().trainable();
    put_state(a, "ema.", params, trainer->ema().shadow());
    put_state(a, "opt.m.", params, trainer->optimizer().first_moments());
    put_state(a, "opt.v.", params, trainer->optimizer().second_moments());
  }
  return a;
}

Archive read_kind(const std::filesystem::path& path, const std::string& kind) {
  Archive a = read_archive(path);
  if (a.kind != kind) throw ConfigError(path.string() + " holds a " + a.kind + " archive, expected " + kind);
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig ExperimentConfig::preset_named(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  if (name == "desk-small") {
    // Model sizes of the reference desk configuration (64 px). Slow on one
    // CPU core; "desk-tiny" is the budget variant.
    c.data.synthetic = SyntheticSpec{10, 8, 2000, 64, 0};
    c.tokenizer.backbone = BackboneConfig{12, 192, 3, 768, 8, 64, 3};
    c.tokenizer.condenser = CondenserConfig{8, {0, 3, 6, 9}, 192, 3, 768};
    c.tokenizer.decoder = DecoderConfig{8, 384, 6, 1536};
    c.schedule.steps = 4000;
    c.schedule.batch_size = 16;
    c.generator.depth = 6;
    c.generator.dim = 256;
    c.generator.heads = 4;
    c.generator.ffn_dim = 1024;
    c.gen_schedule.steps = 4000;
    return c;
  }
  if (name == "desk-tiny") {
    c.data.synthetic = SyntheticSpec{10, 8, 1200, 32, 0};
    c.pretrain = PretrainSpec{600, 32, 3.0e-4};
    c.tokenizer.backbone = BackboneConfig{12, 64, 2, 128, 4, 32, 3};
    c.tokenizer.condenser = CondenserConfig{8, {0, 3, 6, 9}, 64, 2, 128};
    c.tokenizer.decoder = DecoderConfig{3, 96, 3, 192};
    c.schedule.steps = 1500;
    c.schedule.batch_size = 16;
    c.schedule.lr = 1.0e-3;
    c.schedule.eval_every = 250;
    c.generator.depth = 3;
    c.generator.dim = 96;
    c.generator.heads = 3;
    c.generator.ffn_dim = 192;
    c.generator.fourier_dim = 32;
    c.gen_schedule.steps = 1500;
    c.gen_schedule.batch_size = 32;
    c.gen_schedule.lr = 1.0e-3;
    return c;
  }
  if (name == "micro") {
    c.data.synthetic = SyntheticSpec{4, 4, 120, 16, 0};
    c.pretrain = PretrainSpec{20, 16, 1.0e-3};
    c.perceptual = PerceptualSpec{20, 16, 1.0e-3};
    c.tokenizer.backbone = BackboneConfig{4, 16, 2, 32, 4, 16, 3};
    c.tokenizer.condenser = CondenserConfig{4, {0, 2}, 16, 2, 32};
    c.tokenizer.decoder = DecoderConfig{1, 16, 2, 32};
    c.schedule = Schedule{};
    c.schedule.steps = 20;
    c.schedule.batch_size = 8;
    c.schedule.lr = 1.0e-3;
    c.schedule.eval_samples = 12;
    c.generator.depth = 1;
    c.generator.dim = 16;
    c.generator.heads = 2;
    c.generator.ffn_dim = 32;
    c.generator.fourier_dim = 8;
    c.generator.steps = 8;
    c.gen_schedule.steps = 20;
    c.gen_schedule.batch_size = 8;
    c.gen_schedule.lr = 1.0e-3;
    c.eval = EvalSpec{12, 12, 40, 3};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected desk-small, desk-tiny or micro)");
}

void ExperimentConfig::resolve() {
  schedule.seed = mix_seed(seed, 10);
  gen_schedule.seed = mix_seed(seed, 20);
  data.synthetic.image_size = tokenizer.backbone.image_size;
  if (data.folder.empty()) data.synthetic.validate();
  tokenizer.resolve();
  generator.latent_dim = tokenizer.decoder.latent_dim;
  generator.grid = tokenizer.backbone.grid();
  generator.queries = tokenizer.decoder.queries;
  if (data.folder.empty()) generator.class_count = data.synthetic.classes;
  generator.validate();
  if (schedule.steps < 0 || schedule.batch_size <= 0) throw ConfigError("schedule: invalid steps or batch size");
  if (gen_schedule.steps < 0 || gen_schedule.batch_size <= 0)
    throw ConfigError("gen_schedule: invalid steps or batch size");
  if (pretrain.steps < 0 || perceptual.steps < 0) throw ConfigError("pretrain/perceptual steps must be >= 0");
}

std::string to_json_string(const ExperimentConfig& cfg) { return json(cfg).dump(2); }

ExperimentConfig config_from_json_string(const std::string& text) {
  json j = parse_json(text, "config");
  const std::string preset = j.value("preset", std::string("desk-small"));
  json base = ExperimentConfig::preset_named(preset);
  base.merge_patch(j);
  return from_json_checked<ExperimentConfig>(base, "config");
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_json_string(read_text_file(path));
}

std::string config_hash(const ExperimentConfig& cfg) {
  return strf("%016llx", static_cast<unsigned long long>(hash_string(json(cfg).dump())));
}

overhead::ArchConfig arch_from_experiment(const ExperimentConfig& in) {
  ExperimentConfig cfg = in;
  cfg.resolve();
  const auto& b = cfg.tokenizer.backbone;
  const auto& c = cfg.tokenizer.condenser;
  const auto& d = cfg.tokenizer.decoder;
  const auto& g = cfg.generator;
  overhead::ArchConfig a;
  a.encoder = overhead::EncoderArch{b.depth, b.tokens(), b.dim, b.ffn_dim, b.patch_size, b.channels};
  a.condenser = overhead::CondenserArch{static_cast<overhead::Count>(c.tap_layers.size()), c.queries, c.dim, c.ffn_dim};
  a.decoder = overhead::DecoderArch{d.depth, d.tokens(), d.dim, d.ffn_dim, d.latent_dim, d.patch_size, d.channels};
  a.generator = overhead::GeneratorArch{g.depth, g.patch_tokens(), g.dim, g.ffn_dim, g.latent_dim,
                                        overhead::HeadArch{g.head_depth, g.head_dim, 4 * g.head_dim}};
  a.steps = g.steps;
  return a;
}

overhead::ArchConfig load_arch_config(const std::filesystem::path& path) {
  json j = parse_json(read_text_file(path), path.string());
  if (j.contains("encoder") || j.contains("generator") || j.contains("condenser") || j.contains("decoder")) {
    json base = overhead::ArchConfig::preset(j.value("preset", std::string("vitb-xl")));
    j.erase("preset");
    base.merge_patch(j);
    return from_json_checked<overhead::ArchConfig>(base, path.string());
  }
  return arch_from_experiment(config_from_json_string(j.dump()));
}

std::string to_json_string(const overhead::TokenizerReport& r) { return json(r).dump(2); }
std::string to_json_string(const overhead::GenerationReport& r) { return json(r).dump(2); }

Dataset load_dataset(const DataSpec& spec, Index image_size) {
  if (spec.folder.empty()) {
    SyntheticSpec s = spec.synthetic;
    s.image_size = image_size;
    return make_synthetic(s);
  }
  std::filesystem::path root(spec.folder);
  if (root.is_relative()) {
    if (const char* env = std::getenv(kDataRootEnv); env && *env) root = std::filesystem::path(env) / root;
  }
  if (!std::filesystem::is_directory(root)) throw ConfigError("dataset folder not found: " + root.string());
  Dataset d = ingest_folder(root, image_size);
  if (d.size() == 0) throw ConfigError("dataset folder " + root.string() + " contains no readable images");
  return d;
}

// ---------------------------------------------------------------------------

RunDir::RunDir(std::filesystem::path root) : root_(std::move(root)) {
  for (const char* sub : {"checkpoints", "logs", "reports", "samples"})
    std::filesystem::create_directories(root_ / sub);
  const auto lock = root_ / "lock";
  lock_fd_ = ::open(lock.c_str(), O_CREAT | O_RDWR, 0644);
  if (lock_fd_ < 0) throw ConfigError("cannot create lock file " + lock.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw ConfigError("run directory " + root_.string() + " is in use by another process");
  }
}

RunDir::~RunDir() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

void RunDir::write_config(const ExperimentConfig& cfg) const {
  write_text(root_ / "config.resolved", to_json_string(cfg) + "\n");
  write_text(root_ / "config.hash", config_hash(cfg) + "\n");
}

void RunDir::write_text(const std::filesystem::path& path, const std::string& text) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------

Experiment::Experiment(ExperimentConfig cfg, std::filesystem::path out, bool quiet)
    : cfg_((cfg.resolve(), std::move(cfg))), run_(std::move(out)), quiet_(quiet) {
  run_.write_config(cfg_);
}

void Experiment::note(const std::string& line) const {
  if (!quiet_) std::cerr << line << std::endl;
}

const Split& Experiment::data() {
  if (!data_) {
    Dataset all = load_dataset(cfg_.data, cfg_.tokenizer.backbone.image_size);
    data_ = split_by_name(all);
    if (data_->train.size() == 0) throw ConfigError("dataset split left no training images");
    note(strf("data: %zu train / %zu val images, %d classes", data_->train.size(), data_->val.size(),
              data_->train.class_count()));
  }
  return *data_;
}

Backbone<float>& Experiment::backbone() {
  if (backbone_) return *backbone_;
  const auto path = run_.checkpoint("backbone");
  const auto& bcfg = cfg_.tokenizer.backbone;
  backbone_ = std::make_unique<Backbone<float>>(bcfg, mix_seed(cfg_.seed, 100));
  if (std::filesystem::exists(path)) {
    Archive a = read_kind(path, "backbone");
    json meta = parse_json(a.meta, path.string());
    if (!(meta.at("config").get<BackboneConfig>() == bcfg))
      throw ConfigError("backbone checkpoint " + path.string() + " was built with a different backbone config");
    get_parameters(a, backbone_->parameters(), "p.");
  } else {
    double acc = 0;
    if (cfg_.pretrain.steps > 0) {
      note(strf("pretraining backbone on the classification proxy (%lld steps)",
                static_cast<long long>(cfg_.pretrain.steps)));
      acc = pretrain_backbone(*backbone_, data().train, cfg_.pretrain.steps, cfg_.pretrain.batch_size,
                              cfg_.pretrain.lr, mix_seed(cfg_.seed, 101));
    }
    Archive a;
    a.kind = "backbone";
    a.meta = json{{"config", bcfg}, {"proxy_accuracy", acc}}.dump();
    put_parameters(a, backbone_->parameters(), "p.");
    write_archive(path, a);
  }
  backbone_->freeze();
  return *backbone_;
}

PerceptualNet<float>& Experiment::perceptual() {
  if (perceptual_) return *perceptual_;
  const auto path = run_.checkpoint("perceptual");
  perceptual_ = std::make_unique<PerceptualNet<float>>(cfg_.tokenizer.backbone.image_size,
                                                       std::max(1, data().train.class_count()),
                                                       mix_seed(cfg_.seed, 200));
  if (std::filesystem::exists(path)) {
    get_parameters(read_kind(path, "perceptual"), perceptual_->parameters(), "p.");
  } else {
    if (cfg_.perceptual.steps > 0 && data().train.class_count() > 1)
      perceptual_->train_classifier(data().train, cfg_.perceptual.steps, cfg_.perceptual.batch_size,
                                    cfg_.perceptual.lr, mix_seed(cfg_.seed, 201));
    Archive a;
    a.kind = "perceptual";
    put_parameters(a, perceptual_->parameters(), "p.");
    write_archive(path, a);
  }
  return *perceptual_;
}

TokenizerRun Experiment::train_tokenizer(const VariantSpec& variant, const std::string& tag, std::int64_t stop_at) {
  return train_tokenizer(variant, tag, cfg_.tokenizer, stop_at);
}

TokenizerRun Experiment::train_tokenizer(const VariantSpec& variant, const std::string& tag,
                                         const TokenizerConfig& base, std::int64_t stop_at) {
  TokenizerConfig tc = base;
  tc.variant = variant;
  tc.resolve();
  const std::string name = "tokenizer-" + tag;
  const auto ckpt = run_.checkpoint(name);
  const auto log = run_.log(name);

  Tokenizer<float> tok(tc, cfg_.seed, &backbone());
  TokenizerTrainer<float> trainer(tok, data().train, data().val, cfg_.schedule, &perceptual());
  std::uint64_t initial = tok.backbone_fingerprint();

  if (std::filesystem::exists(ckpt)) {
    Archive a = read_kind(ckpt, "tokenizer");
    json meta = parse_json(a.meta, ckpt.string());
    if (json(meta.at("config").get<TokenizerConfig>()) != json(tc))
      throw ConfigError("checkpoint " + ckpt.string() + " was trained with a different tokenizer config; use a new --out");
    for (auto* store : tok.stores()) get_parameters(a, *store, "p.");
    auto params = tok.trainable_parameters();
    if (a.contains("opt.m." + (params.empty() ? std::string() : params.front()->name))) {
      get_state(a, "ema.", params, trainer.ema().shadow());
      get_state(a, "opt.m.", params, trainer.optimizer().first_moments());
      get_state(a, "opt.v.", params, trainer.optimizer().second_moments());
    }
    const auto step = meta.at("step").get<std::int64_t>();
    trainer.set_step(step);
    initial = std::stoull(meta.at("backbone_initial").get<std::string>());
    truncate_log(log, step);
    if (step < cfg_.schedule.steps) note(strf("%s: resuming at step %lld", name.c_str(), static_cast<long long>(step)));
  } else {
    std::filesystem::remove(log);
  }

  const std::int64_t every = cfg_.schedule.eval_interval();
  ReconMetrics last{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  trainer.run(
      [&](const TrainRecord& r) {
        json j{{"step", r.step},       {"loss", r.loss},           {"l1", r.l1},
               {"perceptual", r.perceptual}, {"distill", r.distill}, {"grad_norm", r.grad_norm}};
        if (!std::isnan(r.psnr)) {
          j["psnr"] = finite_or_null(r.psnr);
          j["ssim"] = r.ssim;
          last = ReconMetrics{r.psnr, r.ssim};
          note(strf("%s step %lld loss %.4f psnr %.2f ssim %.3f", name.c_str(), static_cast<long long>(r.step),
                    r.loss, r.psnr, r.ssim));
        }
        append_line(log, j.dump());
        if (r.step % every == 0 || r.step == cfg_.schedule.steps)
          write_archive(ckpt, tokenizer_archive(tok, &trainer, r.step, initial));
      },
      stop_at);
  write_archive(ckpt, tokenizer_archive(tok, &trainer, trainer.current_step(), initial));

  TokenizerRun out;
  out.tag = tag;
  out.variant = variant;
  out.steps = trainer.current_step();
  out.metrics = std::isnan(last.psnr) ? trainer.evaluate() : last;
  out.backbone_before = initial;
  out.backbone_after = tok.backbone_fingerprint();
  std::tie(out.first_decile_loss, out.last_decile_loss) = decile_means(log_losses(log));

  json report{{"tag", tag},
              {"variant", variant.mode},
              {"steps", out.steps},
              {"psnr", finite_or_null(out.metrics.psnr)},
              {"ssim", out.metrics.ssim},
              {"backbone_unchanged", out.backbone_before == out.backbone_after},
              {"first_decile_loss", out.first_decile_loss},
              {"last_decile_loss", out.last_decile_loss},
              {"config_hash", config_hash(cfg_)},
              {"seed", cfg_.seed}};
  run_.write_text(run_.report(name + ".json"), report.dump(2) + "\n");
  return out;
}

std::unique_ptr<Tokenizer<float>> Experiment::load_tokenizer(const std::string& tag) {
  const auto ckpt = run_.checkpoint("tokenizer-" + tag);
  if (!std::filesystem::exists(ckpt))
    throw ConfigError("missing tokenizer checkpoint " + ckpt.string() + "; run `decq train-tokenizer --variant " +
                      tag + "` with the same --out first");
  Archive a = read_kind(ckpt, "tokenizer");
  json meta = parse_json(a.meta, ckpt.string());
  auto tok = std::make_unique<Tokenizer<float>>(meta.at("config").get<TokenizerConfig>(), cfg_.seed);
  for (auto* store : tok->stores()) get_parameters(a, *store, "p.");
  return tok;
}

LatentDataset<float> Experiment::encode_latents(const Tokenizer<float>& tok, const Dataset& data) {
  LatentDataset<float> out;
  const std::size_t batch = 32;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    auto idx = range_indices(start, std::min(data.size(), start + batch));
    out.append(tok.latents(data.batch<float>(idx)), data.batch_labels(idx));
  }
  return out;
}

std::vector<GenRecord> Experiment::train_generator(const std::string& tag, std::int64_t stop_at) {
  auto tok = load_tokenizer(tag);
  const auto& tc = tok->config();
  GenConfig gc = cfg_.generator;
  gc.latent_dim = tc.decoder.latent_dim;
  gc.grid = tc.backbone.grid();
  gc.queries = tc.decoder.queries;
  gc.class_count = std::max(1, data().train.class_count());
  gc.validate();
  LatentDataset<float> latents = encode_latents(*tok, data().train);

  const std::string name = "generator-" + tag;
  const auto ckpt = run_.checkpoint(name);
  const auto log = run_.log(name);
  FlowTransformer<float> gen(gc, mix_seed(cfg_.seed, 300));
  GeneratorTrainer<float> trainer(gen, latents, cfg_.gen_schedule);
  if (std::filesystem::exists(ckpt)) {
    Archive a = read_kind(ckpt, "generator");
    json meta = parse_json(a.meta, ckpt.string());
    GenConfig saved = meta.at("config").get<GenConfig>();
    saved.steps = gc.steps;
    saved.guidance_scale = gc.guidance_scale;
    if (!(saved == gc))
      throw ConfigError("checkpoint " + ckpt.string() + " was trained with a different generator config; use a new --out");
    get_parameters(a, gen.parameters(), "p.");
    auto params = gen.parameters().trainable();
    get_state(a, "ema.", params, trainer.ema().shadow());
    get_state(a, "opt.m.", params, trainer.optimizer().first_moments());
    get_state(a, "opt.v.", params, trainer.optimizer().second_moments());
    const auto step = meta.at("step").get<std::int64_t>();
    trainer.set_step(step);
    truncate_log(log, step);
  } else {
    std::filesystem::remove(log);
  }
  const std::int64_t every = std::max<std::int64_t>(1, cfg_.gen_schedule.steps / 20);
  auto records = trainer.run(
      [&](const GenRecord& r) {
        append_line(log, json{{"step", r.step},
                              {"loss", r.loss},
                              {"patch", r.patch},
                              {"query", r.query},
                              {"grad_norm", r.grad_norm}}
                             .dump());
        if (r.step % every == 0) {
          note(strf("%s step %lld loss %.4f", name.c_str(), static_cast<long long>(r.step), r.loss));
          write_archive(ckpt, generator_archive(gen, &trainer, r.step, tag));
        }
      },
      stop_at);
  write_archive(ckpt, generator_archive(gen, &trainer, trainer.current_step(), tag));
  return records;
}

std::unique_ptr<FlowTransformer<float>> load_generator_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing generator checkpoint " + path.string());
  Archive a = read_kind(path, "generator");
  json meta = parse_json(a.meta, path.string());
  auto gen = std::make_unique<FlowTransformer<float>>(meta.at("config").get<GenConfig>());
  get_parameters(a, gen->parameters(), "p.");
  return gen;
}

std::unique_ptr<FlowTransformer<float>> Experiment::load_generator(const std::string& tag) {
  const auto ckpt = run_.checkpoint("generator-" + tag);
  if (!std::filesystem::exists(ckpt))
    throw ConfigError("missing generator checkpoint " + ckpt.string() +
                      "; run `decq train-generator --variant " + tag + "` with the same --out first");
  return load_generator_file(ckpt);
}

ImageBatch<float> Experiment::sample_images(const std::string& tag, Index per_class, std::uint64_t seed,
                                            const std::optional<std::filesystem::path>& weak, bool rae_decoder) {
  auto tok = load_tokenizer(tag);
  auto gen = load_generator(tag);
  std::unique_ptr<FlowTransformer<float>> weak_gen;
  if (weak) {
    weak_gen = load_generator_file(*weak);
    if (!(weak_gen->config().latent_dim == gen->config().latent_dim && weak_gen->config().grid == gen->config().grid &&
          weak_gen->config().queries == gen->config().queries))
      throw ConfigError("guidance model " + weak->string() + " has a different latent layout");
  }
  std::unique_ptr<Tokenizer<float>> rae;
  if (rae_decoder) rae = load_tokenizer("freeze");

  const GenConfig& gc = gen->config();
  std::vector<int> labels;
  for (int c = 0; c < gc.class_count; ++c)
    for (Index i = 0; i < per_class; ++i) labels.push_back(c);
  // Sampling settings come from the live config, not the checkpoint.
  SampleOptions opts{cfg_.generator.steps, cfg_.generator.shift, cfg_.generator.guidance_scale};

  Matrix<float> pixels(0, tok->config().backbone.channels);
  const Index size = tok->config().backbone.image_size;
  const std::size_t chunk = 32;
  for (std::size_t start = 0; start < labels.size(); start += chunk) {
    std::span<const int> part(labels.data() + start, std::min(chunk, labels.size() - start));
    LatentPair<float> z = sample<float>(*gen, gc.patch_tokens(), gc.queries, gc.latent_dim, part, opts,
                                        mix_seed(seed, start), weak_gen.get());
    ImageBatch<float> img;
    if (rae) {
      LatentPair<float> patch_only{z.z_patch, TokenSequence<float>(Matrix<float>(0, gc.latent_dim), z.batch(), 0)};
      img = rae->decoder().decode(patch_only);
    } else {
      img = tok->decoder().decode(z);
    }
    Matrix<float> merged(pixels.rows() + img.data.rows(), pixels.cols());
    merged << pixels, img.data.cwiseMax(-1.0f).cwiseMin(1.0f);
    pixels = std::move(merged);
  }
  return ImageBatch<float>(std::move(pixels), static_cast<Index>(labels.size()), size, size);
}

ReconReport Experiment::eval_recon(const std::string& tag) {
  auto tok = load_tokenizer(tag);
  const Dataset& val = data().val.size() > 0 ? data().val : data().train;
  ReconReport r;
  r.tag = tag;
  r.samples = std::min<Index>(cfg_.eval.recon_samples, static_cast<Index>(val.size()));
  r.metrics = evaluate_reconstruction(*tok, val, r.samples);
  auto idx = range_indices(0, static_cast<std::size_t>(r.samples));
  Eigen::MatrixXd real(0, 0), fake(0, 0);
  for (std::size_t start = 0; start < idx.size(); start += 32) {
    std::vector<std::size_t> part(idx.begin() + static_cast<long>(start),
                                  idx.begin() + static_cast<long>(std::min(idx.size(), start + 32)));
    ImageBatch<float> x = val.batch<float>(part);
    Eigen::MatrixXd fr = perceptual().pooled_features(x);
    Eigen::MatrixXd ff = perceptual().pooled_features(tok->reconstruct(x));
    Eigen::MatrixXd a(real.rows() + fr.rows(), fr.cols()), b(fake.rows() + ff.rows(), ff.cols());
    if (real.rows()) a << real, fr; else a = fr;
    if (fake.rows()) b << fake, ff; else b = ff;
    real = std::move(a);
    fake = std::move(b);
  }
  r.rfid = metrics::compare_features(real, fake);
  json j{{"tag", tag},
         {"psnr", finite_or_null(r.metrics.psnr)},
         {"ssim", r.metrics.ssim},
         {"rfid", to_json_value(r.rfid)},
         {"sample_count", r.samples},
         {"note", "FID values are proxies from the desk feature network, comparable only within this artifact"},
         {"config_hash", config_hash(cfg_)},
         {"seed", cfg_.seed}};
  run_.write_text(run_.report("recon-" + tag + ".json"), j.dump(2) + "\n");
  return r;
}

GenReport Experiment::eval_gen(const std::string& tag, bool rae_decoder,
                               const std::optional<std::filesystem::path>& weak) {
  const int classes = std::max(1, data().train.class_count());
  const Index per_class = std::max<Index>(1, (cfg_.eval.gen_samples + classes - 1) / classes);
  ImageBatch<float> fake = sample_images(tag, per_class, mix_seed(cfg_.seed, 400), weak, rae_decoder);
  const Dataset& val = data().val.size() > 0 ? data().val : data().train;
  auto idx = range_indices(0, std::min<std::size_t>(val.size(), static_cast<std::size_t>(fake.batch)));
  ImageBatch<float> real = val.batch<float>(idx);

  GenReport r;
  r.tag = tag;
  r.rae_decoder = rae_decoder;
  r.samples = fake.batch;
  r.gfid = metrics::compare_features(perceptual().pooled_features(real), perceptual().pooled_features(fake));
  r.inception_score = metrics::inception_score(perceptual().class_probabilities(fake));
  write_image(run_.sample("eval-" + tag + (rae_decoder ? "-rae" : "") + ".png"),
              make_grid(fake, std::max<Index>(1, per_class)));
  json j{{"tag", tag},
         {"rae_decoder", rae_decoder},
         {"gfid", to_json_value(r.gfid)},
         {"is_proxy", r.inception_score},
         {"sample_count", r.samples},
         {"note", "FID/IS values are proxies from the desk feature network, comparable only within this artifact"},
         {"config_hash", config_hash(cfg_)},
         {"seed", cfg_.seed}};
  run_.write_text(run_.report("gen-" + tag + (rae_decoder ? "-rae" : "") + ".json"), j.dump(2) + "\n");
  return r;
}

ClusterReport Experiment::cluster(const std::string& tag) {
  auto tok = load_tokenizer(tag);
  if (tok->config().decoder.queries == 0)
    throw ConfigError("cluster needs a tokenizer with query tokens (variant decq)");
  Dataset pool_data = data().train;
  const Dataset& val = data().val;
  for (std::size_t i = 0; i < val.size(); ++i) {
    pool_data.images.push_back(val.images[i]);
    pool_data.labels.push_back(val.labels[i]);
    pool_data.colors.push_back(val.colors[i]);
    pool_data.names.push_back(val.names[i]);
  }
  Eigen::MatrixXd q(0, 0), p(0, 0);
  for (std::size_t start = 0; start < pool_data.size(); start += 32) {
    auto idx = range_indices(start, std::min(pool_data.size(), start + 32));
    LatentPair<float> z = tok->latents(pool_data.batch<float>(idx));
    Eigen::MatrixXd pq = metrics::pool_tokens(z.z_query), pp = metrics::pool_tokens(z.z_patch);
    Eigen::MatrixXd a(q.rows() + pq.rows(), pq.cols()), b(p.rows() + pp.rows(), pp.cols());
    if (q.rows()) a << q, pq; else a = pq;
    if (p.rows()) b << p, pp; else b = pp;
    q = std::move(a);
    p = std::move(b);
  }
  ClusterReport r;
  r.tag = tag;
  r.k = cfg_.eval.cluster_k;
  r.anchors = std::min<Index>(cfg_.eval.cluster_anchors, static_cast<Index>(pool_data.size()));
  r.has_colors = !pool_data.colors.empty() && pool_data.colors.front() >= 0;
  double qc = 0, pc = 0, qs = 0, ps = 0;
  for (Index a = 0; a < r.anchors; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    for (Index j : metrics::nearest_neighbors(q, a, r.k)) {
      const auto uj = static_cast<std::size_t>(j);
      qc += pool_data.colors[uj] == pool_data.colors[ua];
      qs += pool_data.labels[uj] == pool_data.labels[ua];
    }
    for (Index j : metrics::nearest_neighbors(p, a, r.k)) {
      const auto uj = static_cast<std::size_t>(j);
      pc += pool_data.colors[uj] == pool_data.colors[ua];
      ps += pool_data.labels[uj] == pool_data.labels[ua];
    }
  }
  const double n = static_cast<double>(r.anchors * r.k);
  r.query_color = qc / n;
  r.patch_color = pc / n;
  r.query_shape = qs / n;
  r.patch_shape = ps / n;
  r.color_test = metrics::two_proportion_z_test(qc, n, pc, n);
  r.shape_test = metrics::two_proportion_z_test(ps, n, qs, n);
  json j{{"tag", tag},
         {"anchors", r.anchors},
         {"k", r.k},
         {"query_color_match", r.query_color},
         {"patch_color_match", r.patch_color},
         {"query_shape_match", r.query_shape},
         {"patch_shape_match", r.patch_shape},
         {"color_z", r.color_test.z},
         {"color_p", r.color_test.p_value},
         {"shape_z", r.shape_test.z},
         {"shape_p", r.shape_test.p_value},
         {"colors_known", r.has_colors},
         {"config_hash", config_hash(cfg_)},
         {"seed", cfg_.seed}};
  run_.write_text(run_.report("cluster-" + tag + ".json"), j.dump(2) + "\n");

  // Neighbor mosaic: each row is an anchor followed by its query-rep and
  // patch-rep neighbors.
  const Index rows = std::min<Index>(6, r.anchors);
  std::vector<std::size_t> mosaic;
  for (Index a = 0; a < rows; ++a) {
    mosaic.push_back(static_cast<std::size_t>(a));
    for (Index jn : metrics::nearest_neighbors(q, a, r.k)) mosaic.push_back(static_cast<std::size_t>(jn));
    for (Index jn : metrics::nearest_neighbors(p, a, r.k)) mosaic.push_back(static_cast<std::size_t>(jn));
  }
  if (!mosaic.empty())
    write_image(run_.sample("cluster-" + tag + ".png"), make_grid(pool_data.batch<float>(mosaic), 1 + 2 * r.k));
  return r;
}

std::vector<TradeoffRow> Experiment::tradeoff_study() {
  std::vector<TradeoffRow> rows;
  for (Paradigm mode : {Paradigm::freeze, Paradigm::finetune, Paradigm::distill, Paradigm::feat_concat,
                        Paradigm::decq}) {
    VariantSpec v = cfg_.tokenizer.variant;
    v.mode = mode;
    const std::string tag = to_string(mode);
    train_tokenizer(v, tag);
    ReconReport rr = eval_recon(tag);
    TradeoffRow row{tag, rr.metrics.psnr, rr.metrics.ssim, rr.rfid.fid, std::nullopt};
    if (mode == Paradigm::freeze || mode == Paradigm::decq) {
      train_generator(tag);
      row.gfid = eval_gen(tag).gfid.fid;
    }
    rows.push_back(row);
  }
  json j = json::array();
  for (const auto& r : rows)
    j.push_back(json{{"variant", r.variant},
                     {"psnr", finite_or_null(r.psnr)},
                     {"ssim", r.ssim},
                     {"rfid_proxy", finite_or_null(r.rfid)},
                     {"gfid_proxy", r.gfid ? finite_or_null(*r.gfid) : json(nullptr)}});
  run_.write_text(run_.report("tradeoff.json"), json{{"rows", j}, {"config_hash", config_hash(cfg_)}}.dump(2) + "\n");
  run_.write_text(run_.report("tradeoff.txt"), format_tradeoff(rows));
  plot_frontier(run_.report("tradeoff.png"), rows);
  return rows;
}

// ---------------------------------------------------------------------------

std::string format_tokenizer_report(const overhead::TokenizerReport& r, const overhead::ArchConfig& cfg) {
  auto g = [](overhead::Count v) { return static_cast<double>(v) / 1e9; };
  auto m = [](overhead::Count v) { return static_cast<double>(v) / 1e6; };
  std::string s;
  s += strf("Tokenizer overhead (M=%lld, K=%lld), MACs convention\n", static_cast<long long>(cfg.condenser.modules),
            static_cast<long long>(cfg.condenser.queries));
  s += strf("%-22s %14s %14s\n", "component", "baseline GF", "with queries GF");
  s += strf("%-22s %14.2f %14.2f\n", "encoder", g(r.baseline_encoder_macs), g(r.baseline_encoder_macs));
  s += strf("%-22s %14s %14.2f\n", "condensers", "-", g(r.condenser_macs));
  s += strf("%-22s %14.2f %14.2f\n", "decoder", g(r.baseline_decoder_macs), g(r.decoder_macs));
  s += strf("%-22s %14.2f %14.2f\n", "total", g(r.baseline_total_macs), g(r.total_macs));
  s += strf("%-22s %14.2f\n", "patch embed (excl.)", g(r.patch_embed_macs));
  s += strf("%-22s %14.2f\n", "pixel head (excl.)", g(r.pixel_head_macs));
  s += strf("FLOPs overhead  %+.1f%%\n", 100.0 * r.flops_overhead);
  s += strf("Params baseline %.2fM, condensers %.2fM, extras %+.2fM (%+.1f%%)\n", m(r.baseline_params),
            m(r.condenser_params_total), m(r.extra_params), 100.0 * r.params_overhead);
  return s;
}

std::string format_generation_report(const overhead::GenerationReport& r, const overhead::ArchConfig& cfg) {
  auto g = [](overhead::Count v) { return static_cast<double>(v) / 1e9; };
  std::string s;
  s += strf("Generation cost (%lld steps + one decode, K=%lld), MACs convention\n",
            static_cast<long long>(cfg.steps), static_cast<long long>(cfg.condenser.queries));
  s += strf("%-22s %14s %14s %12s\n", "item", "baseline GF", "with queries GF", "delta GF");
  s += strf("%-22s %14.2f %14.2f %+12.2f\n", "generator / step", g(r.baseline_per_step_macs), g(r.per_step_macs),
            g(r.step_delta));
  s += strf("%-22s %14s %14s %+12.2f\n", "decoder", "", "", g(r.decoder_delta));
  s += strf("%-22s %14.1f %14.1f %+12.1f (%+.2f%%)\n", "total", g(r.baseline_total_macs), g(r.total_macs),
            g(r.total_delta), 100.0 * r.delta_fraction);
  s += strf("Generator params delta %+.2fM\n", static_cast<double>(r.param_delta) / 1e6);
  return s;
}

std::string format_tradeoff(const std::vector<TradeoffRow>& rows) {
  std::string s = "Reconstruction / generation trade-off (FID values are desk proxies)\n";
  s += strf("%-12s %8s %8s %12s %12s\n", "variant", "PSNR", "SSIM", "rFID-proxy", "gFID-proxy");
  for (const auto& r : rows)
    s += strf("%-12s %8.2f %8.3f %12.3f %12s\n", r.variant.c_str(), r.psnr, r.ssim, r.rfid,
              r.gfid ? strf("%.3f", *r.gfid).c_str() : "-");
  return s;
}

void plot_frontier(const std::filesystem::path& path, const std::vector<TradeoffRow>& rows) {
  if (rows.empty()) return;
  const int W = 560, H = 400, L = 70, R = 20, T = 30, B = 50;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  auto xval = [](const TradeoffRow& r) { return r.gfid ? *r.gfid : r.rfid; };
  double x0 = xval(rows[0]), x1 = x0, y0 = rows[0].psnr, y1 = y0;
  for (const auto& r : rows) {
    x0 = std::min(x0, xval(r));
    x1 = std::max(x1, xval(r));
    y0 = std::min(y0, r.psnr);
    y1 = std::max(y1, r.psnr);
  }
  const double px = std::max(1e-9, (x1 - x0) * 0.15), py = std::max(1e-9, (y1 - y0) * 0.15);
  x0 -= px;
  x1 += px;
  y0 -= py;
  y1 += py;
  auto to_px = [&](double x, double y) {
    return cv::Point(L + static_cast<int>((x - x0) / (x1 - x0) * (W - L - R)),
                     H - B - static_cast<int>((y - y0) / (y1 - y0) * (H - T - B)));
  };
  const cv::Scalar black(0, 0, 0);
  cv::line(img, {L, H - B}, {W - R, H - B}, black, 1);
  cv::line(img, {L, T}, {L, H - B}, black, 1);
  cv::putText(img, "FID proxy (gen if trained, else recon)", {L + 40, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black);
  cv::putText(img, "PSNR", {10, T + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black);
  cv::putText(img, strf("%.1f", y1 - py), {5, T + 30}, cv::FONT_HERSHEY_SIMPLEX, 0.4, black);
  cv::putText(img, strf("%.1f", y0 + py), {5, H - B}, cv::FONT_HERSHEY_SIMPLEX, 0.4, black);
  for (const auto& r : rows) {
    const cv::Point p = to_px(xval(r), r.psnr);
    const cv::Scalar color = r.gfid ? cv::Scalar(40, 40, 220) : cv::Scalar(200, 120, 30);
    cv::circle(img, p, 6, color, cv::FILLED);
    cv::putText(img, r.variant, p + cv::Point(8, -6), cv::FONT_HERSHEY_SIMPLEX, 0.45, black);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw ConfigError("cannot write " + path.string());
}

}  // namespace decq
