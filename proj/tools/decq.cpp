// decq: command-line driver for tokenizer training, generation, evaluation
// and cost accounting.

#include "decq/experiment.hpp"
#include "decq/image_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace decq;

namespace {

struct Common {
  std::string config;
  std::string preset = "desk-small";
  std::string out = "runs/default";
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<double> guidance_scale;
  bool quiet = false;
};

struct TokenizerOpts {
  std::string variant = "decq";
  std::optional<Index> queries;
  std::string tag;
  std::int64_t stop_at = -1;

  std::string resolved_tag() const {
    if (!tag.empty()) return tag;
    return queries ? variant + "-k" + std::to_string(*queries) : variant;
  }
};

ExperimentConfig base_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig::preset_named(c.preset) : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.guidance_scale) cfg.generator.guidance_scale = *c.guidance_scale;
  return cfg;
}

void apply_tokenizer_opts(ExperimentConfig& cfg, const TokenizerOpts& t) {
  cfg.tokenizer.variant.mode = parse_paradigm(t.variant);
  if (t.queries) cfg.tokenizer.condenser.queries = *t.queries;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config; absent keys keep the preset's values")->check(CLI::ExistingFile);
  app->add_option("--preset", c.preset, "desk-small, desk-tiny or micro (ignored with --config)");
  app->add_option("--out", c.out, "run directory");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--steps", c.steps, "training steps (sampling steps for sample/eval-gen)");
  app->add_option("--guidance-scale", c.guidance_scale, "autoguidance scale");
  app->add_flag("--quiet", c.quiet, "suppress progress lines");
}

void add_tokenizer(CLI::App* app, TokenizerOpts& t) {
  app->add_option("--variant", t.variant, "freeze, finetune, distill, feat_concat or decq");
  app->add_option("--queries", t.queries, "override the number of query tokens K");
  app->add_option("--tag", t.tag, "checkpoint name (default: variant, plus -k<K> with --queries)");
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decq: detail-condensing query tokenizer and latent flow generator"};
  app.require_subcommand(1);

  Common common;
  TokenizerOpts tok;
  std::string weak;
  bool rae = false;
  Index per_class = 8;
  std::string arch_config;
  std::string arch_preset = "vitb-xl";
  std::vector<Index> query_counts;

  auto* train_tok = app.add_subcommand("train-tokenizer", "train (or resume) a tokenizer variant");
  add_common(train_tok, common);
  add_tokenizer(train_tok, tok);
  train_tok->add_option("--stop-at", tok.stop_at, "stop after this step, leaving a resumable checkpoint");

  auto* train_gen = app.add_subcommand("train-generator", "train the latent flow generator on a tokenizer");
  add_common(train_gen, common);
  add_tokenizer(train_gen, tok);
  train_gen->add_option("--stop-at", tok.stop_at, "stop after this step, leaving a resumable checkpoint");

  auto* sample_cmd = app.add_subcommand("sample", "draw class-balanced samples and write a PNG grid");
  add_common(sample_cmd, common);
  add_tokenizer(sample_cmd, tok);
  sample_cmd->add_option("--per-class", per_class, "samples per class");
  sample_cmd->add_option("--weak", weak, "weaker generator checkpoint for autoguidance")->check(CLI::ExistingFile);
  sample_cmd->add_flag("--rae-decoder", rae, "discard generated queries and decode with the freeze tokenizer");

  auto* eval_recon = app.add_subcommand("eval-recon", "PSNR, SSIM and rFID proxy on the held-out split");
  add_common(eval_recon, common);
  add_tokenizer(eval_recon, tok);

  auto* eval_gen = app.add_subcommand("eval-gen", "gFID and IS proxies of generated samples");
  add_common(eval_gen, common);
  add_tokenizer(eval_gen, tok);
  eval_gen->add_option("--weak", weak, "weaker generator checkpoint for autoguidance")->check(CLI::ExistingFile);
  eval_gen->add_flag("--rae-decoder", rae, "discard generated queries and decode with the freeze tokenizer");

  auto* flops = app.add_subcommand("flops", "symbolic FLOPs and parameter overhead tables");
  flops->add_option("--config", arch_config, "architecture or experiment JSON")->check(CLI::ExistingFile);
  flops->add_option("--preset", arch_preset, "vitb-xl or desk-small");
  flops->add_option("--queries", query_counts, "query counts K to report (default: the config's K)");
  flops->add_option("--out", common.out, "directory for flops.json (optional)");

  auto* cluster = app.add_subcommand("cluster", "k-NN color/shape clustering of query vs patch latents");
  add_common(cluster, common);
  add_tokenizer(cluster, tok);

  auto* tradeoff = app.add_subcommand("tradeoff-study", "train and evaluate all five paradigms");
  add_common(tradeoff, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (flops->parsed()) {
      overhead::ArchConfig arch =
          arch_config.empty() ? overhead::ArchConfig::preset(arch_preset) : load_arch_config(arch_config);
      if (query_counts.empty()) query_counts.push_back(arch.condenser.queries);
      nlohmann::json all = nlohmann::json::array();
      for (Index k : query_counts) {
        overhead::ArchConfig a = arch;
        a.condenser.queries = k;
        a.validate();
        const auto tr = overhead::tokenizer_report(a);
        const auto gr = overhead::generation_report(a);
        std::cout << format_tokenizer_report(tr, a) << '\n' << format_generation_report(gr, a) << '\n';
        all.push_back({{"queries", k},
                       {"tokenizer", nlohmann::json::parse(to_json_string(tr))},
                       {"generation", nlohmann::json::parse(to_json_string(gr))}});
      }
      if (flops->count("--out")) {
        std::filesystem::create_directories(common.out);
        std::ofstream(std::filesystem::path(common.out) / "flops.json") << all.dump(2) << '\n';
      }
      return 0;
    }

    ExperimentConfig cfg = base_config(common);
    apply_tokenizer_opts(cfg, tok);
    const std::string tag = tok.resolved_tag();

    if (train_tok->parsed()) {
      if (common.steps) cfg.schedule.steps = *common.steps;
      Experiment exp(cfg, common.out, common.quiet);
      VariantSpec v = exp.config().tokenizer.variant;
      TokenizerRun r = exp.train_tokenizer(v, tag, tok.stop_at);
      print_json({{"tag", r.tag},
                  {"steps", r.steps},
                  {"psnr", r.metrics.psnr},
                  {"ssim", r.metrics.ssim},
                  {"backbone_unchanged", r.backbone_before == r.backbone_after},
                  {"checkpoint", exp.run_dir().checkpoint("tokenizer-" + tag).string()}});
    } else if (train_gen->parsed()) {
      if (common.steps) cfg.gen_schedule.steps = *common.steps;
      Experiment exp(cfg, common.out, common.quiet);
      auto records = exp.train_generator(tag, tok.stop_at);
      print_json({{"tag", tag},
                  {"steps_run", records.size()},
                  {"final_loss", records.empty() ? nlohmann::json(nullptr) : nlohmann::json(records.back().loss)},
                  {"checkpoint", exp.run_dir().checkpoint("generator-" + tag).string()}});
    } else if (sample_cmd->parsed()) {
      if (common.steps) cfg.generator.steps = *common.steps;
      Experiment exp(cfg, common.out, common.quiet);
      std::optional<std::filesystem::path> w;
      if (!weak.empty()) w = weak;
      ImageBatch<float> images =
          exp.sample_images(tag, per_class, mix_seed(exp.config().seed, 500), w, rae);
      const auto path = exp.run_dir().sample("samples-" + tag + (rae ? "-rae" : "") + ".png");
      write_image(path, make_grid(images, per_class));
      print_json({{"tag", tag}, {"images", images.batch}, {"grid", path.string()}});
    } else if (eval_recon->parsed()) {
      Experiment exp(cfg, common.out, common.quiet);
      ReconReport r = exp.eval_recon(tag);
      std::cout << read_text_file(exp.run_dir().report("recon-" + tag + ".json"));
    } else if (eval_gen->parsed()) {
      if (common.steps) cfg.generator.steps = *common.steps;
      Experiment exp(cfg, common.out, common.quiet);
      std::optional<std::filesystem::path> w;
      if (!weak.empty()) w = weak;
      exp.eval_gen(tag, rae, w);
      std::cout << read_text_file(exp.run_dir().report("gen-" + tag + (rae ? "-rae" : "") + ".json"));
    } else if (cluster->parsed()) {
      Experiment exp(cfg, common.out, common.quiet);
      exp.cluster(tag);
      std::cout << read_text_file(exp.run_dir().report("cluster-" + tag + ".json"));
    } else if (tradeoff->parsed()) {
      if (common.steps) cfg.schedule.steps = *common.steps;
      Experiment exp(cfg, common.out, common.quiet);
      auto rows = exp.tradeoff_study();
      std::cout << format_tradeoff(rows);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "decq: error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "decq: error: %s\n", e.what());
    return 1;
  }
}
