#pragma once

#include "decq/checkpoint.hpp"
#include "decq/flow.hpp"
#include "decq/metrics.hpp"
#include "decq/overhead.hpp"
#include "decq/tokenizer.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace decq {

/// Environment variable that relocates relative dataset folders.
inline constexpr const char* kDataRootEnv = "DECQ_DATA_ROOT";

struct DataSpec {
  std::string folder;  // empty: synthetic corpus
  SyntheticSpec synthetic;
};

struct PretrainSpec {
  std::int64_t steps = 600;
  Index batch_size = 32;
  double lr = 3.0e-4;
};

struct PerceptualSpec {
  std::int64_t steps = 200;
  Index batch_size = 32;
  double lr = 1.0e-3;
};

struct EvalSpec {
  Index recon_samples = 120;
  Index gen_samples = 100;
  Index cluster_anchors = 500;
  Index cluster_k = 5;
};

struct ExperimentConfig {
  std::string preset = "desk-small";
  std::uint64_t seed = 0;
  DataSpec data;
  PretrainSpec pretrain;
  PerceptualSpec perceptual;
  TokenizerConfig tokenizer;
  Schedule schedule;
  GenConfig generator;
  GenSchedule gen_schedule;
  EvalSpec eval;

  /// Named starting points: "desk-small" (64 px reference desk sizes),
  /// "desk-tiny" (32 px, the acceptance budget) and "micro" (smoke runs).
  static ExperimentConfig preset_named(const std::string& name);

  /// Propagates the seed into every schedule and derives the generator's
  /// latent layout from the tokenizer. Validates everything.
  void resolve();
};

std::string to_json_string(const ExperimentConfig& cfg);
ExperimentConfig config_from_json_string(const std::string& text);
/// Reads a JSON config; keys absent from the file keep the values of the
/// preset named by its "preset" key (default "desk-small").
ExperimentConfig load_config(const std::filesystem::path& path);
/// Hex digest of the canonical JSON form.
std::string config_hash(const ExperimentConfig& cfg);

/// Architecture description of an experiment's models for the accountant.
overhead::ArchConfig arch_from_experiment(const ExperimentConfig& cfg);
overhead::ArchConfig load_arch_config(const std::filesystem::path& path);
std::string to_json_string(const overhead::TokenizerReport& r);
std::string to_json_string(const overhead::GenerationReport& r);

/// Dataset described by `spec` (synthetic or a folder); relative folders are resolved against
/// $DECQ_DATA_ROOT when set. Throws ConfigError when empty.
Dataset load_dataset(const DataSpec& spec, Index image_size);

/// Run directory: config.resolved, checkpoints/, logs/, reports/, samples/,
/// guarded by an advisory lock for the lifetime of the object.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path checkpoint(const std::string& name) const { return root_ / "checkpoints" / (name + ".arc"); }
  std::filesystem::path log(const std::string& name) const { return root_ / "logs" / (name + ".jsonl"); }
  std::filesystem::path report(const std::string& name) const { return root_ / "reports" / name; }
  std::filesystem::path sample(const std::string& name) const { return root_ / "samples" / name; }

  void write_config(const ExperimentConfig& cfg) const;
  void write_text(const std::filesystem::path& path, const std::string& text) const;

 private:
  std::filesystem::path root_;
  int lock_fd_ = -1;
};

struct TokenizerRun {
  std::string tag;
  VariantSpec variant;
  std::int64_t steps = 0;
  ReconMetrics metrics;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
  double first_decile_loss = 0;
  double last_decile_loss = 0;
};

struct ReconReport {
  std::string tag;
  ReconMetrics metrics;
  metrics::DistributionReport rfid;
  Index samples = 0;
};

struct GenReport {
  std::string tag;
  metrics::DistributionReport gfid;
  double inception_score = 0;
  Index samples = 0;
  bool rae_decoder = false;
};

struct ClusterReport {
  std::string tag;
  Index anchors = 0;
  Index k = 0;
  double query_color = 0, patch_color = 0;
  double query_shape = 0, patch_shape = 0;
  metrics::ProportionTest color_test;  // H1: query > patch
  metrics::ProportionTest shape_test;  // H1: patch > query
  bool has_colors = false;
};

struct TradeoffRow {
  std::string variant;
  double psnr = 0;
  double ssim = 0;
  double rfid = 0;
  std::optional<double> gfid;
};

/// Binds a config to a run directory and runs the pipeline stages. Every
/// stage reuses finished checkpoints and resumes interrupted ones.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::filesystem::path out, bool quiet = false);

  const ExperimentConfig& config() const { return cfg_; }
  RunDir& run_dir() { return run_; }
  const Split& data();

  Backbone<float>& backbone();
  PerceptualNet<float>& perceptual();

  /// Trains (or resumes) a tokenizer; `stop_at` >= 0 stops early, leaving a
  /// resumable checkpoint.
  TokenizerRun train_tokenizer(const VariantSpec& variant, const std::string& tag, std::int64_t stop_at = -1);
  TokenizerRun train_tokenizer(const VariantSpec& variant, const std::string& tag, const TokenizerConfig& cfg,
                               std::int64_t stop_at = -1);
  /// Throws ConfigError naming the subcommand that produces the checkpoint.
  std::unique_ptr<Tokenizer<float>> load_tokenizer(const std::string& tag);

  LatentDataset<float> encode_latents(const Tokenizer<float>& tok, const Dataset& data);

  std::vector<GenRecord> train_generator(const std::string& tokenizer_tag, std::int64_t stop_at = -1);
  std::unique_ptr<FlowTransformer<float>> load_generator(const std::string& tokenizer_tag);

  /// Class-balanced samples decoded to images; guided when `weak` is given.
  ImageBatch<float> sample_images(const std::string& tokenizer_tag, Index per_class, std::uint64_t seed,
                                  const std::optional<std::filesystem::path>& weak = std::nullopt,
                                  bool rae_decoder = false);

  ReconReport eval_recon(const std::string& tag);
  GenReport eval_gen(const std::string& tokenizer_tag, bool rae_decoder = false,
                     const std::optional<std::filesystem::path>& weak = std::nullopt);
  ClusterReport cluster(const std::string& tag);
  std::vector<TradeoffRow> tradeoff_study();

 private:
  void note(const std::string& line) const;

  ExperimentConfig cfg_;
  RunDir run_;
  bool quiet_;
  std::optional<Split> data_;
  std::unique_ptr<Backbone<float>> backbone_;
  std::unique_ptr<PerceptualNet<float>> perceptual_;
};

/// Loads a generator checkpoint from an explicit path.
std::unique_ptr<FlowTransformer<float>> load_generator_file(const std::filesystem::path& path);

/// Whole file as a string; throws ConfigError when unreadable.
std::string read_text_file(const std::filesystem::path& path);

/// Aligned text tables.
std::string format_tokenizer_report(const overhead::TokenizerReport& r, const overhead::ArchConfig& cfg);
std::string format_generation_report(const overhead::GenerationReport& r, const overhead::ArchConfig& cfg);
std::string format_tradeoff(const std::vector<TradeoffRow>& rows);

/// PSNR-vs-gFID-proxy (or rFID-proxy) scatter as a PNG.
void plot_frontier(const std::filesystem::path& path, const std::vector<TradeoffRow>& rows);

}  // namespace decq
