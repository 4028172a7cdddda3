#pragma once

#include "decq/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace decq {

/// Procedural corpus of colored, textured shapes. The class label is the
/// shape; foreground color is an independent attribute.
struct SyntheticSpec {
  int classes = 10;  // shapes, at most shape_count()
  int colors = 8;    // foreground palette size, at most palette_size()
  Index samples = 1000;
  Index image_size = 64;
  std::uint64_t seed = 0;

  static int shape_count();
  static int palette_size();
  void validate() const;
};

/// In-memory image corpus. Images are (H*W) x 3 channels-last in [-1, 1].
struct Dataset {
  std::vector<Matrix<float>> images;
  std::vector<int> labels;
  std::vector<int> colors;  // -1 when unknown
  std::vector<std::string> names;
  std::vector<std::string> class_names;
  Index image_size = 0;

  std::size_t size() const { return images.size(); }
  int class_count() const { return static_cast<int>(class_names.size()); }

  template <typename S>
  ImageBatch<S> batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

  Dataset subset(std::span<const std::size_t> indices) const;
};

Dataset make_synthetic(const SyntheticSpec& spec);

/// Renders one synthetic image (exposed for tests and previews).
Matrix<float> render_shape(int shape, int color, Index image_size, std::uint64_t seed);

/// Reads `root/<class>/<file>`; unreadable files are skipped with a warning
/// on stderr. Images are resized to image_size x image_size.
Dataset ingest_folder(const std::filesystem::path& root, Index image_size);

struct Split {
  Dataset train;
  Dataset val;
};

/// 90/10 split decided by a hash of each item's name.
Split split_by_name(const Dataset& data);

/// Seeded permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/// Deterministic 64-bit mix of (seed, stream), used to derive per-step rngs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// FNV-1a hash of a string.
std::uint64_t hash_string(const std::string& s);

/// Cycles through shuffled epochs; batch `step` is a pure function of
/// (seed, step), so a resumed run sees the same data.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> indices_for_step(std::uint64_t step) const;

 private:
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
};

}  // namespace decq
