#include "decq/data.hpp"
#include "decq/image_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace decq {

namespace {

constexpr std::array<std::array<float, 3>, 10> kPalette{{
    {0.90f, 0.15f, 0.10f},  // red
    {0.15f, 0.80f, 0.20f},  // green
    {0.15f, 0.30f, 0.95f},  // blue
    {0.95f, 0.90f, 0.10f},  // yellow
    {0.85f, 0.20f, 0.85f},  // magenta
    {0.10f, 0.85f, 0.90f},  // cyan
    {1.00f, 0.55f, 0.05f},  // orange
    {0.95f, 0.95f, 0.95f},  // white
    {0.50f, 0.20f, 0.80f},  // purple
    {0.55f, 0.35f, 0.15f},  // brown
}};

constexpr std::array<const char*, 10> kShapeNames{"circle", "square", "triangle", "diamond", "plus",
                                                  "ring",   "hbar",   "vbar",     "xcross",  "halfdisc"};

bool inside(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0: return r < 1.0;
    case 1: return std::max(au, av) < 0.8;
    case 2: return v > -0.8 && v < 0.8 && au < 0.9 * (v + 0.8) / 1.6;
    case 3: return au + av < 1.0;
    case 4: return (au < 0.3 && av < 0.95) || (av < 0.3 && au < 0.95);
    case 5: return r > 0.55 && r < 1.0;
    case 6: return au < 1.0 && av < 0.35;
    case 7: return av < 1.0 && au < 0.35;
    case 8: return std::abs(au - av) < 0.31 && std::max(au, av) < 0.85;
    case 9: return r < 1.0 && v > -0.1;
    default: return false;
  }
}

}  // namespace

int SyntheticSpec::shape_count() { return static_cast<int>(kShapeNames.size()); }
int SyntheticSpec::palette_size() { return static_cast<int>(kPalette.size()); }

void SyntheticSpec::validate() const {
  if (classes < 1 || classes > shape_count())
    throw ConfigError("synthetic: classes must be in [1, " + std::to_string(shape_count()) + "]");
  if (colors < 1 || colors > palette_size())
    throw ConfigError("synthetic: colors must be in [1, " + std::to_string(palette_size()) + "]");
  if (samples < 1) throw ConfigError("synthetic: samples must be positive");
  if (image_size < 8) throw ConfigError("synthetic: image_size must be at least 8");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Matrix<float> render_shape(int shape, int color, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(size);
  const double radius = s * (0.25 + 0.13 * unit(rng));
  const double cx = s / 2 + (unit(rng) - 0.5) * s / 4;
  const double cy = s / 2 + (unit(rng) - 0.5) * s / 4;
  const double bg = 0.15 + 0.2 * unit(rng);
  const double bg_slope = (unit(rng) - 0.5) * 0.2;
  const double theta = unit(rng) * 3.14159265358979;
  const double period = 3.0 + 3.0 * unit(rng);
  const auto& fg = kPalette[static_cast<std::size_t>(color)];
  std::normal_distribution<double> noise(0.0, 0.02);

  Matrix<float> img(size * size, 3);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / radius;
          const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      const double cover = hits / 4.0;
      const double phase = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) / period;
      const double tex = 0.8 + 0.2 * std::sin(2.0 * 3.14159265358979 * phase);
      const double back = bg + bg_slope * (static_cast<double>(y) / s - 0.5);
      for (int c = 0; c < 3; ++c) {
        double value = cover * fg[static_cast<std::size_t>(c)] * tex + (1.0 - cover) * back + noise(rng);
        value = std::clamp(value, 0.0, 1.0);
        img(y * size + x, c) = static_cast<float>(2.0 * value - 1.0);
      }
    }
  }
  return img;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.image_size = spec.image_size;
  for (int c = 0; c < spec.classes; ++c) d.class_names.emplace_back(kShapeNames[static_cast<std::size_t>(c)]);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> pick_shape(0, spec.classes - 1);
  std::uniform_int_distribution<int> pick_color(0, spec.colors - 1);
  for (Index i = 0; i < spec.samples; ++i) {
    const int shape = pick_shape(rng);
    const int color = pick_color(rng);
    d.images.push_back(render_shape(shape, color, spec.image_size, mix_seed(spec.seed, static_cast<std::uint64_t>(i))));
    d.labels.push_back(shape);
    d.colors.push_back(color);
    char name[64];
    std::snprintf(name, sizeof(name), "synthetic_%06lld", static_cast<long long>(i));
    d.names.emplace_back(name);
  }
  return d;
}

Dataset ingest_folder(const std::filesystem::path& root, Index image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ConfigError("dataset folder not found: " + root.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());

  Dataset d;
  d.image_size = image_size;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    d.class_names.push_back(classes[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto img = read_image(f, image_size);
      if (!img) {
        std::cerr << "warning: skipping unreadable file " << f.string() << "\n";
        continue;
      }
      d.images.push_back(std::move(*img));
      d.labels.push_back(static_cast<int>(c));
      d.colors.push_back(-1);
      d.names.push_back(classes[c].filename().string() + "/" + f.filename().string());
    }
  }
  if (d.images.empty()) throw ConfigError("dataset folder contains no readable images: " + root.string());
  return d;
}

template <typename S>
ImageBatch<S> Dataset::batch(std::span<const std::size_t> indices) const {
  ImageBatch<S> out(static_cast<Index>(indices.size()), image_size, image_size, 3);
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.image(static_cast<Index>(i)) = images.at(indices[i]).template cast<S>();
  return out;
}

template ImageBatch<float> Dataset::batch<float>(std::span<const std::size_t>) const;
template ImageBatch<double> Dataset::batch<double>(std::span<const std::size_t>) const;

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.image_size = image_size;
  d.class_names = class_names;
  for (auto i : indices) {
    d.images.push_back(images.at(i));
    d.labels.push_back(labels.at(i));
    d.colors.push_back(colors.at(i));
    d.names.push_back(names.at(i));
  }
  return d;
}

Split split_by_name(const Dataset& data) {
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (hash_string(data.names[i]) % 10 == 0)
      val.push_back(i);
    else
      train.push_back(i);
  }
  if (train.empty()) throw ConfigError("dataset split produced an empty training set");
  return Split{data.subset(train), data.subset(val)};
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : n_(dataset_size), batch_(batch_size), seed_(seed) {
  if (n_ == 0) throw ConfigError("batch sampler: empty dataset");
  if (batch_ == 0) throw ConfigError("batch sampler: batch size must be positive");
}

std::vector<std::size_t> BatchSampler::indices_for_step(std::uint64_t step) const {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  std::uint64_t pos = step * batch_;
  while (out.size() < batch_) {
    const std::uint64_t epoch = pos / n_;
    const auto perm = shuffled_indices(n_, mix_seed(seed_, epoch));
    for (std::size_t i = pos % n_; i < n_ && out.size() < batch_; ++i, ++pos) out.push_back(perm[i]);
  }
  return out;
}

}  // namespace decq
