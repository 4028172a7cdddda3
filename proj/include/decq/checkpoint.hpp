#pragma once

#include "decq/graph.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace decq {

/// Versioned binary archive: a kind tag, a JSON metadata string, and named
/// double-precision arrays in insertion order.
struct Archive {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::string meta = "{}";
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;

  void put(const std::string& name, Eigen::MatrixXd value);
  bool contains(const std::string& name) const;
  /// Throws ConfigError naming the missing array.
  const Eigen::MatrixXd& get(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws ConfigError on a missing file, wrong magic, version or truncation.
Archive read_archive(const std::filesystem::path& path);

/// Stores every parameter of `store` as `prefix + name`.
template <typename S>
void put_parameters(Archive& archive, const ParameterStore<S>& store, const std::string& prefix = "");

/// Loads every parameter of `store` from `prefix + name`, checking shapes.
template <typename S>
void get_parameters(const Archive& archive, ParameterStore<S>& store, const std::string& prefix = "");

/// Named per-parameter state (optimizer moments, EMA shadows).
template <typename S>
void put_state(Archive& archive, const std::string& prefix, const std::vector<Parameter<S>*>& params,
               const std::vector<Matrix<S>>& values);
template <typename S>
void get_state(const Archive& archive, const std::string& prefix, const std::vector<Parameter<S>*>& params,
               std::vector<Matrix<S>>& values);

}  // namespace decq
