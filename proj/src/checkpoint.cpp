#include "decq/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace decq {

namespace {

constexpr char kMagic[8] = {'D', 'E', 'C', 'Q', 'A', 'R', 'C', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint64_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("archive " + path + " is truncated");
  return v;
}

std::string read_string(std::istream& in, const std::string& path) {
  const auto n = read_pod<std::uint64_t>(in, path);
  if (n > (1ULL << 32)) throw ConfigError("archive " + path + " is corrupt (string length)");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw ConfigError("archive " + path + " is truncated");
  return s;
}

}  // namespace

void Archive::put(const std::string& name, Eigen::MatrixXd value) {
  for (auto& [n, v] : arrays)
    if (n == name) {
      v = std::move(value);
      return;
    }
  arrays.emplace_back(name, std::move(value));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, v] : arrays)
    if (n == name) return true;
  return false;
}

const Eigen::MatrixXd& Archive::get(const std::string& name) const {
  for (const auto& [n, v] : arrays)
    if (n == name) return v;
  throw ConfigError("archive (" + kind + ") has no array '" + name + "'");
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, Archive::kVersion);
    write_string(out, archive.kind);
    write_string(out, archive.meta);
    write_pod(out, static_cast<std::uint64_t>(archive.arrays.size()));
    for (const auto& [name, m] : archive.arrays) {
      write_string(out, name);
      write_pod(out, static_cast<std::int64_t>(m.rows()));
      write_pod(out, static_cast<std::int64_t>(m.cols()));
      for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) write_pod(out, m(i, j));
    }
    if (!out) throw ConfigError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open archive " + path.string());
  const std::string p = path.string();
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ConfigError(p + " is not a decq archive");
  const auto version = read_pod<std::uint32_t>(in, p);
  if (version != Archive::kVersion)
    throw ConfigError(p + ": unsupported archive version " + std::to_string(version));
  Archive a;
  a.kind = read_string(in, p);
  a.meta = read_string(in, p);
  const auto count = read_pod<std::uint64_t>(in, p);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = read_string(in, p);
    const auto rows = read_pod<std::int64_t>(in, p);
    const auto cols = read_pod<std::int64_t>(in, p);
    if (rows < 0 || cols < 0 || rows * cols > (1LL << 31)) throw ConfigError(p + " is corrupt (array shape)");
    Eigen::MatrixXd m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = read_pod<double>(in, p);
    a.arrays.emplace_back(std::move(name), std::move(m));
  }
  return a;
}

template <typename S>
void put_parameters(Archive& archive, const ParameterStore<S>& store, const std::string& prefix) {
  for (const auto* p : store.all()) archive.put(prefix + p->name, p->value.template cast<double>());
}

template <typename S>
void get_parameters(const Archive& archive, ParameterStore<S>& store, const std::string& prefix) {
  for (auto* p : store.all()) {
    const auto& m = archive.get(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw ShapeError("archive array '" + prefix + p->name + "' has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(p->value.rows()) + "x" +
                       std::to_string(p->value.cols()));
    p->value = m.template cast<S>();
  }
}

template <typename S>
void put_state(Archive& archive, const std::string& prefix, const std::vector<Parameter<S>*>& params,
               const std::vector<Matrix<S>>& values) {
  if (params.size() != values.size()) throw ShapeError("put_state: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    archive.put(prefix + params[i]->name, values[i].template cast<double>());
}

template <typename S>
void get_state(const Archive& archive, const std::string& prefix, const std::vector<Parameter<S>*>& params,
               std::vector<Matrix<S>>& values) {
  if (params.size() != values.size()) throw ShapeError("get_state: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = archive.get(prefix + params[i]->name);
    if (m.rows() != values[i].rows() || m.cols() != values[i].cols())
      throw ShapeError("archive state '" + prefix + params[i]->name + "' has the wrong shape");
    values[i] = m.template cast<S>();
  }
}

#define DECQ_INSTANTIATE(S)                                                                                      \
  template void put_parameters<S>(Archive&, const ParameterStore<S>&, const std::string&);                       \
  template void get_parameters<S>(const Archive&, ParameterStore<S>&, const std::string&);                       \
  template void put_state<S>(Archive&, const std::string&, const std::vector<Parameter<S>*>&,                    \
                             const std::vector<Matrix<S>>&);                                                     \
  template void get_state<S>(const Archive&, const std::string&, const std::vector<Parameter<S>*>&,              \
                             std::vector<Matrix<S>>&);

DECQ_INSTANTIATE(float)
DECQ_INSTANTIATE(double)

}  // namespace decq
