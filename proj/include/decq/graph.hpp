#pragma once

#include "decq/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace decq {

/// A named trainable array. `grad` is allocated lazily by the graph.
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns the parameters of one model. Addresses of stored parameters are
/// stable for the lifetime of the store (including across moves), so layers
/// keep raw pointers into it.
template <typename Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<Scalar>& add(const std::string& name, Matrix<Scalar> init, bool trainable = true);
  Parameter<Scalar>& at(const std::string& name);
  const Parameter<Scalar>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter<Scalar>*> all();
  std::vector<const Parameter<Scalar>*> all() const;
  std::vector<Parameter<Scalar>*> trainable();

  void set_trainable(bool on);
  void zero_grad();
  std::size_t size() const { return params_.size(); }
  Index parameter_count() const;
  std::uint64_t fingerprint() const;

  /// Copies values position by position from a store with identical shapes.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Tape-based reverse-mode differentiation over dense row-major matrices.
/// Nodes are appended in evaluation order; `backward` walks them in reverse.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat& out_grad)>;

  Var constant(Mat value);
  Var variable(Mat value);
  Var param(Parameter<Scalar>& p);

  /// Appends a node computed from `inputs`. It requires grad iff any input does.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Mat& value(Var v) const;
  /// Gradient accumulated on `v`; zeros if none reached it.
  Mat grad(Var v) const;
  bool requires_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    if (!requires_grad(v)) return;
    auto& node = nodes_[v.id];
    if (node.grad.size() == 0)
      node.grad = g;
    else
      node.grad += g;
  }

  /// Seeds d(loss)/d(loss) = 1 on a 1x1 node and propagates. Parameter
  /// gradients are added into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat own;
    const Mat* external = nullptr;
    Mat grad;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace decq
