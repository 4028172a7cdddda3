#include "decq/graph.hpp"

namespace decq {

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::add(const std::string& name, Matrix<Scalar> init, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<Scalar>>();
  p->name = name;
  p->value = std::move(init);
  p->trainable = trainable;
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename Scalar>
const Parameter<Scalar>& ParameterStore<Scalar>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ParameterStore<Scalar>::all() {
  std::vector<Parameter<Scalar>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> ParameterStore<Scalar>::all() const {
  std::vector<const Parameter<Scalar>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ParameterStore<Scalar>::trainable() {
  std::vector<Parameter<Scalar>*> out;
  for (auto& p : params_)
    if (p->trainable) out.push_back(p.get());
  return out;
}

template <typename Scalar>
void ParameterStore<Scalar>::set_trainable(bool on) {
  for (auto& p : params_) p->trainable = on;
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename Scalar>
Index ParameterStore<Scalar>::parameter_count() const {
  Index n = 0;
  for (auto& p : params_) n += p->value.size();
  return n;
}

template <typename Scalar>
std::uint64_t ParameterStore<Scalar>::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto& p : params_) h = decq::fingerprint(p->value, h);
  return h;
}

template <typename Scalar>
void ParameterStore<Scalar>::copy_values_from(const ParameterStore& other) {
  if (other.size() != size()) throw ShapeError("parameter store size mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = *other.params_[i];
    auto& dst = *params_[i];
    if (src.value.rows() != dst.value.rows() || src.value.cols() != dst.value.cols())
      throw ShapeError("parameter mismatch while copying: " + dst.name);
    dst.value = src.value;
  }
}

template <typename Scalar>
Var Graph<Scalar>::constant(Mat value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var Graph<Scalar>::variable(Mat value) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var Graph<Scalar>::param(Parameter<Scalar>& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var Graph<Scalar>::record(Mat value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  for (Var v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
const typename Graph<Scalar>::Mat& Graph<Scalar>::value(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.external ? *n.external : n.own;
}

template <typename Scalar>
typename Graph<Scalar>::Mat Graph<Scalar>::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.size() == 0) return Mat::Zero(value(v).rows(), value(v).cols());
  return n.grad;
}

template <typename Scalar>
void Graph<Scalar>::backward(Var loss) {
  const Mat& l = value(loss);
  if (l.rows() != 1 || l.cols() != 1) throw ShapeError("backward: loss must be 1x1");
  if (!requires_grad(loss)) return;
  nodes_[loss.id].grad = Mat::Constant(1, 1, Scalar(1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace decq
