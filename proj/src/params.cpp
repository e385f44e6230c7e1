#include "r3d/params.hpp"

#include <cmath>
#include <numbers>

namespace r3d {

Rng::Rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  engine_.seed(seq);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next() % span);
}

double Rng::normal() {
  // Box-Muller; one draw per call keeps the stream simple to reason about.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ContractError("param store: duplicate parameter '" + name + "'");
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("param store: no parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("param store: no parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : values_) n += t.size();
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].shape != other.values_[i].shape || values_[i].data != other.values_[i].data)
      return false;
  }
  return true;
}

BoundParams::BoundParams(Graph& graph, const ParamStore& store)
    : graph_(&graph), names_(store.names()) {
  for (const auto& name : names_) vars_[name] = graph.parameter(store.at(name));
}

BoundParams::BoundParams(Graph& graph, std::vector<std::string> names, std::span<const Var> vars)
    : graph_(&graph), names_(std::move(names)) {
  if (names_.size() != vars.size()) throw ContractError("bound params: name and variable counts differ");
  for (std::size_t i = 0; i < names_.size(); ++i) vars_[names_[i]] = vars[i];
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("bound params: no parameter '" + name + "'");
  return it->second;
}

ParamStore BoundParams::gradients() const {
  ParamStore grads;
  for (const auto& name : names_) grads.add(name, graph_->grad(vars_.at(name)));
  return grads;
}

Var MlpParams::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (activations[i] == Activation::kRelu) h = relu(h);
  }
  return h;
}

void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                 Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = Tensor::matrix(in, out);
  for (double& v : w.data) v = rng.uniform(-bound, bound);
  store.add(prefix + ".weight", std::move(w));
  store.add(prefix + ".bias", Tensor(Shape{out}, 0.0));
}

void init_norm(ParamStore& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".gain", Tensor(Shape{width}, 1.0));
  store.add(prefix + ".bias", Tensor(Shape{width}, 0.0));
}

void init_mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& dims,
              Rng& rng) {
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    init_linear(store, prefix + "." + std::to_string(i), dims[i], dims[i + 1], rng);
}

LinearParams bind_linear(const BoundParams& p, const std::string& prefix) {
  return {p[prefix + ".weight"], p[prefix + ".bias"]};
}

NormParams bind_norm(const BoundParams& p, const std::string& prefix) {
  return {p[prefix + ".gain"], p[prefix + ".bias"]};
}

MlpParams bind_mlp(const BoundParams& p, const std::string& prefix, std::size_t layers) {
  MlpParams mlp;
  for (std::size_t i = 0; i < layers; ++i) {
    mlp.layers.push_back(bind_linear(p, prefix + "." + std::to_string(i)));
    mlp.activations.push_back(i + 1 < layers ? Activation::kRelu : Activation::kNone);
  }
  return mlp;
}

}  // namespace r3d
