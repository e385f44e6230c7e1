#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "r3d/ops.hpp"

namespace r3d {

// mt19937_64 with hand-rolled distributions, so streams are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t stream);

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  std::uint64_t next() { return engine_(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(next() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Named tensors in insertion order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

// Every parameter of a store registered as a leaf of one graph.
class BoundParams {
 public:
  BoundParams(Graph& graph, const ParamStore& store);
  // Existing variables under the given names.
  BoundParams(Graph& graph, std::vector<std::string> names, std::span<const Var> vars);

  Graph& graph() const { return *graph_; }
  Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  // Gradients after backward, keyed like the store.
  ParamStore gradients() const;

 private:
  Graph* graph_;
  std::vector<std::string> names_;
  std::map<std::string, Var> vars_;
};

struct LinearParams {
  Var weight;  // [in x out]
  Var bias;    // [out]
  Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct NormParams {
  Var gain;
  Var bias;
  Var operator()(const Var& x) const { return layer_norm(x, gain, bias); }
};

enum class Activation : std::uint8_t { kNone, kRelu };

struct MlpParams {
  std::vector<LinearParams> layers;
  std::vector<Activation> activations;  // one per layer
  Var operator()(const Var& x) const;
};

// Weights uniform in +-1/sqrt(in), zero bias.
void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                 Rng& rng);
void init_norm(ParamStore& store, const std::string& prefix, std::size_t width);
// dims = {in, hidden..., out}; one linear layer per consecutive pair.
void init_mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& dims,
              Rng& rng);

LinearParams bind_linear(const BoundParams& p, const std::string& prefix);
NormParams bind_norm(const BoundParams& p, const std::string& prefix);
// Hidden layers get ReLU; the last layer is linear.
MlpParams bind_mlp(const BoundParams& p, const std::string& prefix, std::size_t layers);

}  // namespace r3d
