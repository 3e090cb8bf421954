#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "idol/rng.hpp"
#include "idol/tensor.hpp"

namespace idol {

// Initialization rule attached to each learnable tensor.
enum class Init {
  FanIn,  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in = numel / dim0
  Zero,   // exact zeros (biases, gated output projections)
  One,    // ones (normalization gains)
};

// Named collection of learnable tensors. Iteration order is lexicographic by
// name, and each tensor is initialized from its own seed-derived stream, so
// initialization is independent of registration order and of which other
// tensors exist.
template <typename T>
class ParameterStore {
 public:
  void define(const std::string& name, std::vector<int> shape, Init init) {
    if (tensors_.count(name)) throw PreconditionError("duplicate parameter name: " + name);
    tensors_.emplace(name, Tensor<T>(std::move(shape)));
    kinds_.emplace(name, init);
  }

  void initialize(uint64_t seed) {
    for (auto& [name, tensor] : tensors_) initialize_one(name, tensor, seed);
  }

  // Re-initializes a subset (used when resuming into a larger architecture).
  void initialize_one_name(const std::string& name, uint64_t seed) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw PreconditionError("unknown parameter: " + name);
    initialize_one(name, it->second, seed);
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor<T>& tensor(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw PreconditionError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& tensor(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw PreconditionError("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }
  std::map<std::string, Tensor<T>>& tensors() { return tensors_; }
  Init kind(const std::string& name) const { return kinds_.at(name); }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.numel();
    return n;
  }

  size_t count() const { return tensors_.size(); }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : tensors_) out.define(name, t.shape, kinds_.at(name));
    for (auto& [name, t] : out.tensors()) {
      const Tensor<T>& src = tensors_.at(name);
      for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<U>(src.data[i]);
    }
    return out;
  }

 private:
  void initialize_one(const std::string& name, Tensor<T>& tensor, uint64_t seed) {
    switch (kinds_.at(name)) {
      case Init::Zero:
        std::fill(tensor.data.begin(), tensor.data.end(), T(0));
        break;
      case Init::One:
        std::fill(tensor.data.begin(), tensor.data.end(), T(1));
        break;
      case Init::FanIn: {
        Rng rng = named_stream(seed, "init." + name);
        const int64_t fan_in = tensor.shape.empty() ? 1 : tensor.numel() / tensor.shape[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
        for (auto& v : tensor.data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
  }

  std::map<std::string, Tensor<T>> tensors_;
  std::map<std::string, Init> kinds_;
};

}  // namespace idol
