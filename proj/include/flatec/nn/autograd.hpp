#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatec/nn/field.hpp"
#include "flatec/rng.hpp"

namespace flatec::nn {

template <class T>
struct Node {
  RealField<T> value;
  std::vector<T> grad;
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
  const Shape& shape() const { return value.shape; }
  std::size_t size() const { return value.size(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(RealField<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> leaf(RealField<T> value, bool requires_grad = true) {
  auto n = constant(std::move(value));
  n->requires_grad = requires_grad;
  return n;
}

/// Reverse-mode tape. Ops append adjoint closures while recording; backward()
/// replays them in reverse order. A non-recording graph runs pure inference.
template <class T>
class Graph {
 public:
  explicit Graph(bool recording = true, bool training = false, std::uint64_t seed = 0)
      : recording_(recording), training_(training), seed_(seed) {}

  bool recording() const { return recording_; }
  bool training() const { return training_; }

  bool wants_grad(std::initializer_list<const Var<T>*> inputs) const {
    if (!recording_) return false;
    for (const Var<T>* v : inputs)
      if (*v && (*v)->requires_grad) return true;
    return false;
  }

  /// Fresh output node; requires_grad when any input does and we record.
  Var<T> result(Shape shape, std::initializer_list<const Var<T>*> inputs) {
    auto n = std::make_shared<Node<T>>();
    n->value = RealField<T>(std::move(shape));
    n->requires_grad = wants_grad(inputs);
    return n;
  }

  void push(std::function<void()> adjoint) { tape_.push_back(std::move(adjoint)); }

  void backward(const Var<T>& root) {
    auto& g = root->grad_buffer();
    std::fill(g.begin(), g.end(), T{1});
    run_tape();
  }

  void backward(const Var<T>& root, const std::vector<T>& seed) {
    if (seed.size() != root->size()) throw std::invalid_argument("Graph::backward: seed size mismatch");
    root->grad_buffer() = seed;
    run_tape();
  }

  /// Per-op seed for stochastic layers (dropout), derived from the graph seed.
  std::uint64_t next_seed() { return mix_seed(seed_, counter_++); }

  std::size_t tape_size() const { return tape_.size(); }

 private:
  void run_tape() {
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
  }

  bool recording_;
  bool training_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::vector<std::function<void()>> tape_;
};

template <class T>
struct Parameter {
  std::string id;
  Var<T> var;
  bool trainable = true;
};

/// Owns every named parameter of a model, in insertion order.
template <class T>
class ParameterStore {
 public:
  Var<T> add(const std::string& id, RealField<T> value, bool trainable = true) {
    if (index_.count(id)) throw std::invalid_argument("duplicate parameter id '" + id + "'");
    index_[id] = params_.size();
    params_.push_back({id, leaf(std::move(value), trainable), trainable});
    return params_.back().var;
  }

  Var<T> get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + id + "'");
    return params_[it->second].var;
  }

  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.var->grad.assign(p.var->value.size(), T{0});
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var->value.size();
    return n;
  }

  template <class U>
  void copy_values_from(const ParameterStore<U>& other) {
    for (const auto& p : other.all()) {
      auto dst = get(p.id);
      if (dst->value.shape != p.var->value.shape)
        throw std::invalid_argument("parameter '" + p.id + "' shape mismatch");
      for (std::size_t i = 0; i < dst->value.size(); ++i) dst->value[i] = static_cast<T>(p.var->value[i]);
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace flatec::nn
