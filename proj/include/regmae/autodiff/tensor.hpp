#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regmae/error.hpp"

namespace regmae::ad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class S>
using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowArray = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Contiguous row-major n-dimensional array.
template <class S>
struct Tensor {
  Shape shape;
  Vec<S> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Vec<S>::Zero(numel(shape))) {}
  Tensor(Shape s, Vec<S> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == numel(shape), ErrorKind::Validation,
            "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, S v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }

  std::int64_t size() const { return data.size(); }
  int rank() const { return int(shape.size()); }
  std::int64_t dim(int i) const { return shape.at(std::size_t(i < 0 ? rank() + i : i)); }
  /// Leading dimensions collapsed: the tensor viewed as [rows, last].
  std::int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::int64_t rows() const { return cols() ? size() / cols() : 0; }

  Eigen::Map<RowMatrix<S>> matrix() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix<S>> matrix() const { return {data.data(), rows(), cols()}; }
  Eigen::Map<RowArray<S>> array2d() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const RowArray<S>> array2d() const { return {data.data(), rows(), cols()}; }

  S item() const {
    require(size() == 1, ErrorKind::Validation, "item() on a tensor with " + std::to_string(size()) + " elements");
    return data[0];
  }

  template <class T>
  Tensor<T> cast() const {
    return Tensor<T>(shape, data.template cast<T>());
  }
};

/// Named trainable array with an accumulated gradient.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Vec<S> grad;
  bool trainable = true;

  void zero_grad() { grad = Vec<S>::Zero(value.size()); }
};

/// Owns parameters in registration order; layers keep stable pointers.
template <class S>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter<S>& add(const std::string& name, Tensor<S> value) {
    require(find(name) == nullptr, ErrorKind::Validation, "duplicate parameter name " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->value = std::move(value);
    p->zero_grad();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<S>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<S>* find(const std::string& name) const {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (auto& p : params_) n += p->value.size();
    return n;
  }

  std::size_t count() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
};

}  // namespace regmae::ad
