// SPDX-License-Identifier: Apache-2.0
//
// Named trainable parameter collection. Every tensor has a stable path
// (e.g. "encoder.block0.attn.wq"), a trainable flag and optimizer
// moments. Registration order is stable and defines serialization order.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "dapmae/autodiff.hpp"
#include "dapmae/common.hpp"

namespace dapmae {

template <typename T>
struct Param {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  std::string path;
  Mat value;
  Mat grad;       // accumulated by ParamStore::pull_grads
  Mat adam_m;
  Mat adam_v;
  bool trainable = true;

  bool has_grad = false;
};

template <typename T>
class ParamStore {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

  /// Registers a tensor; normal(0, sigma) init unless sigma == 0.
  int add(const std::string& path, Eigen::Index rows, Eigen::Index cols,
          Rng& rng, double sigma, bool trainable = true) {
    Mat v(rows, cols);
    if (sigma == 0.0) {
      v.setZero();
    } else {
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
          v(r, c) = T(rng.normal() * sigma);
    }
    return add_value(path, std::move(v), trainable);
  }

  int add_constant(const std::string& path, Eigen::Index rows, Eigen::Index cols,
                   T fill, bool trainable = true) {
    Mat v(rows, cols);
    v.setConstant(fill);
    return add_value(path, std::move(v), trainable);
  }

  int add_value(const std::string& path, Mat v, bool trainable) {
    if (index_.count(path)) throw ConfigError("duplicate parameter path: " + path);
    Param<T> p;
    p.path = path;
    p.adam_m = Mat::Zero(v.rows(), v.cols());
    p.adam_v = Mat::Zero(v.rows(), v.cols());
    p.value = std::move(v);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    index_[path] = static_cast<int>(params_.size()) - 1;
    return static_cast<int>(params_.size()) - 1;
  }

  bool contains(const std::string& path) const { return index_.count(path) > 0; }

  std::size_t index_of(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
    return static_cast<std::size_t>(it->second);
  }

  Param<T>& at(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
    return params_[static_cast<std::size_t>(it->second)];
  }
  const Param<T>& at(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
    return params_[static_cast<std::size_t>(it->second)];
  }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.path.rfind(prefix, 0) == 0) p.trainable = trainable;
  }

  /// Binds every parameter as a graph leaf for one forward/backward pass.
  /// Trainable parameters become differentiable leaves.
  void bind(Graph<T>& g) {
    leaves_.clear();
    leaves_.reserve(params_.size());
    for (auto& p : params_) leaves_.push_back(g.leaf(p.value, p.trainable));
  }

  Ten<T> leaf(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
    return leaves_[static_cast<std::size_t>(it->second)];
  }

  /// Copies gradients from the graph back into the store after backward.
  /// Frozen parameters get no gradient entry.
  void pull_grads(const Graph<T>& g) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.trainable) {
        p.grad = g.grad(leaves_[i]);
        p.has_grad = true;
      } else {
        p.has_grad = false;
      }
    }
  }

  void clear_grads() {
    for (auto& p : params_) {
      p.grad.resize(0, 0);
      p.has_grad = false;
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, int> index_;
  std::vector<Ten<T>> leaves_;
};

}  // namespace dapmae
