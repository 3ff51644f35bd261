#pragma once

// Named parameter registry plus SGD with momentum and Adam.

#include <string>
#include <unordered_map>
#include <vector>

#include "mid/tensor.hpp"

namespace mid {

// Ordered registry of named tensors. Parameters take gradients; buffers
// (e.g. batch norm running stats) are carried along for checkpointing only.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool is_buffer;
  };

  Tensor param(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    insert(name, t, false);
    return t;
  }

  Tensor buffer(const std::string& name, Tensor t) {
    t.set_requires_grad(false);
    insert(name, t, true);
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (!e.is_buffer) out.push_back(e.tensor);
    return out;
  }

  std::vector<Tensor> parameters_with_prefix(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (!e.is_buffer && e.name.rfind(prefix, 0) == 0) out.push_back(e.tensor);
    return out;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    MID_CHECK(it != index_.end(), "no parameter named '" << name << "'");
    return entries_[it->second].tensor;
  }

  int64_t num_values(bool include_buffers = false) const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (include_buffers || !e.is_buffer) n += e.tensor.numel();
    return n;
  }

 private:
  void insert(const std::string& name, const Tensor& t, bool is_buffer) {
    MID_CHECK(!name.empty(), "empty parameter name");
    MID_CHECK(index_.find(name) == index_.end(), "duplicate parameter name '" << name << "'");
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, t, is_buffer});
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

inline void zero_grads(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, float lr, float momentum = 0.9f)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    MID_CHECK(!params_.empty(), "optimizer created with no parameters");
    velocity_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(size_t(params_[i].numel()), 0.0f);
  }

  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }
  int64_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      MID_CHECK(p.has_grad(), "sgd step: parameter " << i << " has no gradient");
      const float* g = p.grad().data();
      float* v = velocity_[i].data();
      float* w = p.data();
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        v[j] = momentum_ * v[j] + g[j];
        w[j] -= lr_ * v[j];
      }
      p.zero_grad();
    }
    ++steps_;
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  float lr_;
  float momentum_;
  int64_t steps_ = 0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
       float eps = 1e-8f)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    MID_CHECK(!params_.empty(), "optimizer created with no parameters");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(size_t(params_[i].numel()), 0.0f);
      v_[i].assign(size_t(params_[i].numel()), 0.0f);
    }
  }

  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }
  int64_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }

  void step() {
    ++steps_;
    const float bc1 = 1.0f - std::pow(beta1_, float(steps_));
    const float bc2 = 1.0f - std::pow(beta2_, float(steps_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      MID_CHECK(p.has_grad(), "adam step: parameter " << i << " has no gradient");
      const float* g = p.grad().data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      float* w = p.data();
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
        const float mh = m[j] / bc1;
        const float vh = v[j] / bc2;
        w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  float lr_;
  float beta1_, beta2_, eps_;
  int64_t steps_ = 0;
};

}  // namespace mid
