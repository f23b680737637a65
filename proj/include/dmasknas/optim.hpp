#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmasknas/autodiff/tensor.hpp"
#include "dmasknas/error.hpp"

namespace dmasknas {

template <class T>
void check_finite(const std::vector<Tensor<T>>& grads, const char* what) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].all_finite())
      throw NumericError(std::string(what) + ": non-finite gradient in tensor " + std::to_string(i));
}

// Scales all gradients in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g.data()) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& v : g.data()) v *= s;
  }
  return norm;
}

struct SgdConfig {
  double lr = 0.05, momentum = 0.9, weight_decay = 1e-4;
};

// v <- mu v + (g + wd p); p <- p - lr v. Weight decay only where `decay[i]`.
template <class T>
class Sgd {
 public:
  explicit Sgd(SgdConfig c = {}) : cfg_(c) {}
  const SgdConfig& config() const noexcept { return cfg_; }

  void step(std::vector<Tensor<T>*> params, const std::vector<Tensor<T>>& grads,
            const std::vector<bool>& decay) {
    if (params.size() != grads.size() || decay.size() != grads.size())
      throw ShapeError("sgd: parameter/gradient count mismatch");
    check_finite(grads, "sgd");
    if (velocity_.empty())
      for (auto* p : params) velocity_.emplace_back(p->shape());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      if (p.shape() != grads[i].shape() || p.shape() != velocity_[i].shape())
        throw ShapeError("sgd: shape mismatch at tensor " + std::to_string(i));
      const T wd = decay[i] ? T(cfg_.weight_decay) : T(0);
      for (std::size_t k = 0; k < p.size(); ++k) {
        T& v = velocity_[i][k];
        v = T(cfg_.momentum) * v + grads[i][k] + wd * p[k];
        p[k] -= T(cfg_.lr) * v;
      }
    }
    ++steps_;
  }

  std::size_t steps() const noexcept { return steps_; }
  void set_steps(std::size_t s) noexcept { steps_ = s; }
  std::vector<Tensor<T>>& velocity() noexcept { return velocity_; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocity_;
  std::size_t steps_ = 0;
};

struct AdamConfig {
  double lr = 0.01, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig c = {}) : cfg_(c) {}
  const AdamConfig& config() const noexcept { return cfg_; }

  void step(std::vector<Tensor<T>*> params, const std::vector<Tensor<T>>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
    check_finite(grads, "adam");
    if (m_.empty())
      for (auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    ++steps_;
    const double c1 = 1 - std::pow(cfg_.beta1, double(steps_));
    const double c2 = 1 - std::pow(cfg_.beta2, double(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      if (p.shape() != grads[i].shape() || p.shape() != m_[i].shape())
        throw ShapeError("adam: shape mismatch at tensor " + std::to_string(i));
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grads[i][k];
        const double m = cfg_.beta1 * double(m_[i][k]) + (1 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * double(v_[i][k]) + (1 - cfg_.beta2) * g * g;
        m_[i][k] = T(m);
        v_[i][k] = T(v);
        p[k] -= T(cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps));
      }
    }
  }

  std::size_t steps() const noexcept { return steps_; }
  std::vector<Tensor<T>>& first_moment() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moment() noexcept { return v_; }
  void set_steps(std::size_t s) noexcept { steps_ = s; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t steps_ = 0;
};

// Tensor lists as JSON; doubles round-trip exactly through nlohmann's output.
template <class T>
nlohmann::json tensors_to_json(const std::vector<Tensor<T>>& ts) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& t : ts) a.push_back({{"shape", t.shape()}, {"data", t.vec()}});
  return a;
}

template <class T>
std::vector<Tensor<T>> tensors_from_json(const nlohmann::json& a) {
  std::vector<Tensor<T>> out;
  for (const auto& j : a)
    out.emplace_back(j.at("shape").get<Shape>(), j.at("data").get<std::vector<T>>());
  return out;
}

}  // namespace dmasknas
