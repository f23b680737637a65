#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"

namespace dmasknas {

// Uniform in [0, 1) from the top 53 bits of one engine draw. Avoids the
// implementation-defined std::uniform_real_distribution so streams are
// portable across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Inverse-CDF Gumbel(0, 1) sample for a given uniform draw.
inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

inline std::vector<double> sample_gumbel_noise(std::size_t count, std::mt19937_64& rng) {
  std::vector<double> eps(count);
  for (auto& e : eps) e = gumbel_from_uniform(uniform01(rng));
  return eps;
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id),
                    static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
  return std::mt19937_64(seq);
}

inline std::string engine_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void restore_engine(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw IoError("corrupt random engine state");
}

// tau0 * exp(-rate * epoch), stepped once per epoch.
inline double temperature_at(double tau0, double rate, std::size_t epoch) {
  return tau0 * std::exp(-rate * static_cast<double>(epoch));
}

// Noise-free selection: index of the largest alpha, lowest index on ties.
template <class T>
std::size_t argmax_option(std::span<const T> alpha) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < alpha.size(); ++i)
    if (alpha[i] > alpha[best]) best = i;
  return best;
}

// g_i = exp((alpha_i + eps_i) / tau) / sum_j exp((alpha_j + eps_j) / tau).
// eps is constant; the gradient flows to alpha only.
template <class T>
Var gumbel_softmax(Tape<T>& t, Var alpha, std::span<const double> eps, double tau) {
  if (!(tau > 0)) throw NumericError("gumbel_softmax: temperature must be positive");
  const Tensor<T>& av = t.value(alpha);
  if (av.rank() != 1 || av.size() != eps.size())
    throw ShapeError("gumbel_softmax: alpha " + to_string(av.shape()) + " vs " +
                     std::to_string(eps.size()) + " noise values");
  const std::size_t m = av.size();
  std::vector<double> z(m);
  for (std::size_t i = 0; i < m; ++i) z[i] = (static_cast<double>(av[i]) + eps[i]) / tau;
  const double mx = *std::max_element(z.begin(), z.end());
  double denom = 0;
  for (auto& v : z) denom += (v = std::exp(v - mx));
  Tensor<T> g(Shape{m});
  for (std::size_t i = 0; i < m; ++i) g[i] = static_cast<T>(z[i] / denom);
  std::vector<T> saved = g.vec();
  return t.record("gumbel_softmax", std::move(g), {alpha}, {}, m,
                  [alpha, saved = std::move(saved), tau](Tape<T>& tp, const Tensor<T>& dg) {
                    const std::size_t m = saved.size();
                    T dot = 0;
                    for (std::size_t i = 0; i < m; ++i) dot += saved[i] * dg[i];
                    Tensor<T> da(Shape{m});
                    for (std::size_t i = 0; i < m; ++i)
                      da[i] = saved[i] * (dg[i] - dot) / static_cast<T>(tau);
                    tp.accumulate(alpha, std::move(da));
                  });
}

// A categorical architecture decision with trainable logits and its own
// noise stream.
template <class T>
class GumbelChoice {
 public:
  GumbelChoice(std::string name, std::vector<std::string> labels, std::uint64_t seed,
               std::uint64_t stream_id)
      : name_(std::move(name)),
        labels_(checked_labels(name_, std::move(labels))),
        alpha_(Shape{labels_.size()}, T(0)),
        rng_(make_stream(seed, stream_id)) {}

  const std::string& name() const noexcept { return name_; }
  std::size_t arity() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  Tensor<T>& alpha() noexcept { return alpha_; }
  const Tensor<T>& alpha() const noexcept { return alpha_; }

  std::vector<double> draw_noise() { return sample_gumbel_noise(arity(), rng_); }
  std::size_t argmax() const { return argmax_option<T>(alpha_.data()); }

  std::string rng_state() const { return engine_state(rng_); }
  void set_rng_state(const std::string& s) { restore_engine(rng_, s); }

 private:
  static std::vector<std::string> checked_labels(const std::string& name,
                                                 std::vector<std::string> labels) {
    if (labels.empty()) throw ConfigError("choice '" + name + "' has no options");
    return labels;
  }

  std::string name_;
  std::vector<std::string> labels_;
  Tensor<T> alpha_;
  std::mt19937_64 rng_;
};

}  // namespace dmasknas
