#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmasknas/autodiff/tensor.hpp"
#include "dmasknas/gumbel.hpp"

namespace dmasknas {

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

enum class Init { he_uniform, fan_in_uniform, ones, zeros };

// Values depend only on (seed, name, shape), so two networks sharing a
// parameter name and shape start identical.
template <class T>
Tensor<T> init_param(const std::string& name, const Shape& shape, std::size_t fan_in, Init kind,
                     std::uint64_t seed) {
  Tensor<T> t(shape);
  if (kind == Init::ones) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(1);
    return t;
  }
  if (kind == Init::zeros) return t;
  const double bound = kind == Init::he_uniform ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                                : std::sqrt(1.0 / static_cast<double>(fan_in));
  auto rng = make_stream(seed, stable_hash(name));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>((2 * uniform01(rng) - 1) * bound);
  return t;
}

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool decay = true;  // weight decay applies
  };

  std::size_t add(std::string name, Tensor<T> value, bool decay = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back(Entry{std::move(name), std::move(value), decay});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  Entry& operator[](std::size_t i) { return entries_.at(i); }
  const Entry& operator[](std::size_t i) const { return entries_.at(i); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& value(const std::string& name) const { return entries_[index(name)].value; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr std::size_t kNoParam = static_cast<std::size_t>(-1);

}  // namespace dmasknas
