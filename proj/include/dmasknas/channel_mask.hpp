#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/gumbel.hpp"

namespace dmasknas {

inline void validate_mask_options(std::span<const std::size_t> options, std::size_t k) {
  if (options.empty()) throw ConfigError("channel mask needs at least one option");
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i] == 0) throw ConfigError("channel option must be positive");
    if (options[i] > k)
      throw ConfigError("channel option " + std::to_string(options[i]) +
                        " exceeds mask length " + std::to_string(k));
    if (i > 0 && options[i] <= options[i - 1])
      throw ConfigError("channel options must be strictly increasing (duplicate or "
                        "unordered value " + std::to_string(options[i]) + ")");
  }
}

// M[j] = sum of g_i over options i > j: leading ones, trailing zeros.
inline std::vector<double> build_mask(std::span<const std::size_t> options,
                                      std::span<const double> g, std::size_t k) {
  validate_mask_options(options, k);
  if (g.size() != options.size())
    throw ShapeError("mask weights do not match option count");
  std::vector<double> m(k, 0.0);
  for (std::size_t i = 0; i < options.size(); ++i)
    for (std::size_t j = 0; j < options[i]; ++j) m[j] += g[i];
  return m;
}

template <class T>
Var build_mask(Tape<T>& t, Var g, std::vector<std::size_t> options, std::size_t k) {
  validate_mask_options(options, k);
  const Tensor<T>& gv = t.value(g);
  if (gv.size() != options.size())
    throw ShapeError("mask weights do not match option count");
  Tensor<T> m(Shape{k});
  for (std::size_t i = 0; i < options.size(); ++i)
    for (std::size_t j = 0; j < options[i]; ++j) m[j] += gv[i];
  return t.record("build_mask", std::move(m), {g}, {}, 0,
                  [g, options = std::move(options)](Tape<T>& tp, const Tensor<T>& dm) {
                    Tensor<T> dg(tp.shape(g));
                    for (std::size_t i = 0; i < options.size(); ++i) {
                      T acc = 0;
                      for (std::size_t j = 0; j < options[i]; ++j) acc += dm[j];
                      dg[i] = acc;
                    }
                    tp.accumulate(g, std::move(dg));
                  });
}

// Searchable channel count: options over a maximum width k.
template <class T>
struct ChannelMask {
  std::size_t k = 0;
  std::vector<std::size_t> options;
  GumbelChoice<T> gumbel;

  ChannelMask(std::vector<std::size_t> opts, GumbelChoice<T> choice)
      : k(opts.empty() ? 0 : opts.back()), options(std::move(opts)), gumbel(std::move(choice)) {
    validate_mask_options(options, k);
    if (gumbel.arity() != options.size())
      throw ConfigError("mask choice arity does not match options");
  }

  Var mask(Tape<T>& t, Var g) const { return build_mask(t, g, options, k); }
};

template <class T>
using BlockFn = std::function<Var(Tape<T>&, Var)>;

// y = b(x) * M: the block runs once and one output map is kept.
template <class T>
Var masked_block_forward(Tape<T>& t, const BlockFn<T>& block, Var x, Var mask) {
  Var out = block(t, x);
  const std::size_t k = t.shape(mask).at(0);
  if (t.shape(out).at(1) != k)
    throw ShapeError("masked block outputs " + std::to_string(t.shape(out).at(1)) +
                     " channels but mask has length " + std::to_string(k));
  return scale_channels(t, out, mask);
}

// Reference form: y = sum_i g_i * Pad(b_i(x), k), every b_i evaluated.
template <class T>
Var naive_forward_eq1(Tape<T>& t, std::span<const BlockFn<T>> blocks, Var x, Var g,
                      std::size_t k) {
  if (blocks.empty() || t.shape(g).at(0) != blocks.size())
    throw ShapeError("naive forward: one weight per block required");
  Var acc{};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Var out = blocks[i](t, x);
    Var padded = pad_dim(t, out, 1, k);
    Var term = scale_by_element(t, padded, g, i);
    acc = acc.valid() ? add(t, acc, term) : term;
  }
  return acc;
}

inline std::size_t round_half_up(double v) {
  return static_cast<std::size_t>(std::floor(v + 0.5));
}

// Inner widths of an inverted residual block for a set of expansion rates.
struct ExpansionOptions {
  std::vector<double> rates;          // one representative rate per width
  std::vector<std::size_t> widths;    // strictly increasing
};

inline ExpansionOptions expansion_options(std::span<const double> rates, std::size_t base) {
  ExpansionOptions out;
  for (double r : rates) {
    if (!(r > 0)) throw ConfigError("expansion rate must be positive");
    const std::size_t w = round_half_up(r * static_cast<double>(base));
    if (w == 0) continue;
    if (!out.widths.empty() && w <= out.widths.back()) {
      if (w < out.widths.back())
        throw ConfigError("expansion rates must be increasing");
      continue;
    }
    out.rates.push_back(r);
    out.widths.push_back(w);
  }
  if (out.widths.empty())
    throw ConfigError("expansion option set is empty after rounding");
  return out;
}

}  // namespace dmasknas
