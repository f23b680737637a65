#pragma once

#include <cmath>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/resolution.hpp"

namespace dmasknas {

enum class CostMode { flop, param };

inline CostMode parse_cost_mode(const std::string& s) {
  if (s == "flop" || s == "FLOP" || s == "flops") return CostMode::flop;
  if (s == "param" || s == "params") return CostMode::param;
  throw ConfigError("unknown cost mode '" + s + "' (expected flop or param)");
}

inline std::string to_string(CostMode m) { return m == CostMode::flop ? "flop" : "param"; }

inline double effective_channels(std::span<const double> g, std::span<const double> options) {
  if (g.size() != options.size()) throw ShapeError("effective_channels: length mismatch");
  double c = 0;
  for (std::size_t i = 0; i < g.size(); ++i) c += g[i] * options[i];
  return c;
}

struct EffectiveExtent {
  double h = 0, w = 0;
};

// Weighted per-option extents: h = sum_i g_i * h_i.
inline EffectiveExtent effective_spatial(std::span<const double> g,
                                         std::span<const Extent> options) {
  if (g.size() != options.size()) throw ShapeError("effective_spatial: length mismatch");
  EffectiveExtent e;
  for (std::size_t i = 0; i < g.size(); ++i) {
    e.h += g[i] * static_cast<double>(options[i].h);
    e.w += g[i] * static_cast<double>(options[i].w);
  }
  return e;
}

// Effective shape of a feature map. Spatial extents are kept per resolution
// option so strides act on integers; h() and w() give the weighted values.
struct EffectiveShape {
  std::size_t n = 1;
  double c = 0;
  std::vector<double> res_weights{1.0};
  std::vector<Extent> extents;

  double h() const { return effective_spatial(res_weights, extents).h; }
  double w() const { return effective_spatial(res_weights, extents).w; }
};

enum class LayerKind { gumbel_conv, plain_conv, depthwise_conv, pool, fc };

struct LayerShapeSpec {
  LayerKind kind = LayerKind::plain_conv;
  std::size_t kernel = 1, stride = 1, padding = 0;
  std::size_t filters = 0;              // plain conv / fc
  std::vector<double> channel_options;  // gumbel conv
  std::vector<double> channel_weights;  // gumbel conv
};

inline EffectiveShape propagate_shape(const LayerShapeSpec& layer, const EffectiveShape& in) {
  EffectiveShape out = in;
  auto strided = [&](std::size_t e) {
    return conv_out_extent(e, layer.kernel, layer.stride, layer.padding);
  };
  switch (layer.kind) {
    case LayerKind::gumbel_conv:
      out.c = effective_channels(layer.channel_weights, layer.channel_options);
      break;
    case LayerKind::plain_conv:
      out.c = static_cast<double>(layer.filters);
      break;
    case LayerKind::depthwise_conv:
      out.c = in.c;
      break;
    case LayerKind::pool:
      for (auto& e : out.extents) e = Extent{1, 1};
      return out;
    case LayerKind::fc:
      out.c = static_cast<double>(layer.filters);
      for (auto& e : out.extents) e = Extent{1, 1};
      return out;
    default:
      throw ConfigError("unknown layer kind");
  }
  for (auto& e : out.extents) e = Extent{strided(e.h), strided(e.w)};
  return out;
}

struct LayerCostInput {
  std::size_t kernel = 1;
  double groups = 1;  // a depthwise layer passes its effective channel count
  double c_in = 0, c_out = 0, h_out = 0, w_out = 0;
  CostMode mode = CostMode::flop;
};

// FLOP: k^2 h w C_in C_out / groups; param: k^2 C_in C_out / groups.
inline double layer_cost(const LayerCostInput& in) {
  if (in.kernel == 0 || !(in.groups > 0)) throw ConfigError("layer_cost: k and groups must be >= 1");
  const double k2 = static_cast<double>(in.kernel * in.kernel);
  const double params = k2 * in.c_in * in.c_out / in.groups;
  return in.mode == CostMode::flop ? params * in.h_out * in.w_out : params;
}

// A scalar that is either a compile-time constant or a node on a tape.
// Keeps cost graphs small when most factors are fixed.
struct Scalar {
  double c = 0;
  Var v{};
  bool is_var() const noexcept { return v.valid(); }
};

template <class T>
double value_of(const Tape<T>& t, const Scalar& s) {
  return s.is_var() ? static_cast<double>(t.value(s.v).item()) : s.c;
}

template <class T>
Scalar s_add(Tape<T>& t, const Scalar& a, const Scalar& b) {
  if (!a.is_var() && !b.is_var()) return {a.c + b.c, {}};
  if (!a.is_var()) return a.c == 0 ? b : Scalar{0, add(t, b.v, t.constant(Tensor<T>::scalar(T(a.c))))};
  if (!b.is_var()) return b.c == 0 ? a : Scalar{0, add(t, a.v, t.constant(Tensor<T>::scalar(T(b.c))))};
  return {0, add(t, a.v, b.v)};
}

template <class T>
Scalar s_mul(Tape<T>& t, const Scalar& a, const Scalar& b) {
  if (!a.is_var() && !b.is_var()) return {a.c * b.c, {}};
  if (!a.is_var()) return {0, scale(t, b.v, T(a.c))};
  if (!b.is_var()) return {0, scale(t, a.v, T(b.c))};
  return {0, mul(t, a.v, b.v)};
}

template <class T>
Scalar s_scale(Tape<T>& t, const Scalar& a, double c) {
  return a.is_var() ? Scalar{0, scale(t, a.v, T(c))} : Scalar{a.c * c, {}};
}

// sum_i g_i * values_i, or the single value when there is no choice.
template <class T>
Scalar weighted(Tape<T>& t, Var g, const std::vector<double>& values) {
  if (!g.valid()) {
    if (values.size() != 1) throw ShapeError("weighted: missing weights for multi-option value");
    return {values[0], {}};
  }
  return {0, dot_const(t, g, values)};
}

// Effective shape as tape scalars, used while building the search loss.
struct TapeShape {
  Scalar c, h, w;
};

template <class T>
Scalar conv_cost(Tape<T>& t, std::size_t kernel, const Scalar& c_in, const Scalar& c_out,
                 const TapeShape& out, bool depthwise, CostMode mode) {
  const double k2 = static_cast<double>(kernel * kernel);
  // depthwise: groups == channels, so cost is k^2 (h w) C.
  Scalar base = depthwise ? s_scale(t, c_in, k2) : s_scale(t, s_mul(t, c_in, c_out), k2);
  if (mode == CostMode::param) return base;
  return s_mul(t, base, s_mul(t, out.h, out.w));
}

// One row of a cost report.
struct CostRow {
  std::string name;
  std::string kernel = "1";
  std::string groups = "1";
  double c_in = 0, c_out = 0, h_out = 0, w_out = 0;
  double flops = 0, params = 0;
};

inline std::string format_cost_table(const std::vector<CostRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "layer" << std::right << std::setw(4) << "k" << std::setw(8)
     << "groups" << std::setw(10) << "c_in" << std::setw(10) << "c_out" << std::setw(9) << "h_out"
     << std::setw(9) << "w_out" << std::setw(16) << "flops(MACs)" << std::setw(14) << "params"
     << '\n';
  double tf = 0, tp = 0;
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(28) << r.name << std::right << std::setw(4) << r.kernel
       << std::setw(8) << r.groups << std::setprecision(3) << std::setw(10) << r.c_in
       << std::setw(10) << r.c_out << std::setw(9) << r.h_out << std::setw(9) << r.w_out
       << std::setprecision(1) << std::setw(16) << r.flops << std::setw(14) << r.params << '\n';
    tf += r.flops;
    tp += r.params;
  }
  os << std::left << std::setw(78) << "total" << std::right << std::setprecision(1)
     << std::setw(16) << tf << std::setw(14) << tp << '\n';
  return os.str();
}

inline double total_of(const std::vector<CostRow>& rows, CostMode mode) {
  double s = 0;
  for (const auto& r : rows) s += mode == CostMode::flop ? r.flops : r.params;
  return s;
}

}  // namespace dmasknas
