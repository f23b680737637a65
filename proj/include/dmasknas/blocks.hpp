#pragma once

#include <string>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/params.hpp"
#include "dmasknas/search_space.hpp"

namespace dmasknas {

// conv -> per-channel affine -> activation.
struct ConvUnitParams {
  std::size_t w = kNoParam, scale = kNoParam, shift = kNoParam;
};

template <class T>
ConvUnitParams add_conv_unit(ParamStore<T>& ps, const std::string& prefix, std::size_t cin,
                             std::size_t cout, std::size_t kernel, std::uint64_t seed) {
  ConvUnitParams p;
  const Shape ws{cout, cin, kernel, kernel};
  p.w = ps.add(prefix + ".w", init_param<T>(prefix + ".w", ws, cin * kernel * kernel,
                                            Init::he_uniform, seed));
  p.scale = ps.add(prefix + ".scale", init_param<T>("", Shape{cout}, 1, Init::ones, seed), false);
  p.shift = ps.add(prefix + ".shift", init_param<T>("", Shape{cout}, 1, Init::zeros, seed), false);
  return p;
}

template <class T>
Var conv_unit(Tape<T>& t, const std::vector<Var>& pv, const ConvUnitParams& p, Var x,
              std::size_t kernel, std::size_t stride, Activation act) {
  Var y = conv2d(t, x, pv[p.w], Var{}, {.stride = stride, .padding = kernel / 2});
  return activation(t, channel_affine(t, y, pv[p.scale], pv[p.shift]), act);
}

// Inverted residual block: 1x1 expand, k x k depthwise, optional SE, 1x1 project.
struct IrParams {
  std::size_t w_expand = kNoParam, s1 = kNoParam, b1 = kNoParam;
  std::size_t w_dw = kNoParam, s2 = kNoParam, b2 = kNoParam;
  std::size_t se_wr = kNoParam, se_br = kNoParam, se_we = kNoParam, se_be = kNoParam;
  std::size_t w_proj = kNoParam, s3 = kNoParam, b3 = kNoParam;
};

template <class T>
IrParams add_ir_params(ParamStore<T>& ps, const std::string& prefix, const BlockType& bt,
                       std::size_t cin, std::size_t hidden, std::size_t fout,
                       std::size_t se_width, std::uint64_t seed) {
  IrParams p;
  auto he = [&](const std::string& n, Shape s, std::size_t fan) {
    return ps.add(prefix + n, init_param<T>(prefix + n, s, fan, Init::he_uniform, seed));
  };
  auto fill = [&](const std::string& n, std::size_t len, Init kind) {
    return ps.add(prefix + n, init_param<T>("", Shape{len}, 1, kind, seed), false);
  };
  const std::size_t k = bt.kernel;
  p.w_expand = he(".expand.w", Shape{hidden, cin, 1, 1}, cin);
  p.s1 = fill(".expand.scale", hidden, Init::ones);
  p.b1 = fill(".expand.shift", hidden, Init::zeros);
  p.w_dw = he(".dw.w", Shape{hidden, 1, k, k}, k * k);
  p.s2 = fill(".dw.scale", hidden, Init::ones);
  p.b2 = fill(".dw.shift", hidden, Init::zeros);
  if (bt.se) {
    p.se_wr = ps.add(prefix + ".se.reduce.w",
                     init_param<T>(prefix + ".se.reduce.w", Shape{se_width, hidden}, hidden,
                                   Init::fan_in_uniform, seed));
    p.se_br = fill(".se.reduce.b", se_width, Init::zeros);
    p.se_we = ps.add(prefix + ".se.expand.w",
                     init_param<T>(prefix + ".se.expand.w", Shape{hidden, se_width}, se_width,
                                   Init::fan_in_uniform, seed));
    p.se_be = fill(".se.expand.b", hidden, Init::zeros);
  }
  p.w_proj = he(".project.w", Shape{fout, hidden, 1, 1}, hidden);
  p.s3 = fill(".project.scale", fout, Init::ones);
  p.b3 = fill(".project.shift", fout, Init::zeros);
  return p;
}

// The block body without any residual. `hidden_mask` (optional) scales the
// depthwise output; `fcount` < full width keeps only the leading filters.
template <class T>
Var ir_core(Tape<T>& t, const std::vector<Var>& pv, const IrParams& p, const BlockType& bt, Var x,
            std::size_t stride, Var hidden_mask, std::size_t fcount = 0) {
  const std::size_t hidden = t.shape(pv[p.w_dw])[0];
  Var h = conv2d(t, x, pv[p.w_expand], Var{});
  h = activation(t, channel_affine(t, h, pv[p.s1], pv[p.b1]), bt.act);
  h = conv2d(t, h, pv[p.w_dw], Var{},
             {.stride = stride, .padding = bt.kernel / 2, .groups = hidden});
  h = activation(t, channel_affine(t, h, pv[p.s2], pv[p.b2]), bt.act);
  if (hidden_mask.valid()) h = scale_channels(t, h, hidden_mask);
  if (bt.se) h = squeeze_excite(t, h, pv[p.se_wr], pv[p.se_br], pv[p.se_we], pv[p.se_be]);
  Var wp = pv[p.w_proj], s3 = pv[p.s3], b3 = pv[p.b3];
  const std::size_t full = t.shape(wp)[0];
  if (fcount != 0 && fcount < full) {
    wp = narrow(t, wp, 0, 0, fcount);
    s3 = narrow(t, s3, 0, 0, fcount);
    b3 = narrow(t, b3, 0, 0, fcount);
  }
  return channel_affine(t, conv2d(t, h, wp, Var{}), s3, b3);
}

struct FcParams {
  std::size_t w = kNoParam, b = kNoParam;
};

template <class T>
FcParams add_fc(ParamStore<T>& ps, const std::string& prefix, std::size_t in, std::size_t out,
                std::uint64_t seed) {
  FcParams p;
  p.w = ps.add(prefix + ".w", init_param<T>(prefix + ".w", Shape{out, in}, in,
                                            Init::fan_in_uniform, seed));
  p.b = ps.add(prefix + ".b", init_param<T>("", Shape{out}, 1, Init::zeros, seed), false);
  return p;
}

}  // namespace dmasknas
