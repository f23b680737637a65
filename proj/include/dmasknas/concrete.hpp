#pragma once

#include <string>
#include <variant>
#include <vector>

#include "dmasknas/blocks.hpp"
#include "dmasknas/effective_cost.hpp"
#include "dmasknas/resolution.hpp"
#include "dmasknas/search_space.hpp"
#include "dmasknas/supergraph.hpp"

namespace dmasknas {

// Leading block of `src` with the given shape (every dimension a prefix).
template <class T>
Tensor<T> leading_slice(const Tensor<T>& src, const Shape& shape) {
  const Shape& ss = src.shape();
  if (ss.size() != shape.size()) throw ShapeError("leading_slice: rank mismatch");
  for (std::size_t d = 0; d < ss.size(); ++d)
    if (shape[d] > ss[d])
      throw ShapeError("leading_slice: " + to_string(shape) + " exceeds " + to_string(ss));
  Tensor<T> out(shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < ss.size(); ++d) off = off * ss[d] + idx[d];
    out[i] = src[off];
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

// A single architecture, built from a descriptor.
template <class T>
class ConcreteNet {
 public:
  struct Conv {
    std::string name;
    std::size_t kernel, stride, cin, cout;
    Activation act;
    ConvUnitParams p;
  };
  struct Block {
    std::string name;
    BlockType type;
    std::size_t stride, cin, hidden, f, se_width;
    bool residual;  // core + x; for skip, the whole output is x
    IrParams p;
  };
  using Layer = std::variant<Conv, Block>;

  ConcreteNet(const SearchSpaceSpec& spec, ArchitectureDescriptor d, std::uint64_t seed)
      : spec_(spec), desc_(std::move(d)) {
    validate_descriptor(desc_, spec_);
    const auto plans = plan_layers(spec_);
    std::size_t li = 0, c_prev = spec_.input_channels;
    for (std::size_t si = 0; si < spec_.stages.size(); ++si) {
      const auto& st = spec_.stages[si];
      if (st.kind == StageKind::conv) {
        Conv c{"stage" + std::to_string(si) + ".conv", st.kernel, st.s, c_prev, st.max_filters(),
               st.act, {}};
        c.p = add_conv_unit(params_, c.name, c.cin, c.cout, c.kernel, seed);
        c_prev = c.cout;
        layers_.emplace_back(std::move(c));
      } else if (st.kind == StageKind::tbs) {
        for (std::size_t r = 0; r < st.n; ++r, ++li) {
          const auto& plan = plans[li];
          const auto& ch = desc_.layers[li];
          const auto bt = *std::find_if(plan.types.begin(), plan.types.end(),
                                        [&](const BlockType& b) { return b.name == ch.block; });
          Block b{plan.name + "." + bt.name, bt, plan.stride, c_prev, ch.hidden, ch.f,
                  plan.se_width, plan.identity_ok, {}};
          if (!bt.skip)
            b.p = add_ir_params(params_, b.name, bt, b.cin, b.hidden, b.f, b.se_width, seed);
          c_prev = b.f;
          layers_.emplace_back(std::move(b));
        }
      } else if (st.kind == StageKind::fc) {
        fc_ = add_fc(params_, "fc", c_prev, st.max_filters(), seed);
        fc_in_ = c_prev;
      }
    }
  }

  const ArchitectureDescriptor& descriptor() const noexcept { return desc_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  std::size_t resolution() const noexcept { return desc_.resolution; }

  // Copy the leading block of every supergraph parameter with the same name.
  void load_from(const ParamStore<T>& super) {
    for (auto& e : params_.entries()) e.value = leading_slice(super.value(e.name), e.value.shape());
  }

  std::vector<Var> bind(Tape<T>& t, bool requires_grad = false) const {
    std::vector<Var> pv;
    for (const auto& e : params_.entries()) pv.push_back(t.leaf(e.value, requires_grad));
    return pv;
  }

  // Input at the full dataset resolution; subsampled to the chosen one.
  Var forward(Tape<T>& t, const std::vector<Var>& pv, Var x) const {
    const Shape& xs = t.shape(x);
    if (xs.size() != 4 || xs[1] != spec_.input_channels)
      throw ShapeError("concrete input " + to_string(xs) + " has wrong channel count");
    Var h = x;
    if (xs[2] != desc_.resolution || xs[3] != desc_.resolution)
      h = gather2d(t, x, subsample_indices(xs[2], desc_.resolution),
                   subsample_indices(xs[3], desc_.resolution));
    for (const auto& l : layers_) {
      if (const auto* c = std::get_if<Conv>(&l)) {
        h = conv_unit(t, pv, c->p, h, c->kernel, c->stride, c->act);
        continue;
      }
      const auto& b = std::get<Block>(l);
      Var id = resize_channels(t, h, b.f);
      if (b.type.skip) {
        h = id;
        continue;
      }
      Var y = ir_core(t, pv, b.p, b.type, h, b.stride, Var{});
      h = b.residual ? add(t, y, id) : y;
    }
    return fully_connected(t, global_avgpool(t, h), pv[fc_.w], pv[fc_.b]);
  }

  // Exact per-convolution costs at the chosen resolution.
  std::vector<CostRow> cost_rows() const {
    std::vector<CostRow> rows;
    std::size_t h = desc_.resolution, w = desc_.resolution;
    auto row = [&](std::string name, std::size_t k, std::size_t groups, std::size_t cin,
                   std::size_t cout, std::size_t ho, std::size_t wo) {
      LayerCostInput in{k, double(groups), double(cin), double(cout), double(ho), double(wo),
                        CostMode::flop};
      const double fl = layer_cost(in);
      in.mode = CostMode::param;
      rows.push_back(CostRow{std::move(name), std::to_string(k), std::to_string(groups),
                             double(cin), double(cout), double(ho), double(wo), fl,
                             layer_cost(in)});
    };
    for (const auto& l : layers_) {
      if (const auto* c = std::get_if<Conv>(&l)) {
        const std::size_t ho = conv_out_extent(h, c->kernel, c->stride, c->kernel / 2);
        const std::size_t wo = conv_out_extent(w, c->kernel, c->stride, c->kernel / 2);
        row(c->name, c->kernel, 1, c->cin, c->cout, ho, wo);
        h = ho;
        w = wo;
        continue;
      }
      const auto& b = std::get<Block>(l);
      const std::size_t ho = conv_out_extent(h, 3, b.stride, 1);
      const std::size_t wo = conv_out_extent(w, 3, b.stride, 1);
      if (!b.type.skip) {
        const std::size_t k = b.type.kernel;
        row(b.name + ".expand", 1, 1, b.cin, b.hidden, h, w);
        row(b.name + ".dw", k, b.hidden, b.hidden, b.hidden, ho, wo);
        if (b.type.se) {
          row(b.name + ".se.reduce", 1, 1, b.hidden, b.se_width, 1, 1);
          row(b.name + ".se.expand", 1, 1, b.se_width, b.hidden, 1, 1);
        }
        row(b.name + ".project", 1, 1, b.hidden, b.f, ho, wo);
      }
      h = ho;
      w = wo;
    }
    row("fc", 1, 1, fc_in_, spec_.classes, 1, 1);
    return rows;
  }

  double cost(CostMode mode) const { return total_of(cost_rows(), mode); }

 private:
  SearchSpaceSpec spec_;
  ArchitectureDescriptor desc_;
  ParamStore<T> params_;
  std::vector<Layer> layers_;
  FcParams fc_;
  std::size_t fc_in_ = 0;
};

}  // namespace dmasknas
