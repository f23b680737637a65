#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dmasknas/blocks.hpp"
#include "dmasknas/channel_mask.hpp"
#include "dmasknas/effective_cost.hpp"
#include "dmasknas/gumbel.hpp"
#include "dmasknas/resolution.hpp"
#include "dmasknas/search_space.hpp"

namespace dmasknas {

// How the output-channel choice is evaluated: one shared map scaled by the
// aggregate mask, or the zero-padded weighted sum over per-option blocks.
enum class MaskMode { masked, naive };

inline constexpr int kTagSearched = 1;

enum class Trainable { none, weights, alpha };

// Tape handles for one forward pass.
struct Binding {
  std::vector<Var> params;
  std::vector<Var> alpha;  // per choice
  std::vector<Var> g;      // per choice
};

template <class T>
class Supergraph {
 public:
  struct FixedConv {
    std::string name;
    std::size_t kernel, stride, cin, cout;
    Activation act;
    ConvUnitParams p;
    ResolutionGrid in_grid, out_grid;
  };
  struct Searched {
    LayerPlan plan;
    std::vector<IrParams> params;  // per type; unused for skip
    int type_choice = -1, e_choice = -1, f_choice = -1;
    ResolutionGrid in_grid, out_grid;
  };
  using Unit = std::variant<FixedConv, Searched>;

  Supergraph(SearchSpaceSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    validate_search_space(spec_);
    build();
  }

  const SearchSpaceSpec& spec() const noexcept { return spec_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  std::vector<GumbelChoice<T>>& choices() noexcept { return choices_; }
  const std::vector<GumbelChoice<T>>& choices() const noexcept { return choices_; }
  const std::vector<Unit>& units() const noexcept { return units_; }
  int resolution_choice() const noexcept { return res_choice_; }
  const ResolutionGrid& input_grid() const noexcept { return input_grid_; }

  std::size_t classes() const noexcept { return spec_.classes; }
  std::size_t full_resolution() const noexcept { return spec_.resolutions.back(); }
  std::size_t searched_layer_count() const {
    std::size_t n = 0;
    for (const auto& u : units_) n += std::holds_alternative<Searched>(u);
    return n;
  }

  // Leaves for parameters and alphas, plus sampled weights g at temperature tau.
  Binding bind(Tape<T>& t, Trainable which, double tau, bool noise = true) {
    std::vector<Var> alpha;
    std::vector<std::vector<double>> eps;
    for (auto& c : choices_) {
      alpha.push_back(t.leaf(c.alpha(), which == Trainable::alpha));
      eps.push_back(noise ? c.draw_noise() : std::vector<double>(c.arity(), 0.0));
    }
    return bind_with(t, std::move(alpha), eps, tau, which == Trainable::weights);
  }

  // Caller-supplied alpha leaves and noise, e.g. for gradient checks.
  Binding bind_with(Tape<T>& t, std::vector<Var> alpha, const std::vector<std::vector<double>>& eps,
                    double tau, bool weights_grad = false) {
    if (alpha.size() != choices_.size() || eps.size() != choices_.size())
      throw ShapeError("bind: one alpha and one noise vector per choice");
    Binding b;
    for (const auto& e : params_.entries()) b.params.push_back(t.leaf(e.value, weights_grad));
    for (std::size_t i = 0; i < alpha.size(); ++i)
      b.g.push_back(gumbel_softmax(t, alpha[i], eps[i], tau));
    b.alpha = std::move(alpha);
    return b;
  }

  // Binding with explicit weights per choice (e.g. one-hot), no sampling.
  Binding bind_fixed(Tape<T>& t, const std::vector<std::vector<double>>& g,
                     bool weights_grad = false) {
    if (g.size() != choices_.size()) throw ShapeError("bind_fixed: one weight vector per choice");
    Binding b;
    for (const auto& e : params_.entries()) b.params.push_back(t.leaf(e.value, weights_grad));
    for (std::size_t i = 0; i < choices_.size(); ++i) {
      if (g[i].size() != choices_[i].arity()) throw ShapeError("bind_fixed: arity mismatch");
      std::vector<T> gv(g[i].begin(), g[i].end());
      b.alpha.push_back(Var{});
      b.g.push_back(t.constant(Tensor<T>::vector(std::move(gv))));
    }
    return b;
  }

  // Weights for a concrete architecture, one-hot on every choice.
  std::vector<std::vector<double>> one_hot(const ArchitectureDescriptor& d) const {
    validate_descriptor(d, spec_);
    std::vector<std::vector<double>> g;
    for (const auto& c : choices_) g.emplace_back(c.arity(), 0.0);
    if (res_choice_ >= 0) {
      auto it = std::find(spec_.resolutions.begin(), spec_.resolutions.end(), d.resolution);
      g[res_choice_][it - spec_.resolutions.begin()] = 1;
    }
    std::size_t li = 0;
    for (const auto& u : units_) {
      const auto* s = std::get_if<Searched>(&u);
      if (!s) continue;
      const auto& c = d.layers[li++];
      const auto& p = s->plan;
      auto ti = std::find_if(p.types.begin(), p.types.end(),
                             [&](const BlockType& b) { return b.name == c.block; });
      auto ei = std::find(p.e.widths.begin(), p.e.widths.end(), c.hidden);
      auto fi = std::find(p.f_options.begin(), p.f_options.end(), c.f);
      if (s->type_choice >= 0) g[s->type_choice][ti - p.types.begin()] = 1;
      if (s->e_choice >= 0) g[s->e_choice][ei - p.e.widths.begin()] = 1;
      if (s->f_choice >= 0) g[s->f_choice][fi - p.f_options.begin()] = 1;
    }
    return g;
  }

  // Noise-free argmax over every choice.
  ArchitectureDescriptor extract() const {
    ArchitectureDescriptor d;
    d.space = spec_.name;
    d.resolution = spec_.resolutions[res_choice_ >= 0 ? choices_[res_choice_].argmax() : 0];
    d.head = fixed_widths(spec_);
    for (const auto& u : units_) {
      const auto* s = std::get_if<Searched>(&u);
      if (!s) continue;
      auto pick = [&](int c) { return c >= 0 ? choices_[c].argmax() : std::size_t{0}; };
      d.layers.push_back(make_choice(s->plan, pick(s->type_choice), pick(s->e_choice),
                                     pick(s->f_choice)));
    }
    return d;
  }

  // Logits [N, classes] for a full-resolution input canvas.
  Var forward(Tape<T>& t, const Binding& b, Var x, MaskMode mode = MaskMode::masked) const {
    const Shape& xs = t.shape(x);
    const std::size_t full = full_resolution();
    if (xs.size() != 4 || xs[1] != spec_.input_channels || xs[2] != full || xs[3] != full)
      throw ShapeError("supergraph input " + to_string(xs) + " does not match " +
                       std::to_string(spec_.input_channels) + "x" + std::to_string(full) + "x" +
                       std::to_string(full));
    Var g_res = res_choice_ >= 0 ? b.g[res_choice_] : Var{};
    Var h = x;
    for (const auto& u : units_) {
      if (const auto* f = std::get_if<FixedConv>(&u)) {
        ResolutionOp<T> op = [&](Tape<T>& tp, Var in, std::size_t) {
          return conv_unit(tp, b.params, f->p, in, f->kernel, f->stride, f->act);
        };
        h = resolution_weighted_forward(t, op, h, f->in_grid, f->out_grid, g_res, Blend::coverage);
      } else {
        const auto& s = std::get<Searched>(u);
        const int saved = t.tag();
        t.set_tag(kTagSearched);
        h = searched_forward(t, b, s, h, g_res, mode);
        t.set_tag(saved);
      }
    }
    // Average pool over each resolution's grid, then the classifier.
    Var pooled;
    if (last_grid_.size() == 1) {
      pooled = global_avgpool(t, h);
    } else {
      for (std::size_t r = 0; r < last_grid_.size(); ++r) {
        Var term = scale_by_element(t, global_avgpool(t, subsample(t, h, last_grid_, r)), g_res, r);
        pooled = pooled.valid() ? add(t, pooled, term) : term;
      }
    }
    return fully_connected(t, pooled, b.params[fc_.w], b.params[fc_.b]);
  }

  // Differentiable total cost from effective shapes; optionally per-layer rows.
  Scalar cost(Tape<T>& t, const Binding& b, CostMode mode,
              std::vector<CostRow>* rows = nullptr) const {
    Var g_res = res_choice_ >= 0 ? b.g[res_choice_] : Var{};
    auto extents = [&](const ResolutionGrid& grid) {
      std::vector<double> hs, ws;
      for (const auto& o : grid.options()) {
        hs.push_back(static_cast<double>(o.h));
        ws.push_back(static_cast<double>(o.w));
      }
      return TapeShape{{}, weighted(t, g_res, hs), weighted(t, g_res, ws)};
    };
    auto emit = [&](const std::string& name, std::string k, std::string groups, const Scalar& cin,
                    const Scalar& cout, const TapeShape& out, const Scalar& flops,
                    const Scalar& params) {
      if (!rows) return;
      rows->push_back(CostRow{name, std::move(k), std::move(groups), value_of(t, cin),
                              value_of(t, cout), value_of(t, out.h), value_of(t, out.w),
                              value_of(t, flops), value_of(t, params)});
    };
    auto pick = [&](const Scalar& fl, const Scalar& pa) { return mode == CostMode::flop ? fl : pa; };

    Scalar total{0, {}};
    Scalar c_prev{static_cast<double>(spec_.input_channels), {}};
    for (const auto& u : units_) {
      if (const auto* f = std::get_if<FixedConv>(&u)) {
        TapeShape out = extents(f->out_grid);
        Scalar cout{static_cast<double>(f->cout), {}};
        Scalar fl = conv_cost(t, f->kernel, c_prev, cout, out, false, CostMode::flop);
        Scalar pa = conv_cost(t, f->kernel, c_prev, cout, out, false, CostMode::param);
        emit(f->name, std::to_string(f->kernel), "1", c_prev, cout, out, fl, pa);
        total = s_add(t, total, pick(fl, pa));
        c_prev = cout;
        continue;
      }
      const auto& s = std::get<Searched>(u);
      const auto& p = s.plan;
      Var g_type = s.type_choice >= 0 ? b.g[s.type_choice] : Var{};
      std::vector<double> widths(p.e.widths.begin(), p.e.widths.end());
      std::vector<double> fopts(p.f_options.begin(), p.f_options.end());
      Scalar hidden = weighted(t, s.e_choice >= 0 ? b.g[s.e_choice] : Var{}, widths);
      Scalar cout = weighted(t, s.f_choice >= 0 ? b.g[s.f_choice] : Var{}, fopts);
      TapeShape in = extents(s.in_grid), out = extents(s.out_grid);

      // Per-type coefficients: non-skip mass, squared kernel, SE flag.
      std::vector<double> active, k2, se;
      for (const auto& bt : p.types) {
        active.push_back(bt.skip ? 0.0 : 1.0);
        k2.push_back(bt.skip ? 0.0 : double(bt.kernel * bt.kernel));
        se.push_back(bt.se ? 1.0 : 0.0);
      }
      Scalar w_active = weighted(t, g_type, active);
      Scalar w_k2 = weighted(t, g_type, k2);
      Scalar w_se = weighted(t, g_type, se);
      auto layer_cost_for = [&](CostMode m) {
        Scalar pw = s_add(t, conv_cost(t, 1, c_prev, hidden, in, false, m),
                          conv_cost(t, 1, hidden, cout, out, false, m));
        Scalar dw = conv_cost(t, 1, hidden, hidden, out, true, m);  // k^2 folded in below
        Scalar se_cost = s_scale(t, hidden, 2.0 * double(p.se_width));
        Scalar c = s_mul(t, w_active, pw);
        c = s_add(t, c, s_mul(t, w_k2, dw));
        return s_add(t, c, s_mul(t, w_se, se_cost));
      };
      Scalar fl = layer_cost_for(CostMode::flop);
      Scalar pa = layer_cost_for(CostMode::param);
      emit(p.name, "mix", "-", c_prev, cout, out, fl, pa);
      total = s_add(t, total, pick(fl, pa));
      c_prev = cout;
    }
    // Classifier: h = w = 1.
    Scalar classes{static_cast<double>(spec_.classes), {}};
    TapeShape unit{{}, {1, {}}, {1, {}}};
    Scalar fc = conv_cost(t, 1, c_prev, classes, unit, false, CostMode::param);
    emit("fc", "1", "1", c_prev, classes, unit, fc, fc);
    return s_add(t, total, fc);
  }

 private:
  void build() {
    std::vector<Extent> opts;
    for (auto r : spec_.resolutions) opts.push_back({r, r});
    const std::size_t full = spec_.resolutions.back();
    input_grid_ = ResolutionGrid({full, full}, opts);

    std::uint64_t stream = 1;
    auto new_choice = [&](const std::string& name, std::vector<std::string> labels) {
      choices_.emplace_back(name, std::move(labels), seed_, stream++);
      return static_cast<int>(choices_.size() - 1);
    };
    if (spec_.resolutions.size() > 1) {
      std::vector<std::string> labels;
      for (auto r : spec_.resolutions) labels.push_back(std::to_string(r));
      res_choice_ = new_choice("resolution", labels);
    }

    ResolutionGrid grid = input_grid_;
    const auto plans = plan_layers(spec_);
    std::size_t plan_i = 0;
    for (std::size_t si = 0; si < spec_.stages.size(); ++si) {
      const auto& st = spec_.stages[si];
      if (st.kind == StageKind::conv) {
        FixedConv f;
        f.name = "stage" + std::to_string(si) + ".conv";
        f.kernel = st.kernel;
        f.stride = st.s;
        f.cin = st.max_input[2];
        f.cout = st.max_filters();
        f.act = st.act;
        f.p = add_conv_unit(params_, f.name, f.cin, f.cout, f.kernel, seed_);
        f.in_grid = grid;
        f.out_grid = grid.mapped([&](std::size_t e) {
          return conv_out_extent(e, f.kernel, f.stride, f.kernel / 2);
        });
        grid = f.out_grid;
        units_.emplace_back(std::move(f));
      } else if (st.kind == StageKind::tbs) {
        for (std::size_t r = 0; r < st.n; ++r) {
          Searched s;
          s.plan = plans.at(plan_i++);
          const auto& p = s.plan;
          for (const auto& bt : p.types) {
            if (bt.skip) {
              s.params.emplace_back();
              continue;
            }
            s.params.push_back(add_ir_params(params_, p.name + "." + bt.name, bt, p.max_in,
                                             p.e.widths.back(), p.f_options.back(), p.se_width,
                                             seed_));
          }
          if (p.types.size() > 1) {
            std::vector<std::string> labels;
            for (const auto& bt : p.types) labels.push_back(bt.name);
            s.type_choice = new_choice(p.name + ".type", labels);
          }
          if (p.e.widths.size() > 1) {
            std::vector<std::string> labels;
            for (auto w : p.e.widths) labels.push_back(std::to_string(w));
            s.e_choice = new_choice(p.name + ".e", labels);
          }
          if (p.f_options.size() > 1) {
            std::vector<std::string> labels;
            for (auto f : p.f_options) labels.push_back(std::to_string(f));
            s.f_choice = new_choice(p.name + ".f", labels);
          }
          s.in_grid = grid;
          s.out_grid = grid.mapped(
              [&](std::size_t e) { return conv_out_extent(e, 3, p.stride, 1); });
          grid = s.out_grid;
          units_.emplace_back(std::move(s));
        }
      } else if (st.kind == StageKind::avgpool) {
        last_grid_ = grid;
      } else {
        fc_ = add_fc(params_, "fc", st.max_input[0], st.max_filters(), seed_);
      }
    }
  }

  Var searched_forward(Tape<T>& t, const Binding& b, const Searched& s, Var x, Var g_res,
                       MaskMode mode) const {
    const auto& p = s.plan;
    Var g_type = s.type_choice >= 0 ? b.g[s.type_choice] : Var{};
    Var hidden_mask = s.e_choice >= 0
                          ? build_mask(t, b.g[s.e_choice], p.e.widths, p.e.widths.back())
                          : Var{};
    Var g_f = s.f_choice >= 0 ? b.g[s.f_choice] : Var{};
    const std::size_t fmax = p.f_options.back();

    // Sum over block types at `fcount` output filters, plus the identity path.
    auto mixed = [&](Tape<T>& tp, Var in, std::size_t fcount) {
      Var acc;
      for (std::size_t i = 0; i < p.types.size(); ++i) {
        if (p.types[i].skip) continue;
        Var y = ir_core(tp, b.params, s.params[i], p.types[i], in, p.stride, hidden_mask, fcount);
        if (g_type.valid()) y = scale_by_element(tp, y, g_type, i);
        acc = acc.valid() ? add(tp, acc, y) : y;
      }
      // Without an identity path the mixture of uncorrelated branches shrinks by
      // ||g||_2; undo that so depth does not starve the signal. 1 when one-hot.
      if (!p.identity_ok && g_type.valid())
        acc = scale_by_element(tp, acc, inverse_norm(tp, g_type), 0);
      if (p.identity_ok) {
        Var id = narrow(tp, in, 1, 0, fcount);
        acc = acc.valid() ? add(tp, acc, id) : id;
      }
      return acc;
    };

    ResolutionOp<T> op = [&](Tape<T>& tp, Var in, std::size_t) {
      if (!g_f.valid()) return mixed(tp, in, fmax);
      if (mode == MaskMode::masked)
        return scale_channels(tp, mixed(tp, in, fmax), build_mask(tp, g_f, p.f_options, fmax));
      Var acc;
      for (std::size_t i = 0; i < p.f_options.size(); ++i) {
        Var term = scale_by_element(tp, pad_dim(tp, mixed(tp, in, p.f_options[i]), 1, fmax), g_f, i);
        acc = acc.valid() ? add(tp, acc, term) : term;
      }
      return acc;
    };
    return resolution_weighted_forward(t, op, x, s.in_grid, s.out_grid, g_res, Blend::coverage);
  }

  SearchSpaceSpec spec_;
  std::uint64_t seed_;
  ParamStore<T> params_;
  std::vector<GumbelChoice<T>> choices_;
  std::vector<Unit> units_;
  ResolutionGrid input_grid_, last_grid_;
  FcParams fc_;
  int res_choice_ = -1;
};

}  // namespace dmasknas
