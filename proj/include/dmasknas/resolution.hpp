#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/gumbel.hpp"

namespace dmasknas {

// Nearest-neighbour index map: idx[j] = floor(j * full / target).
inline std::vector<std::size_t> subsample_indices(std::size_t full, std::size_t target) {
  if (target == 0 || target > full)
    throw ShapeError("subsample target " + std::to_string(target) +
                     " must be in [1, " + std::to_string(full) + "]");
  std::vector<std::size_t> idx(target);
  for (std::size_t j = 0; j < target; ++j) idx[j] = j * full / target;
  return idx;
}

struct Extent {
  std::size_t h = 0, w = 0;
  friend bool operator==(const Extent&, const Extent&) = default;
};

// Index maps of every resolution option onto one full-size canvas.
// Options are kept in ascending order; the last one is the canvas itself.
class ResolutionGrid {
 public:
  ResolutionGrid() = default;
  ResolutionGrid(Extent full, std::vector<Extent> options)
      : full_(full), options_(std::move(options)) {
    if (options_.empty()) throw ConfigError("resolution grid needs at least one option");
    for (std::size_t i = 0; i < options_.size(); ++i) {
      const auto& o = options_[i];
      if (i > 0 && (o.h < options_[i - 1].h || o.w < options_[i - 1].w))
        throw ConfigError("resolution options must be ascending");
      rows_.push_back(subsample_indices(full_.h, o.h));
      cols_.push_back(subsample_indices(full_.w, o.w));
    }
  }

  Extent full() const noexcept { return full_; }
  std::size_t size() const noexcept { return options_.size(); }
  const std::vector<Extent>& options() const noexcept { return options_; }
  Extent option(std::size_t r) const { return options_.at(r); }
  const std::vector<std::size_t>& rows(std::size_t r) const { return rows_.at(r); }
  const std::vector<std::size_t>& cols(std::size_t r) const { return cols_.at(r); }
  bool is_identity(std::size_t r) const { return options_.at(r) == full_; }

  // Grid after a layer mapping each extent through `f` (e.g. stride arithmetic).
  template <class F>
  ResolutionGrid mapped(F&& f) const {
    std::vector<Extent> next;
    for (const auto& o : options_) next.push_back(Extent{f(o.h), f(o.w)});
    return ResolutionGrid(Extent{f(full_.h), f(full_.w)}, std::move(next));
  }

 private:
  Extent full_;
  std::vector<Extent> options_;
  std::vector<std::vector<std::size_t>> rows_, cols_;
};

// Network-wide resolution decision: a grid over the input canvas plus the
// choice over its options (absent when there is only one option).
template <class T>
struct ResolutionPlan {
  ResolutionGrid grid;
  std::optional<GumbelChoice<T>> gumbel;
};

template <class T>
Var subsample(Tape<T>& t, Var x, const ResolutionGrid& grid, std::size_t r) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 4 || xs[2] != grid.full().h || xs[3] != grid.full().w)
    throw ShapeError("subsample: input " + to_string(xs) + " does not match canvas " +
                     std::to_string(grid.full().h) + "x" + std::to_string(grid.full().w));
  if (grid.is_identity(r)) return x;
  return gather2d(t, x, grid.rows(r), grid.cols(r));
}

// Intersperse y onto a zero canvas at the positions it was sampled from.
template <class T>
Var scatter_intersperse(Tape<T>& t, Var y, const ResolutionGrid& grid, std::size_t r) {
  const Shape& ys = t.shape(y);
  const Extent o = grid.option(r);
  if (ys.size() != 4 || ys[2] != o.h || ys[3] != o.w)
    throw ShapeError("scatter: input " + to_string(ys) + " does not match option " +
                     std::to_string(o.h) + "x" + std::to_string(o.w));
  if (grid.is_identity(r)) return y;
  return scatter2d(t, y, grid.rows(r), grid.cols(r), grid.full().h, grid.full().w);
}

// How overlapping options combine on the canvas.
//   sum:      canvas(p) = sum_r g[r] * y_r(p)
//   coverage: the same sum divided by the total weight of the options whose
//             grid contains p, so every covered pixel is a convex combination.
// Both agree whenever g is one-hot.
enum class Blend { sum, coverage };

// Per-pixel total weight of the options covering it, on an H x W canvas.
template <class T>
std::vector<T> coverage_weights(const ResolutionGrid& grid, const Tensor<T>& gv) {
  const std::size_t H = grid.full().h, W = grid.full().w;
  std::vector<T> c(H * W, T(0));
  for (std::size_t r = 0; r < grid.size(); ++r)
    for (auto a : grid.rows(r))
      for (auto b : grid.cols(r)) c[a * W + b] += gv[r];
  return c;
}

// canvas = blend_r g[r] * scatter(ys[r], r) as one op. Only the small
// per-option maps are retained, never a full canvas per option.
template <class T>
Var weighted_scatter(Tape<T>& t, const std::vector<Var>& ys, const ResolutionGrid& grid, Var g,
                     Blend blend = Blend::sum) {
  if (ys.size() != grid.size() || t.shape(g).size() != 1 || t.shape(g)[0] != grid.size())
    throw ShapeError("weighted_scatter: one map and one weight per resolution option");
  const Shape& y0 = t.shape(ys[0]);
  const std::size_t nc = y0.at(0) * y0.at(1), H = grid.full().h, W = grid.full().w;
  const Tensor<T>& gv = t.value(g);
  // inv[p] = 1 / coverage(p), or 1 everywhere for a plain sum
  std::vector<T> inv(H * W, T(1));
  if (blend == Blend::coverage) {
    const auto c = coverage_weights(grid, gv);
    for (std::size_t p = 0; p < inv.size(); ++p) inv[p] = c[p] != T(0) ? T(1) / c[p] : T(0);
  }
  Tensor<T> out(Shape{y0[0], y0[1], H, W});
  for (std::size_t r = 0; r < ys.size(); ++r) {
    const Shape& ys_r = t.shape(ys[r]);
    const Extent o = grid.option(r);
    if (ys_r.size() != 4 || ys_r[0] != y0[0] || ys_r[1] != y0[1] || ys_r[2] != o.h ||
        ys_r[3] != o.w)
      throw ShapeError("weighted_scatter: map " + to_string(ys_r) + " does not match option " +
                       std::to_string(o.h) + "x" + std::to_string(o.w));
    const auto& rows = grid.rows(r);
    const auto& cols = grid.cols(r);
    const Tensor<T>& yv = t.value(ys[r]);
    const T w = gv[r];
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t a = 0; a < o.h; ++a)
        for (std::size_t b = 0; b < o.w; ++b) {
          const std::size_t p = rows[a] * W + cols[b];
          out[i * H * W + p] += w * inv[p] * yv[(i * o.h + a) * o.w + b];
        }
  }
  std::vector<Var> inputs = ys;
  inputs.push_back(g);
  std::vector<Var> saves;
  if (t.requires_grad(g)) saves = ys;
  bool any_y = false;
  for (Var y : ys) any_y = any_y || t.requires_grad(y);
  if (any_y) saves.push_back(g);
  return t.record("weighted_scatter", std::move(out), inputs, saves, 0,
                  [ys, grid, g, nc, H, W, inv, blend](Tape<T>& tp, const Tensor<T>& dout) {
                      const Tensor<T>& gv = tp.value(g);
                      Tensor<T> dg(Shape{ys.size()});
                      // coverage blending: d(out)/dg_r = (y_r - out) / coverage, so the
                      // blended canvas is rebuilt from the saved option maps
                      std::vector<T> blended;
                      if (blend == Blend::coverage && tp.wants_grad(g)) {
                        blended.assign(nc * H * W, T(0));
                        for (std::size_t r = 0; r < ys.size(); ++r) {
                          const Extent o = grid.option(r);
                          const Tensor<T>& yv = tp.value(ys[r]);
                          for (std::size_t i = 0; i < nc; ++i)
                            for (std::size_t a = 0; a < o.h; ++a)
                              for (std::size_t b = 0; b < o.w; ++b) {
                                const std::size_t p = grid.rows(r)[a] * W + grid.cols(r)[b];
                                blended[i * H * W + p] +=
                                    gv[r] * inv[p] * yv[(i * o.h + a) * o.w + b];
                              }
                        }
                      }
                      for (std::size_t r = 0; r < ys.size(); ++r) {
                        const Extent o = grid.option(r);
                        const auto& rows = grid.rows(r);
                        const auto& cols = grid.cols(r);
                        const bool want_y = tp.wants_grad(ys[r]), want_g = tp.wants_grad(g);
                        if (!want_y && !want_g) continue;
                        const Tensor<T>& yv = tp.value(ys[r]);
                        Tensor<T> dy(tp.shape(ys[r]));
                        T acc = 0;
                        for (std::size_t i = 0; i < nc; ++i)
                          for (std::size_t a = 0; a < o.h; ++a)
                            for (std::size_t b = 0; b < o.w; ++b) {
                              const std::size_t k = (i * o.h + a) * o.w + b;
                              const std::size_t p = rows[a] * W + cols[b];
                              const T d = dout[i * H * W + p] * inv[p];
                              dy[k] = gv[r] * d;
                              acc += (blended.empty() ? yv[k] : yv[k] - blended[i * H * W + p]) * d;
                            }
                        dg[r] = acc;
                        if (want_y) tp.accumulate(ys[r], std::move(dy));
                      }
                      tp.accumulate(g, std::move(dg));
                    });
}

template <class T>
using ResolutionOp = std::function<Var(Tape<T>&, Var, std::size_t)>;

// blend_r g_r * scatter_out(F(subsample_in(x, r)), r), summed in ascending
// resolution order. With a single option this is just F(x).
template <class T>
Var resolution_weighted_forward(Tape<T>& t, const ResolutionOp<T>& op, Var x,
                                const ResolutionGrid& in, const ResolutionGrid& out, Var g,
                                Blend blend = Blend::sum) {
  if (in.size() != out.size()) throw ShapeError("resolution grids disagree on option count");
  if (in.size() == 1) return op(t, x, 0);
  if (!g.valid() || t.shape(g).at(0) != in.size())
    throw ShapeError("resolution weights do not match option count");
  std::vector<Var> ys;
  for (std::size_t r = 0; r < in.size(); ++r) ys.push_back(op(t, subsample(t, x, in, r), r));
  return weighted_scatter(t, ys, out, g, blend);
}

template <class T>
Var resolution_weighted_forward(Tape<T>& t, const ResolutionOp<T>& op, Var x,
                                const ResolutionGrid& grid, Var g, Blend blend = Blend::sum) {
  return resolution_weighted_forward(t, op, x, grid, grid, g, blend);
}

// Canvas pixels covered by at least two options' index grids.
inline std::size_t contamination_count(std::size_t full, std::span<const std::size_t> options) {
  std::vector<std::size_t> hits(full * full, 0);
  for (std::size_t target : options) {
    const auto idx = subsample_indices(full, target);
    for (auto r : idx)
      for (auto c : idx) ++hits[r * full + c];
  }
  return static_cast<std::size_t>(
      std::count_if(hits.begin(), hits.end(), [](std::size_t h) { return h >= 2; }));
}

}  // namespace dmasknas
