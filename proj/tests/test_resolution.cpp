#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "dmasknas/resolution.hpp"
#include "support/gradcheck.hpp"

using namespace dmasknas;
using dmasknas::testing::random_tensor;

namespace {
ResolutionGrid square_grid(std::size_t full, std::vector<std::size_t> sizes) {
  std::vector<Extent> opts;
  for (auto s : sizes) opts.push_back({s, s});
  return ResolutionGrid({full, full}, opts);
}
}  // namespace

TEST(SubsampleIndices, Examples) {
  std::vector<std::size_t> id(8);
  std::iota(id.begin(), id.end(), 0);
  EXPECT_EQ(subsample_indices(8, 8), id);
  EXPECT_EQ(subsample_indices(8, 4), (std::vector<std::size_t>{0, 2, 4, 6}));
  EXPECT_EQ(subsample_indices(8, 2), (std::vector<std::size_t>{0, 4}));
  EXPECT_THROW(subsample_indices(8, 9), ShapeError);
  EXPECT_THROW(subsample_indices(8, 0), ShapeError);
}

TEST(SubsampleIndices, DistinctAndInRange) {
  for (std::size_t full = 1; full <= 64; ++full)
    for (std::size_t target = 1; target <= full; ++target) {
      auto idx = subsample_indices(full, target);
      std::set<std::size_t> uniq(idx.begin(), idx.end());
      ASSERT_EQ(uniq.size(), target);
      EXPECT_LT(*uniq.rbegin(), full);
      EXPECT_EQ(idx[0], 0u);
    }
}

TEST(ResolutionGrid, Construction) {
  auto g = square_grid(8, {2, 4, 8});
  EXPECT_TRUE(g.is_identity(2));
  EXPECT_FALSE(g.is_identity(0));
  EXPECT_THROW(square_grid(8, {4, 2}), ConfigError);
  EXPECT_THROW(square_grid(8, {4, 16}), ShapeError);
  auto strided = g.mapped([](std::size_t e) { return conv_out_extent(e, 3, 2, 1); });
  EXPECT_EQ(strided.full(), (Extent{4, 4}));
  EXPECT_EQ(strided.option(0), (Extent{1, 1}));
  EXPECT_EQ(strided.option(1), (Extent{2, 2}));
}

TEST(Subsample, IdentityAndConstant) {
  std::mt19937_64 rng(1);
  auto grid = square_grid(8, {4, 8});
  Tape<double> t;
  Var x = t.leaf(random_tensor(Shape{1, 2, 8, 8}, rng));
  EXPECT_EQ(subsample(t, x, grid, 1).id, x.id);
  Var c = t.leaf(Tensor<double>(Shape{1, 2, 8, 8}, 2.5));
  for (double v : t.value(subsample(t, c, grid, 0)).vec()) EXPECT_EQ(v, 2.5);
  EXPECT_THROW(subsample(t, t.leaf(Tensor<double>(Shape{1, 2, 6, 8})), grid, 0), ShapeError);
}

TEST(Scatter, RoundTripAndConservation) {
  std::mt19937_64 rng(2);
  auto grid = square_grid(9, {2, 3, 5, 7, 9});
  for (std::size_t r = 0; r < grid.size(); ++r) {
    const Extent o = grid.option(r);
    auto yv = random_tensor(Shape{2, 3, o.h, o.w}, rng);
    Tape<double> t;
    Var y = t.leaf(yv);
    Var canvas = scatter_intersperse(t, y, grid, r);
    EXPECT_EQ(t.value(subsample(t, canvas, grid, r)), yv);
    double sy = 0, sc = 0;
    for (double v : yv.vec()) sy += v;
    for (double v : t.value(canvas).vec()) sc += v;
    EXPECT_NEAR(sc, sy, 1e-12);
  }
  Tape<double> t;
  EXPECT_THROW(scatter_intersperse(t, t.leaf(Tensor<double>(Shape{1, 1, 3, 3})), grid, 0),
               ShapeError);
}

TEST(Scatter, IdentityOption) {
  auto grid = square_grid(4, {2, 4});
  Tape<double> t;
  Var y = t.leaf(Tensor<double>(Shape{1, 1, 4, 4}, 1.0));
  EXPECT_EQ(scatter_intersperse(t, y, grid, 1).id, y.id);
}

TEST(WeightedForward, SingleOptionIsPlainOp) {
  std::mt19937_64 rng(3);
  auto grid = square_grid(6, {6});
  Tape<double> t;
  Var x = t.leaf(random_tensor(Shape{1, 2, 6, 6}, rng));
  Var w = t.leaf(random_tensor(Shape{3, 2, 3, 3}, rng));
  ResolutionOp<double> f = [w](Tape<double>& tp, Var in, std::size_t) {
    return conv2d(tp, in, w, Var{}, {.padding = 1});
  };
  Var y = resolution_weighted_forward(t, f, x, grid, Var{});
  EXPECT_EQ(t.value(y), t.value(conv2d(t, x, w, Var{}, {.padding = 1})));
}

TEST(WeightedForward, HalfHalfIdentity) {
  std::mt19937_64 rng(4);
  auto grid = square_grid(8, {4, 8});
  auto xv = random_tensor(Shape{1, 1, 8, 8}, rng);
  Tape<double> t;
  Var x = t.leaf(xv);
  ResolutionOp<double> id = [](Tape<double>&, Var in, std::size_t) { return in; };
  Var y = resolution_weighted_forward(t, id, x, grid, t.leaf(Tensor<double>::vector({0.5, 0.5})));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const double expect = (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.5;
      EXPECT_DOUBLE_EQ(t.value(y)[r * 8 + c], expect * xv[r * 8 + c]);
    }
}

TEST(WeightedForward, OneHotEqualsSelectedPath) {
  std::mt19937_64 rng(5);
  auto grid = square_grid(8, {2, 4, 6, 8});
  auto xv = random_tensor(Shape{2, 2, 8, 8}, rng);
  auto wv = random_tensor(Shape{3, 2, 3, 3}, rng);
  for (std::size_t pick = 0; pick < grid.size(); ++pick) {
    Tape<double> t;
    Var x = t.leaf(xv), w = t.leaf(wv);
    ResolutionOp<double> f = [w](Tape<double>& tp, Var in, std::size_t) {
      return activation(tp, conv2d(tp, in, w, Var{}, {.padding = 1}), Activation::hswish);
    };
    std::vector<double> hot(grid.size(), 0.0);
    hot[pick] = 1.0;
    Var y = resolution_weighted_forward(t, f, x, grid, t.leaf(Tensor<double>::vector(hot)));
    Var ref = scatter_intersperse(t, f(t, subsample(t, x, grid, pick), pick), grid, pick);
    EXPECT_EQ(t.value(y), t.value(ref));
    const auto& rows = grid.rows(pick);
    std::set<std::size_t> on(rows.begin(), rows.end());
    for (std::size_t i = 0; i < t.value(y).size(); ++i) {
      const std::size_t r = (i / 8) % 8, c = i % 8;
      if (!on.count(r) || !on.count(c)) {
        EXPECT_EQ(t.value(y)[i], 0.0);
      }
    }
  }
}

TEST(WeightedForward, StridedStage) {
  std::mt19937_64 rng(6);
  auto in = square_grid(8, {4, 6, 8});
  auto out = in.mapped([](std::size_t e) { return conv_out_extent(e, 3, 2, 1); });
  Tape<double> t;
  Var x = t.leaf(random_tensor(Shape{1, 2, 8, 8}, rng));
  Var w = t.leaf(random_tensor(Shape{2, 2, 3, 3}, rng));
  ResolutionOp<double> f = [w](Tape<double>& tp, Var v, std::size_t) {
    return conv2d(tp, v, w, Var{}, {.stride = 2, .padding = 1});
  };
  Var y = resolution_weighted_forward(t, f, x, in, out,
                                      t.leaf(Tensor<double>::vector({0.2, 0.3, 0.5})));
  EXPECT_EQ(t.shape(y), (Shape{1, 2, 4, 4}));
}

TEST(WeightedForward, Gradient) {
  std::mt19937_64 rng(7);
  auto grid = square_grid(6, {3, 4, 6});
  std::vector<double> eps{0.3, -0.2, 0.1};
  std::vector<double> probe(2 * 3 * 36);
  for (auto& p : probe) p = 2 * uniform01(rng) - 1;
  auto r = dmasknas::testing::check_gradients(
      {random_tensor(Shape{2, 2, 6, 6}, rng), random_tensor(Shape{3, 2, 3, 3}, rng),
       random_tensor(Shape{3}, rng)},
      [&](Tape<double>& t, const std::vector<Var>& v) {
        Var g = gumbel_softmax(t, v[2], eps, 1.5);
        ResolutionOp<double> f = [w = v[1]](Tape<double>& tp, Var in, std::size_t) {
          return activation(tp, conv2d(tp, in, w, Var{}, {.padding = 1}), Activation::hswish);
        };
        return dot_const(t, resolution_weighted_forward(t, f, v[0], grid, g), probe);
      });
  EXPECT_GT(r.checked, 40u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(WeightedForward, CoverageBlendIsConvex) {
  std::mt19937_64 rng(41);
  auto grid = square_grid(8, {4, 8});
  auto xv = random_tensor(Shape{1, 1, 8, 8}, rng);
  Tape<double> t;
  ResolutionOp<double> id = [](Tape<double>&, Var in, std::size_t) { return in; };
  Var y = resolution_weighted_forward(t, id, t.leaf(xv), grid,
                                      t.leaf(Tensor<double>::vector({0.3, 0.7})), Blend::coverage);
  // every covered pixel is a convex mix of copies of the same value
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(t.value(y)[i], xv[i], 1e-15);
}

TEST(WeightedForward, CoverageBlendOneHotMatchesSum) {
  std::mt19937_64 rng(42);
  auto grid = square_grid(8, {2, 4, 6, 8});
  auto xv = random_tensor(Shape{2, 2, 8, 8}, rng);
  auto wv = random_tensor(Shape{3, 2, 3, 3}, rng);
  for (std::size_t pick = 0; pick < grid.size(); ++pick) {
    Tape<double> t;
    Var x = t.leaf(xv), w = t.leaf(wv);
    ResolutionOp<double> f = [w](Tape<double>& tp, Var in, std::size_t) {
      return conv2d(tp, in, w, Var{}, {.padding = 1});
    };
    std::vector<double> hot(grid.size(), 0.0);
    hot[pick] = 1.0;
    Var g = t.leaf(Tensor<double>::vector(hot));
    Var a = resolution_weighted_forward(t, f, x, grid, g, Blend::coverage);
    Var b = resolution_weighted_forward(t, f, x, grid, g, Blend::sum);
    EXPECT_EQ(t.value(a), t.value(b));
  }
}

TEST(WeightedForward, CoverageBlendGradient) {
  std::mt19937_64 rng(43);
  auto grid = square_grid(6, {3, 4, 6});
  std::vector<double> eps{0.3, -0.2, 0.1};
  std::vector<double> probe(2 * 3 * 36);
  for (auto& p : probe) p = 2 * uniform01(rng) - 1;
  auto r = dmasknas::testing::check_gradients(
      {random_tensor(Shape{2, 2, 6, 6}, rng), random_tensor(Shape{3, 2, 3, 3}, rng),
       random_tensor(Shape{3}, rng)},
      [&](Tape<double>& t, const std::vector<Var>& v) {
        Var g = gumbel_softmax(t, v[2], eps, 1.5);
        ResolutionOp<double> f = [w = v[1]](Tape<double>& tp, Var in, std::size_t) {
          return activation(tp, conv2d(tp, in, w, Var{}, {.padding = 1}), Activation::hswish);
        };
        return dot_const(t, resolution_weighted_forward(t, f, v[0], grid, g, Blend::coverage),
                         probe);
      });
  EXPECT_GT(r.checked, 40u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

// Retained full-canvas maps stay fixed as options are added, while the MACs
// spent are the sum over options of the op at each size.
TEST(WeightedForward, CanvasMemoryAndSublinearCompute) {
  std::mt19937_64 rng(8);
  const std::size_t full = 16, cin = 3, cout = 4;
  auto xv = random_tensor(Shape{2, cin, full, full}, rng);
  auto wv = random_tensor(Shape{cout, cin, 3, 3}, rng);
  const double full_macs = double(cout * cin * 9 * full * full);
  for (std::vector<std::size_t> sizes :
       {std::vector<std::size_t>{16}, {8, 16}, {8, 12, 16}, {4, 8, 12, 16}, {4, 6, 8, 12, 16}}) {
    auto grid = square_grid(full, sizes);
    Tape<double> t;
    Var x = t.leaf(xv), w = t.leaf(wv, true);
    double macs = 0;
    ResolutionOp<double> f = [&](Tape<double>& tp, Var in, std::size_t) {
      macs += double(cout * cin * 9 * tp.shape(in)[2] * tp.shape(in)[3]);
      return conv2d(tp, in, w, Var{}, {.padding = 1});
    };
    std::vector<double> gv(sizes.size(), 1.0 / sizes.size());
    Var g = t.leaf(Tensor<double>::vector(gv), true);
    Var y = resolution_weighted_forward(t, f, x, grid, g);
    std::size_t maps = 0;
    for (std::size_t i = 0; i < t.node_count(); ++i) {
      Var v{static_cast<int>(i), y.tape};
      if (t.retained(v) && t.shape(v) == Shape{2, cout, full, full}) ++maps;
    }
    // The plain single-option path keeps no canvas; otherwise exactly one.
    EXPECT_EQ(maps, sizes.size() == 1 ? 0u : 1u);
    double expect = 0;
    for (auto s : sizes) expect += double(cout * cin * 9 * s * s);
    EXPECT_DOUBLE_EQ(macs, expect);
    if (sizes.size() > 1) {
      EXPECT_LT(macs, sizes.size() * full_macs);
    }
  }
}

TEST(Contamination, Examples) {
  std::vector<std::size_t> only{8};
  EXPECT_EQ(contamination_count(8, only), 0u);
  std::vector<std::size_t> a{4, 2};
  EXPECT_EQ(contamination_count(8, a), 4u);
  std::vector<std::size_t> b{8, 4};
  EXPECT_EQ(contamination_count(8, b), 16u);
}
