#include <gtest/gtest.h>

#include <random>

#include "dmasknas/channel_mask.hpp"
#include "support/gradcheck.hpp"

using namespace dmasknas;
using dmasknas::testing::random_tensor;

TEST(BuildMask, Examples) {
  std::vector<std::size_t> o3{1, 2, 3};
  std::vector<double> onehot{0, 0, 1};
  EXPECT_EQ(build_mask(o3, onehot, 3), (std::vector<double>{1, 1, 1}));

  std::vector<std::size_t> o2{1, 2};
  std::vector<double> half{0.5, 0.5};
  EXPECT_EQ(build_mask(o2, half, 2), (std::vector<double>{1.0, 0.5}));

  std::vector<std::size_t> o16{12, 16};
  std::vector<double> g{0.2, 0.8};
  auto m = build_mask(o16, g, 16);
  for (std::size_t j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(m[j], 1.0);
  for (std::size_t j = 12; j < 16; ++j) EXPECT_DOUBLE_EQ(m[j], 0.8);
}

TEST(BuildMask, Errors) {
  std::vector<double> g{0.5, 0.5};
  std::vector<std::size_t> too_big{2, 5};
  EXPECT_THROW(build_mask(too_big, g, 4), ConfigError);
  std::vector<std::size_t> dup{2, 2};
  EXPECT_THROW(build_mask(dup, g, 4), ConfigError);
  std::vector<std::size_t> unordered{3, 2};
  EXPECT_THROW(build_mask(unordered, g, 4), ConfigError);
}

TEST(BuildMask, MonotoneAndOneHotProperty) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng() % 24;
    std::vector<std::size_t> opts;
    for (std::size_t c = 1; c < k; ++c)
      if (rng() % 3 == 0) opts.push_back(c);
    opts.push_back(k);
    std::vector<double> g(opts.size());
    double s = 0;
    for (auto& v : g) s += (v = 0.01 + uniform01(rng));
    for (auto& v : g) v /= s;
    auto m = build_mask(opts, g, k);
    EXPECT_NEAR(m[0], 1.0, 1e-12);
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_GT(m[j], 0.0);
      EXPECT_LE(m[j], 1.0 + 1e-12);
      if (j > 0) {
        EXPECT_LE(m[j], m[j - 1]);
      }
    }
    const std::size_t pick = rng() % opts.size();
    std::vector<double> hot(opts.size(), 0.0);
    hot[pick] = 1.0;
    auto mh = build_mask(opts, hot, k);
    for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(mh[j], j < opts[pick] ? 1.0 : 0.0);
  }
}

TEST(BuildMask, JacobianIsIndicator) {
  std::vector<std::size_t> opts{2, 3, 5};
  for (std::size_t j = 0; j < 5; ++j) {
    Tape<double> t;
    Var g = t.leaf(Tensor<double>::vector({0.2, 0.3, 0.5}), true);
    Var m = build_mask(t, g, opts, 5);
    std::vector<double> pick(5, 0.0);
    pick[j] = 1.0;
    auto grads = t.backward(dot_const(t, m, pick));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(grads[g][i], opts[i] > j ? 1.0 : 0.0);
  }
}

namespace {

// Sub-block i of a slimmable conv: first `c` filters of a shared weight.
BlockFn<double> slim_conv(Var w, std::size_t c, Activation act) {
  return [w, c, act](Tape<double>& t, Var x) {
    Var wi = narrow(t, w, 0, 0, c);
    return activation(t, conv2d(t, x, wi, Var{}, {.padding = 1}), act);
  };
}

struct Equivalence {
  double forward = 0, weight_grad = 0, alpha_grad = 0;
};

Equivalence compare_masked_naive(std::mt19937_64& rng) {
  const std::size_t cin = 1 + rng() % 3, k = 2 + rng() % 6, side = 3 + rng() % 3;
  std::vector<std::size_t> opts;
  for (std::size_t c = 1; c < k; ++c)
    if (rng() % 2) opts.push_back(c);
  opts.push_back(k);
  auto xv = random_tensor(Shape{2, cin, side, side}, rng);
  auto wv = random_tensor(Shape{k, cin, 3, 3}, rng);
  Tensor<double> av(Shape{opts.size()});
  for (std::size_t i = 0; i < opts.size(); ++i) av[i] = 2 * uniform01(rng) - 1;
  auto eps = sample_gumbel_noise(opts.size(), rng);
  const double tau = 0.5 + 4 * uniform01(rng);
  const Activation act = (rng() % 2) ? Activation::hswish : Activation::relu;
  std::vector<double> probe(2 * k * side * side);
  for (auto& p : probe) p = 2 * uniform01(rng) - 1;

  auto run = [&](bool masked) {
    Tape<double> t;
    Var x = t.leaf(xv);
    Var w = t.leaf(wv, true);
    Var a = t.leaf(av, true);
    Var g = gumbel_softmax(t, a, eps, tau);
    Var y;
    if (masked) {
      y = masked_block_forward(t, slim_conv(w, k, act), x, build_mask(t, g, opts, k));
    } else {
      std::vector<BlockFn<double>> blocks;
      for (auto c : opts) blocks.push_back(slim_conv(w, c, act));
      y = naive_forward_eq1<double>(t, blocks, x, g, k);
    }
    auto out = t.value(y);
    auto grads = t.backward(dot_const(t, y, probe));
    return std::make_tuple(out, grads[w], grads[a]);
  };
  auto [ym, wm, am] = run(true);
  auto [yn, wn, an] = run(false);
  auto maxdiff = [](const Tensor<double>& a, const Tensor<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
  };
  return {maxdiff(ym, yn), maxdiff(wm, wn), maxdiff(am, an)};
}

}  // namespace

TEST(MaskedBlock, OneHotCases) {
  std::mt19937_64 rng(8);
  auto xv = random_tensor(Shape{1, 2, 4, 4}, rng);
  auto wv = random_tensor(Shape{6, 2, 3, 3}, rng);
  std::vector<std::size_t> opts{2, 4, 6};
  for (std::size_t pick = 0; pick < 3; ++pick) {
    Tape<double> t;
    Var x = t.leaf(xv), w = t.leaf(wv);
    std::vector<double> hot(3, 0.0);
    hot[pick] = 1;
    Var g = t.leaf(Tensor<double>::vector(hot));
    auto block = slim_conv(w, 6, Activation::relu);
    const auto& ref = t.value(block(t, x));
    const auto& y = t.value(masked_block_forward(t, block, x, build_mask(t, g, opts, 6)));
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t p = 0; p < 16; ++p) {
        const std::size_t i = c * 16 + p;
        if (c < opts[pick])
          EXPECT_EQ(y[i], ref[i]);
        else
          EXPECT_EQ(y[i], 0.0);
      }
  }
}

TEST(MaskedBlock, ChannelMismatch) {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>(Shape{1, 2, 4, 4}, 1.0));
  Var w = t.leaf(Tensor<double>(Shape{5, 2, 3, 3}, 0.1));
  std::vector<std::size_t> opts{2, 4};
  Var m = build_mask(t, t.leaf(Tensor<double>::vector({0.5, 0.5})), opts, 4);
  EXPECT_THROW(masked_block_forward(t, slim_conv(w, 5, Activation::relu), x, m), ShapeError);
}

TEST(NaiveForward, SingleAndOneHot) {
  std::mt19937_64 rng(9);
  auto xv = random_tensor(Shape{1, 2, 4, 4}, rng);
  Tape<double> t;
  Var x = t.leaf(xv);
  Var w1 = t.leaf(random_tensor(Shape{3, 2, 3, 3}, rng));
  Var w2 = t.leaf(random_tensor(Shape{5, 2, 3, 3}, rng));
  std::vector<BlockFn<double>> one{slim_conv(w1, 3, Activation::relu)};
  Var y1 = naive_forward_eq1<double>(t, one, x, t.leaf(Tensor<double>::vector({1.0})), 5);
  Var ref = pad_dim(t, one[0](t, x), 1, 5);
  EXPECT_EQ(t.value(y1), t.value(ref));

  std::vector<BlockFn<double>> two{slim_conv(w1, 3, Activation::relu),
                                   slim_conv(w2, 5, Activation::relu)};
  Var y2 = naive_forward_eq1<double>(t, two, x, t.leaf(Tensor<double>::vector({1.0, 0.0})), 5);
  EXPECT_EQ(t.value(y2), t.value(ref));

  EXPECT_THROW(naive_forward_eq1<double>(t, two, x, t.leaf(Tensor<double>::vector({1.0, 0.0})), 4),
               ShapeError);
}

TEST(Equivalence, MaskedMatchesNaiveWithSharedWeights) {
  std::mt19937_64 rng(123456);
  Equivalence worst;
  for (int trial = 0; trial < 50; ++trial) {
    auto e = compare_masked_naive(rng);
    worst.forward = std::max(worst.forward, e.forward);
    worst.weight_grad = std::max(worst.weight_grad, e.weight_grad);
    worst.alpha_grad = std::max(worst.alpha_grad, e.alpha_grad);
  }
  EXPECT_LT(worst.forward, 1e-9);
  EXPECT_LT(worst.weight_grad, 1e-7);
  EXPECT_LT(worst.alpha_grad, 1e-7);
}

// Hidden-layer mask of an inverted residual block versus the sum of
// explicitly narrowed sub-blocks sharing weights.
TEST(Equivalence, ExpansionMaskMatchesNarrowedBlocks) {
  std::mt19937_64 rng(77);
  std::vector<std::size_t> widths{3, 5, 8};
  auto xv = random_tensor(Shape{2, 4, 5, 5}, rng);
  auto we = random_tensor(Shape{8, 4, 1, 1}, rng);
  auto wd = random_tensor(Shape{8, 1, 3, 3}, rng);
  auto wp = random_tensor(Shape{6, 8, 1, 1}, rng);
  std::vector<double> g{0.2, 0.5, 0.3};
  auto hidden = [&](Tape<double>& t, Var x, std::size_t e) {
    Var h = activation(t, conv2d(t, x, narrow(t, t.leaf(we), 0, 0, e), Var{}), Activation::hswish);
    return activation(t, conv2d(t, h, narrow(t, t.leaf(wd), 0, 0, e), Var{},
                                {.padding = 1, .groups = e}),
                      Activation::hswish);
  };
  Tape<double> t;
  Var x = t.leaf(xv);
  Var m = build_mask(t, t.leaf(Tensor<double>::vector(g)), widths, 8);
  Var masked = conv2d(t, scale_channels(t, hidden(t, x, 8), m), t.leaf(wp), Var{});
  Var naive{};
  for (std::size_t i = 0; i < widths.size(); ++i) {
    Var wpi = narrow(t, t.leaf(wp), 1, 0, widths[i]);
    Var term = scale(t, conv2d(t, hidden(t, x, widths[i]), wpi, Var{}), g[i]);
    naive = naive.valid() ? add(t, naive, term) : term;
  }
  for (std::size_t i = 0; i < t.value(masked).size(); ++i)
    EXPECT_NEAR(t.value(masked)[i], t.value(naive)[i], 1e-9);
}

namespace {
std::size_t retained_maps(const Tape<double>& t, std::uint32_t tape, const Shape& map) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.node_count(); ++i) {
    Var v{static_cast<int>(i), tape};
    if (t.retained(v) && t.shape(v) == map) ++n;
  }
  return n;
}
}  // namespace

// Full-width feature maps kept for backward: the masked form keeps the same
// set for any option count, the naive form one more per extra option.
TEST(Memory, MaskedIsConstantNaiveGrowsPerOption) {
  std::mt19937_64 rng(10);
  const std::size_t k = 12;
  auto xv = random_tensor(Shape{2, 3, 6, 6}, rng);
  auto wv = random_tensor(Shape{k, 3, 3, 3}, rng);
  const Shape map{2, k, 6, 6};
  std::vector<std::size_t> masked_counts, masked_maps, naive_counts, naive_maps;
  for (std::size_t m : {1u, 2u, 3u, 4u, 6u, 12u}) {
    std::vector<std::size_t> opts;
    for (std::size_t i = 1; i <= m; ++i) opts.push_back(i * k / m);
    std::vector<double> gv(m, 1.0 / m);
    {
      Tape<double> t;
      Var x = t.leaf(xv), w = t.leaf(wv, true);
      Var g = t.leaf(Tensor<double>::vector(gv), true);
      Var y = masked_block_forward(t, slim_conv(w, k, Activation::relu), x,
                                   build_mask(t, g, opts, k));
      masked_counts.push_back(t.element_count());
      masked_maps.push_back(retained_maps(t, y.tape, map));
    }
    {
      Tape<double> t;
      Var x = t.leaf(xv), w = t.leaf(wv, true);
      Var g = t.leaf(Tensor<double>::vector(gv), true);
      std::vector<BlockFn<double>> blocks;
      for (auto c : opts) blocks.push_back(slim_conv(w, c, Activation::relu));
      Var y = naive_forward_eq1<double>(t, blocks, x, g, k);
      naive_counts.push_back(t.element_count());
      naive_maps.push_back(retained_maps(t, y.tape, map));
    }
  }
  const std::size_t ms[] = {1, 2, 3, 4, 6, 12};
  for (std::size_t i = 0; i < masked_counts.size(); ++i) {
    EXPECT_EQ(masked_counts[i], masked_counts[0]);
    EXPECT_EQ(masked_maps[i], masked_maps[0]);
    EXPECT_EQ(naive_maps[i], masked_maps[0] + ms[i] - 1);
  }
  for (std::size_t i = 1; i < naive_counts.size(); ++i)
    EXPECT_GT(naive_counts[i], naive_counts[i - 1]);
}

TEST(Expansion, TableRow) {
  std::vector<double> rates;
  for (double r = 0.75; r <= 3.25 + 1e-9; r += 0.5) rates.push_back(r);
  auto e = expansion_options(rates, 16);
  EXPECT_EQ(e.widths, (std::vector<std::size_t>{12, 20, 28, 36, 44, 52}));
}

TEST(Expansion, RoundingAndDedup) {
  std::vector<double> rates{0.5, 0.6, 1.0};
  auto e = expansion_options(rates, 3);  // 1.5->2, 1.8->2, 3
  EXPECT_EQ(e.widths, (std::vector<std::size_t>{2, 3}));
  std::vector<double> one{1.0};
  EXPECT_EQ(expansion_options(one, 8).widths, (std::vector<std::size_t>{8}));
  std::vector<double> tiny{0.01};
  EXPECT_THROW(expansion_options(tiny, 8), ConfigError);
}
