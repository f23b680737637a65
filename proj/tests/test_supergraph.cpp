#include <gtest/gtest.h>

#include <random>

#include "dmasknas/concrete.hpp"
#include "dmasknas/supergraph.hpp"
#include "dmasknas/counters.hpp"
#include "support/gradcheck.hpp"

using namespace dmasknas;
using dmasknas::testing::random_tensor;

namespace {

ArchitectureDescriptor random_descriptor(const SearchSpaceSpec& sp, std::mt19937_64& rng) {
  ArchitectureDescriptor d;
  d.space = sp.name;
  d.resolution = sp.resolutions[rng() % sp.resolutions.size()];
  d.head = fixed_widths(sp);
  for (const auto& p : plan_layers(sp))
    d.layers.push_back(make_choice(p, rng() % p.types.size(), rng() % p.e.widths.size(),
                                   rng() % p.f_options.size()));
  return d;
}

// Perturb the affine parameters so that masked-out channels carry nonzero values.
void randomize(ParamStore<double>& ps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& e : ps.entries())
    if (!e.decay)
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += u(rng);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Supergraph, Structure) {
  Supergraph<double> sg(load_search_space("desk-f"), 1);
  const auto& ch = sg.choices();
  ASSERT_GE(ch.size(), 1u);
  EXPECT_EQ(ch[0].name(), "resolution");
  EXPECT_EQ(ch[0].arity(), 3u);
  EXPECT_EQ(sg.searched_layer_count(), 5u);
  // first searched layer: 9 types, single e (no choice), f {4, 8}
  EXPECT_EQ(ch[1].name(), "stage1.0.type");
  EXPECT_EQ(ch[1].arity(), 9u);
  EXPECT_EQ(ch[2].name(), "stage1.0.f");
  EXPECT_EQ(ch[2].arity(), 2u);
  EXPECT_EQ(ch[3].name(), "stage2.0.type");
  EXPECT_EQ(ch[3].arity(), 8u);
  EXPECT_EQ(ch[4].name(), "stage2.0.e");
  EXPECT_EQ(ch[4].arity(), 3u);
}

TEST(Supergraph, TwoTypeLayerHasOneChoiceOfArityTwo) {
  const char* text = R"({
    "input": {"channels": 3, "resolutions": [8]},
    "micro": ["ir_k3", "ir_k5_se"],
    "stages": [
      {"b": "TBS", "e": 1, "f": 8, "n": 1, "s": 2, "max_input": [8, 8, 3]},
      {"b": "avgpl", "max_input": [4, 4, 8]},
      {"b": "fc", "f": 2, "max_input": [8]}
    ]})";
  Supergraph<double> sg(parse_search_space(text), 3);
  ASSERT_EQ(sg.choices().size(), 1u);
  EXPECT_EQ(sg.choices()[0].arity(), 2u);
}

TEST(Supergraph, ExtractUntrainedAndHandSet) {
  Supergraph<double> sg(load_search_space("desk-f"), 1);
  const auto d = sg.extract();
  EXPECT_EQ(d.resolution, 8u);
  for (const auto& l : d.layers) EXPECT_EQ(l.block, "ir_k3");
  EXPECT_EQ(d.layers[1].hidden, 6u);
  EXPECT_EQ(d.layers[1].f, 8u);

  // layer 1 (stage2.0): favour ir_k5_se_hs, e = 2.25, f = 12
  auto& ch = sg.choices();
  auto find = [&](const std::string& name) -> GumbelChoice<double>& {
    for (auto& c : ch)
      if (c.name() == name) return c;
    throw std::runtime_error(name);
  };
  find("stage2.0.type").alpha()[7] = 2.0;
  find("stage2.0.e").alpha()[2] = 1.0;
  find("stage2.0.f").alpha()[1] = 0.5;
  find("resolution").alpha()[2] = 0.1;
  const auto h = sg.extract();
  EXPECT_EQ(h.resolution, 16u);
  EXPECT_EQ(h.layers[1].block, "ir_k5_se_hs");
  EXPECT_EQ(h.layers[1].kernel, 5u);
  EXPECT_TRUE(h.layers[1].se);
  EXPECT_EQ(h.layers[1].act, "hswish");
  EXPECT_EQ(h.layers[1].e, 2.25);
  EXPECT_EQ(h.layers[1].hidden, 18u);
  EXPECT_EQ(h.layers[1].f, 12u);
  EXPECT_NO_THROW(validate_descriptor(h, sg.spec()));
}

TEST(Supergraph, OneHotForwardEqualsConcreteNetwork) {
  const auto sp = load_search_space("desk-f");
  Supergraph<double> sg(sp, 11);
  std::mt19937_64 rng(12);
  randomize(sg.params(), rng);
  const auto x = random_tensor(Shape{2, 1, 16, 16}, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const auto d = random_descriptor(sp, rng);
    ConcreteNet<double> net(sp, d, 5);
    net.load_from(sg.params());

    Tape<double> ts;
    Var ls = sg.forward(ts, sg.bind_fixed(ts, sg.one_hot(d)), ts.constant(x));
    Tape<double> tc;
    Var lc = net.forward(tc, net.bind(tc), tc.constant(x));
    EXPECT_LT(max_abs_diff(ts.value(ls), tc.value(lc)), 1e-9) << serialize(d);
  }
}

TEST(Supergraph, OneHotCostEqualsBruteForceCounters) {
  const auto sp = load_search_space("desk-f");
  Supergraph<double> sg(sp, 2);
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = random_descriptor(sp, rng);
    ConcreteNet<double> net(sp, d, 3);
    Tape<double> tc;
    net.forward(tc, net.bind(tc), tc.constant(Tensor<double>(Shape{1, 1, 16, 16})));
    const auto counts = dmasknas::count_tape(tc);

    Tape<double> t;
    auto b = sg.bind_fixed(t, sg.one_hot(d));
    const double flops = value_of(t, sg.cost(t, b, CostMode::flop));
    const double params = value_of(t, sg.cost(t, b, CostMode::param));
    EXPECT_EQ(flops, counts.macs) << serialize(d);
    EXPECT_EQ(params, counts.weights) << serialize(d);
    EXPECT_EQ(net.cost(CostMode::flop), counts.macs);
    EXPECT_EQ(net.cost(CostMode::param), counts.weights);
  }
}

TEST(Supergraph, CostRowsSumToTotal) {
  Supergraph<double> sg(load_search_space("desk-f"), 2);
  Tape<double> t;
  auto b = sg.bind(t, Trainable::alpha, 5.0, false);
  std::vector<CostRow> rows;
  const double total = value_of(t, sg.cost(t, b, CostMode::flop, &rows));
  EXPECT_EQ(rows.size(), sg.searched_layer_count() + 3);
  EXPECT_NEAR(total_of(rows, CostMode::flop), total, 1e-9 * total);
  // uniform weights sit strictly between the smallest and largest architectures
  for (const auto& r : rows) EXPECT_GT(r.flops, 0.0) << r.name;
}

TEST(Supergraph, MaskedEqualsNaiveOnNetwork) {
  const auto sp = load_search_space("desk-f");
  Supergraph<double> sg(sp, 21);
  std::mt19937_64 rng(22);
  randomize(sg.params(), rng);
  const auto x = random_tensor(Shape{2, 1, 16, 16}, rng);
  const std::vector<int> labels{3, 5};
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::vector<double>> eps;
    for (const auto& c : sg.choices()) {
      auto stream = make_stream(trial, 0);
      eps.push_back(sample_gumbel_noise(c.arity(), stream));
    }
    std::vector<Tensor<double>> out;
    std::vector<std::vector<Tensor<double>>> grads;
    for (MaskMode mode : {MaskMode::masked, MaskMode::naive}) {
      Tape<double> t;
      std::mt19937_64 arng(1000 + trial);  // same alpha draws in both modes
      std::vector<Var> alpha;
      for (const auto& c : sg.choices())
        alpha.push_back(t.leaf(random_tensor(Shape{c.arity()}, arng), true));
      Binding b = sg.bind_with(t, alpha, eps, 1.0, true);
      Var logits = sg.forward(t, b, t.constant(x), mode);
      auto gr = t.backward(softmax_cross_entropy<double>(t, logits, labels));
      out.push_back(t.value(logits));
      std::vector<Tensor<double>> g;
      for (Var v : b.params) g.push_back(gr[v]);
      for (Var v : b.alpha) g.push_back(gr[v]);
      grads.push_back(std::move(g));
    }
    EXPECT_LT(max_abs_diff(out[0], out[1]), 1e-9);
    for (std::size_t i = 0; i < grads[0].size(); ++i)
      EXPECT_LT(max_abs_diff(grads[0][i], grads[1][i]), 1e-7) << "param " << i;
  }
}

TEST(Supergraph, CostGradientMatchesFiniteDifferences) {
  Supergraph<double> sg(load_search_space("desk-f"), 4);
  std::mt19937_64 rng(8);
  std::vector<Tensor<double>> alphas;
  std::vector<std::vector<double>> eps;
  for (const auto& c : sg.choices()) {
    alphas.push_back(random_tensor(Shape{c.arity()}, rng));
    eps.emplace_back(c.arity(), 0.0);
  }
  for (CostMode mode : {CostMode::flop, CostMode::param}) {
    auto f = [&](Tape<double>& t, const std::vector<Var>& a) {
      Binding b = sg.bind_with(t, a, eps, 1.0);
      return scale(t, sg.cost(t, b, mode).v, mode == CostMode::flop ? 1e-4 : 1e-2);
    };
    auto r = dmasknas::testing::check_gradients(alphas, f);
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_GT(r.checked, 20u);
  }
}

TEST(Supergraph, RejectsWrongInput) {
  Supergraph<double> sg(load_search_space("desk-f"), 1);
  Tape<double> t;
  auto b = sg.bind(t, Trainable::none, 1.0, false);
  EXPECT_THROW(sg.forward(t, b, t.constant(Tensor<double>(Shape{1, 1, 12, 12}))), ShapeError);
  EXPECT_THROW(sg.bind_fixed(t, {}), ShapeError);
}

TEST(ConcreteNet, LeadingSlice) {
  Tensor<double> src(Shape{3, 4});
  for (std::size_t i = 0; i < 12; ++i) src[i] = double(i);
  auto s = leading_slice(src, Shape{2, 3});
  EXPECT_EQ(s.data()[0], 0.0);
  EXPECT_EQ(s.data()[3], 4.0);
  EXPECT_EQ(s.data()[5], 6.0);
  EXPECT_THROW(leading_slice(src, Shape{4, 1}), ShapeError);
}
