#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmasknas/concrete.hpp"
#include "dmasknas/data.hpp"
#include "dmasknas/optim.hpp"
#include "dmasknas/supergraph.hpp"

namespace dmasknas {

// RNG stream ids derived from the run seed.
inline constexpr std::uint64_t kShuffleWeights = 0x7701;
inline constexpr std::uint64_t kShuffleAlpha = 0x7702;
inline constexpr std::uint64_t kSplitSeedOffset = 0x3301;

struct SearchConfig {
  std::string space = "desk-f";
  std::size_t epochs = 30, batch = 32;
  double lambda = 1e-3;
  CostMode cost_mode = CostMode::flop;
  double cost_unit = 1000;  // cost is divided by this before weighting by lambda
  double tau0 = 5.0, rho = 0.045;
  SgdConfig sgd{};
  AdamConfig adam{};
  double clip = 5.0;
  double split = 0.8;
  std::uint64_t seed = 0;
  MaskMode mask_mode = MaskMode::masked;

  nlohmann::json to_json() const {
    return {{"space", space},        {"epochs", epochs},
            {"batch", batch},        {"lambda", lambda},
            {"cost_mode", to_string(cost_mode)},
            {"cost_unit", cost_unit}, {"tau0", tau0},
            {"rho", rho},            {"lr_w", sgd.lr},
            {"momentum", sgd.momentum}, {"weight_decay", sgd.weight_decay},
            {"lr_alpha", adam.lr},   {"clip", clip},
            {"split", split},        {"seed", seed},
            {"mask_mode", mask_mode == MaskMode::masked ? "masked" : "naive"}};
  }

  // Keys present in `j` override the current values.
  void merge(const nlohmann::json& j) {
    try {
      space = j.value("space", space);
      epochs = j.value("epochs", epochs);
      batch = j.value("batch", batch);
      lambda = j.value("lambda", lambda);
      if (j.contains("cost_mode")) cost_mode = parse_cost_mode(j.at("cost_mode").get<std::string>());
      cost_unit = j.value("cost_unit", cost_unit);
      tau0 = j.value("tau0", tau0);
      rho = j.value("rho", rho);
      sgd.lr = j.value("lr_w", sgd.lr);
      sgd.momentum = j.value("momentum", sgd.momentum);
      sgd.weight_decay = j.value("weight_decay", sgd.weight_decay);
      adam.lr = j.value("lr_alpha", adam.lr);
      clip = j.value("clip", clip);
      split = j.value("split", split);
      seed = j.value("seed", seed);
      if (j.contains("mask_mode")) {
        const auto m = j.at("mask_mode").get<std::string>();
        if (m != "masked" && m != "naive") throw ConfigError("mask_mode must be masked or naive");
        mask_mode = m == "masked" ? MaskMode::masked : MaskMode::naive;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("search config: ") + e.what());
    }
    validate();
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
    if (!(cost_unit > 0)) throw ConfigError("cost_unit must be > 0");
    if (!(tau0 > 0)) throw ConfigError("tau0 must be > 0");
  }
};

struct LogRow {
  std::size_t epoch = 0;
  std::string phase;
  double tau = 0, ce = 0, cost_total = 0, effective_flops = 0, wall_time = 0;
};

inline std::string csv_header() {
  return "epoch,phase,tau,ce,cost_total,effective_flops,wall_time\n";
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_line(const LogRow& r) {
  return std::to_string(r.epoch) + "," + r.phase + "," + format_double(r.tau) + "," +
         format_double(r.ce) + "," + format_double(r.cost_total) + "," +
         format_double(r.effective_flops) + "," + format_double(r.wall_time) + "\n";
}

// Writes to a temporary sibling, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& text) {
  namespace fs = std::filesystem;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t k = logits.shape()[1];
  std::size_t c = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    c += argmax_option<T>(logits.data().subspan(i * k, k)) == std::size_t(labels[i]);
  return c;
}

template <class Fn>
void for_each_batch(const std::vector<std::size_t>& order, std::size_t batch, Fn&& fn) {
  for (std::size_t s = 0; s < order.size(); s += batch)
    fn(std::span<const std::size_t>(order.data() + s, std::min(batch, order.size() - s)));
}

// Weight and optimizer tensors of a parameter store.
template <class T>
std::vector<Tensor<T>*> param_pointers(ParamStore<T>& ps) {
  std::vector<Tensor<T>*> v;
  for (auto& e : ps.entries()) v.push_back(&e.value);
  return v;
}

template <class T>
std::vector<bool> decay_flags(const ParamStore<T>& ps) {
  std::vector<bool> v;
  for (const auto& e : ps.entries()) v.push_back(e.decay);
  return v;
}

// Alternating search: each epoch updates weights (SGD, CE only) on one split,
// then alphas (Adam, CE + lambda * cost) on the other; tau anneals per epoch.
template <class T>
class Searcher {
 public:
  using Clock = std::chrono::steady_clock;

  Searcher(SearchConfig cfg, SearchSpaceSpec spec, const Dataset& data)
      : cfg_(std::move(cfg)),
        graph_(std::move(spec), cfg_.seed),
        data_(data),
        sgd_(cfg_.sgd),
        adam_(cfg_.adam),
        rng_w_(make_stream(cfg_.seed, kShuffleWeights)),
        rng_a_(make_stream(cfg_.seed, kShuffleAlpha)) {
    cfg_.validate();
    if (data.c != graph_.spec().input_channels || data.h != graph_.full_resolution() ||
        data.w != graph_.full_resolution())
      throw ConfigError("dataset images are " + std::to_string(data.c) + "x" +
                        std::to_string(data.h) + "x" + std::to_string(data.w) +
                        ", search space expects " + std::to_string(graph_.spec().input_channels) +
                        "x" + std::to_string(graph_.full_resolution()) + "x" +
                        std::to_string(graph_.full_resolution()));
    if (data.classes > graph_.classes())
      throw ConfigError("dataset has more classes than the classifier");
    split_ = split_dataset(data.n, cfg_.split, cfg_.seed + kSplitSeedOffset);
  }

  const SearchConfig& config() const noexcept { return cfg_; }
  Supergraph<T>& graph() noexcept { return graph_; }
  const Supergraph<T>& graph() const noexcept { return graph_; }
  const Split& split() const noexcept { return split_; }
  std::size_t epoch() const noexcept { return epoch_; }
  bool done() const noexcept { return epoch_ >= cfg_.epochs; }
  const std::vector<LogRow>& log() const noexcept { return log_; }
  const std::vector<double>& weight_step_losses() const noexcept { return step_losses_; }
  double tau() const { return temperature_at(cfg_.tau0, cfg_.rho, epoch_); }

  // Called after every logged row (used to stream the CSV).
  std::function<void(const LogRow&)> on_row;

  void run_epoch() {
    if (done()) return;
    auto start = Clock::now();
    const double tau = this->tau();
    // Phase 1: weights.
    {
      std::vector<std::size_t> order = split_.first;
      shuffle_indices(order, rng_w_);
      double ce_sum = 0, cost_sum = 0;
      std::size_t batches = 0;
      for_each_batch(order, cfg_.batch, [&](std::span<const std::size_t> idx) {
        Tape<T> t;
        Binding b = graph_.bind(t, Trainable::weights, tau);
        const auto labels = batch_labels(data_, idx);
        Var logits = graph_.forward(t, b, t.constant(batch_images<T>(data_, idx)), cfg_.mask_mode);
        Var ce = softmax_cross_entropy<T>(t, logits, labels);
        const double cost = value_of(t, graph_.cost(t, b, cfg_.cost_mode));
        auto g = t.backward(ce);
        std::vector<Tensor<T>> grads;
        for (Var v : b.params) grads.push_back(g[v]);
        clip_global_norm(grads, cfg_.clip);
        sgd_.step(param_pointers(graph_.params()), grads, decay_flags(graph_.params()));
        const double l = t.value(ce).item();
        step_losses_.push_back(l);
        ce_sum += l;
        cost_sum += cost;
        ++batches;
      });
      push_row("weights", tau, ce_sum / double(batches), cost_sum / double(batches), start);
    }
    // Phase 2: architecture parameters.
    if (!graph_.choices().empty()) {
      std::vector<std::size_t> order = split_.second;
      shuffle_indices(order, rng_a_);
      double ce_sum = 0, cost_sum = 0;
      std::size_t batches = 0;
      for_each_batch(order, cfg_.batch, [&](std::span<const std::size_t> idx) {
        Tape<T> t;
        Binding b = graph_.bind(t, Trainable::alpha, tau);
        const auto labels = batch_labels(data_, idx);
        Var logits = graph_.forward(t, b, t.constant(batch_images<T>(data_, idx)), cfg_.mask_mode);
        Var ce = softmax_cross_entropy<T>(t, logits, labels);
        Scalar cost = graph_.cost(t, b, cfg_.cost_mode);
        Var loss = ce;
        if (cfg_.lambda > 0 && cost.is_var())
          loss = add(t, ce, scale(t, cost.v, T(cfg_.lambda / cfg_.cost_unit)));
        auto g = t.backward(loss);
        std::vector<Tensor<T>> grads;
        for (Var v : b.alpha) grads.push_back(g[v]);
        clip_global_norm(grads, cfg_.clip);
        std::vector<Tensor<T>*> ptrs;
        for (auto& c : graph_.choices()) ptrs.push_back(&c.alpha());
        adam_.step(ptrs, grads);
        ce_sum += t.value(ce).item();
        cost_sum += value_of(t, cost);
        ++batches;
      });
      push_row("alpha", tau, ce_sum / double(batches), cost_sum / double(batches), start);
    }
    ++epoch_;
  }

  // FLOP cost with noise-free weights at the current temperature.
  double effective_flops() const {
    Tape<T> t;
    auto& g = const_cast<Supergraph<T>&>(graph_);
    Binding b = g.bind(t, Trainable::none, tau(), false);
    return value_of(t, g.cost(t, b, CostMode::flop));
  }

  ArchitectureDescriptor descriptor() const { return graph_.extract(); }

  nlohmann::json checkpoint() const {
    nlohmann::json j;
    j["version"] = 1;
    j["config"] = cfg_.to_json();
    j["epoch"] = epoch_;
    j["elapsed"] = elapsed_;
    std::vector<Tensor<T>> params, alphas;
    std::vector<std::string> rng_states;
    for (const auto& e : graph_.params().entries()) params.push_back(e.value);
    for (const auto& c : graph_.choices()) {
      alphas.push_back(c.alpha());
      rng_states.push_back(c.rng_state());
    }
    j["params"] = tensors_to_json(params);
    j["alphas"] = tensors_to_json(alphas);
    j["choice_rng"] = rng_states;
    auto& self = const_cast<Searcher&>(*this);
    j["sgd"] = {{"steps", sgd_.steps()}, {"velocity", tensors_to_json(self.sgd_.velocity())}};
    j["adam"] = {{"steps", adam_.steps()},
                 {"m", tensors_to_json(self.adam_.first_moment())},
                 {"v", tensors_to_json(self.adam_.second_moment())}};
    j["rng_w"] = engine_state(rng_w_);
    j["rng_a"] = engine_state(rng_a_);
    j["step_losses"] = step_losses_;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : log_)
      rows.push_back({r.epoch, r.phase, r.tau, r.ce, r.cost_total, r.effective_flops, r.wall_time});
    j["log"] = rows;
    return j;
  }

  void restore(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != 1) throw ConfigError("checkpoint: unsupported version");
      if (j.at("config") != cfg_.to_json())
        throw ConfigError("checkpoint was written with a different configuration");
      auto params = tensors_from_json<T>(j.at("params"));
      auto alphas = tensors_from_json<T>(j.at("alphas"));
      const auto rng_states = j.at("choice_rng").get<std::vector<std::string>>();
      auto& entries = graph_.params().entries();
      if (params.size() != entries.size() || alphas.size() != graph_.choices().size())
        throw ConfigError("checkpoint does not match the search space");
      for (std::size_t i = 0; i < entries.size(); ++i) {
        if (params[i].shape() != entries[i].value.shape())
          throw ConfigError("checkpoint parameter shape mismatch: " + entries[i].name);
        entries[i].value = std::move(params[i]);
      }
      for (std::size_t i = 0; i < alphas.size(); ++i) {
        graph_.choices()[i].alpha() = std::move(alphas[i]);
        graph_.choices()[i].set_rng_state(rng_states.at(i));
      }
      sgd_.set_steps(j.at("sgd").at("steps").get<std::size_t>());
      sgd_.velocity() = tensors_from_json<T>(j.at("sgd").at("velocity"));
      adam_.set_steps(j.at("adam").at("steps").get<std::size_t>());
      adam_.first_moment() = tensors_from_json<T>(j.at("adam").at("m"));
      adam_.second_moment() = tensors_from_json<T>(j.at("adam").at("v"));
      restore_engine(rng_w_, j.at("rng_w").get<std::string>());
      restore_engine(rng_a_, j.at("rng_a").get<std::string>());
      step_losses_ = j.at("step_losses").get<std::vector<double>>();
      log_.clear();
      for (const auto& r : j.at("log"))
        log_.push_back(LogRow{r.at(0).get<std::size_t>(), r.at(1).get<std::string>(),
                              r.at(2).get<double>(), r.at(3).get<double>(), r.at(4).get<double>(),
                              r.at(5).get<double>(), r.at(6).get<double>()});
      epoch_ = j.at("epoch").get<std::size_t>();
      elapsed_ = j.at("elapsed").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("checkpoint: ") + e.what());
    }
  }

 private:
  void push_row(const char* phase, double tau, double ce, double cost, Clock::time_point& start) {
    const auto now = Clock::now();
    elapsed_ += std::chrono::duration<double>(now - start).count();
    start = now;
    LogRow r{epoch_, phase, tau, ce, cost, effective_flops(), elapsed_};
    log_.push_back(r);
    if (on_row) on_row(r);
  }

  SearchConfig cfg_;
  Supergraph<T> graph_;
  const Dataset& data_;
  Sgd<T> sgd_;
  Adam<T> adam_;
  std::mt19937_64 rng_w_, rng_a_;
  Split split_;
  std::size_t epoch_ = 0;
  double elapsed_ = 0;
  std::vector<LogRow> log_;
  std::vector<double> step_losses_;
};

// Run directory layout.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path checkpoint() const { return root / "checkpoints" / "search.json"; }
  std::filesystem::path log() const { return root / "logs" / "search.csv"; }
  std::filesystem::path descriptor() const { return root / "descriptor.json"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

struct SearchOutcome {
  ArchitectureDescriptor descriptor;
  std::vector<LogRow> log;
  bool completed = false;
};

// Full search with per-epoch checkpoints. `stop_after` > 0 ends the process
// early after that many epochs (an interruption), leaving a resumable checkpoint.
template <class T>
SearchOutcome run_search(const SearchConfig& cfg, const SearchSpaceSpec& spec, const Dataset& data,
                         const RunPaths& paths, bool resume = false, std::size_t stop_after = 0) {
  namespace fs = std::filesystem;
  Searcher<T> s(cfg, spec, data);
  if (resume && fs::exists(paths.checkpoint()))
    s.restore(detail::parse_json_text(read_text_file(paths.checkpoint()), "checkpoint"));
  write_file_atomic(paths.config(), cfg.to_json().dump(2) + "\n");
  auto write_log = [&] {
    std::string text = csv_header();
    for (const auto& r : s.log()) text += csv_line(r);
    write_file_atomic(paths.log(), text);
  };
  std::size_t ran = 0;
  while (!s.done()) {
    s.run_epoch();
    write_file_atomic(paths.checkpoint(), s.checkpoint().dump() + "\n");
    write_log();
    if (stop_after > 0 && ++ran >= stop_after && !s.done()) return {s.descriptor(), s.log(), false};
  }
  write_log();
  const auto d = s.descriptor();
  write_file_atomic(paths.descriptor(), serialize(d));
  return {d, s.log(), true};
}

struct TrainConfig {
  std::size_t epochs = 50, batch = 32;
  SgdConfig sgd{};
  double clip = 5.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_train_accuracy;
  double train_accuracy = 0;
};

template <class T>
double evaluate_accuracy(const ConcreteNet<T>& net, const Dataset& data,
                         const std::vector<std::size_t>& idx, std::size_t batch = 128) {
  if (idx.empty()) throw ConfigError("evaluation set is empty");
  std::size_t correct = 0;
  for_each_batch(idx, batch, [&](std::span<const std::size_t> b) {
    Tape<T> t;
    Var logits = net.forward(t, net.bind(t), t.constant(batch_images<T>(data, b)));
    const auto labels = batch_labels(data, b);
    correct += count_correct(t.value(logits), labels);
  });
  return double(correct) / double(idx.size());
}

// Plain SGD on the concrete network. Uses the same shuffle stream as the
// weight phase of the search, so single-option spaces reproduce it.
template <class T>
TrainResult train_final(ConcreteNet<T>& net, const Dataset& data,
                        const std::vector<std::size_t>& idx, const TrainConfig& cfg,
                        const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (idx.empty()) throw ConfigError("training set is empty");
  Sgd<T> sgd(cfg.sgd);
  auto rng = make_stream(cfg.seed, kShuffleWeights);
  TrainResult res;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order = idx;
    shuffle_indices(order, rng);
    std::size_t correct = 0;
    for_each_batch(order, cfg.batch, [&](std::span<const std::size_t> b) {
      Tape<T> t;
      auto pv = net.bind(t, true);
      const auto labels = batch_labels(data, b);
      Var logits = net.forward(t, pv, t.constant(batch_images<T>(data, b)));
      Var ce = softmax_cross_entropy<T>(t, logits, labels);
      correct += count_correct(t.value(logits), labels);
      auto g = t.backward(ce);
      std::vector<Tensor<T>> grads;
      for (Var v : pv) grads.push_back(g[v]);
      clip_global_norm(grads, cfg.clip);
      sgd.step(param_pointers(net.params()), grads, decay_flags(net.params()));
      res.step_losses.push_back(t.value(ce).item());
    });
    res.epoch_train_accuracy.push_back(double(correct) / double(idx.size()));
    if (on_epoch) on_epoch(e, res.epoch_train_accuracy.back());
  }
  res.train_accuracy = evaluate_accuracy(net, data, idx);
  return res;
}

// Held-out accuracy of the space's reference network trained on `train`.
template <class T>
double reference_test_accuracy(const SearchSpaceSpec& sp, const Dataset& train,
                               const Dataset& test, std::size_t epochs = 30,
                               std::uint64_t seed = 0) {
  ConcreteNet<T> net(sp, reference_descriptor(sp), seed);
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  auto all = [](std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
  };
  train_final(net, train, all(train.n), cfg);
  return evaluate_accuracy(net, test, all(test.n));
}

struct MemoryRow {
  std::size_t options = 0;
  std::size_t retained = 0;        // all retained elements
  std::size_t searched_maps = 0;   // retained inside searched blocks
  bool exceeded = false;
};

// The space with every searched layer's filter options replaced by k evenly
// spaced counts up to its maximum width.
inline SearchSpaceSpec with_filter_options(SearchSpaceSpec sp, std::size_t k) {
  for (auto& st : sp.stages) {
    if (st.kind != StageKind::tbs) continue;
    const std::size_t fmax = st.max_filters();
    if (k == 0 || fmax % k != 0)
      throw ConfigError("option count " + std::to_string(k) + " does not divide width " +
                        std::to_string(fmax));
    const double step = double(fmax / k);
    st.f.spec = {step, double(fmax), step};
    st.f.options = expand_range(step, double(fmax), step);
  }
  validate_search_space(sp);
  return sp;
}

// One forward + backward per option count; reports tape retention.
template <class T>
std::vector<MemoryRow> measure_memory_proxy(const SearchSpaceSpec& base, MaskMode mode,
                                            const std::vector<std::size_t>& counts,
                                            std::size_t batch = 4, std::uint64_t seed = 0,
                                            std::size_t budget = 0) {
  std::vector<MemoryRow> rows;
  for (std::size_t k : counts) {
    const auto sp = with_filter_options(base, k);
    Supergraph<T> sg(sp, seed);
    MemoryRow row{k, 0, 0, false};
    try {
      Tape<T> t;
      if (budget > 0) t.set_element_budget(budget);
      Binding b = sg.bind(t, Trainable::weights, 1.0);
      const std::size_t full = sg.full_resolution();
      Tensor<T> x(Shape{batch, sp.input_channels, full, full});
      auto rng = make_stream(seed, 0x3e3);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = T(2 * uniform01(rng) - 1);
      std::vector<int> labels(batch);
      for (std::size_t i = 0; i < batch; ++i) labels[i] = int(i % sg.classes());
      Var logits = sg.forward(t, b, t.constant(x), mode);
      t.backward(softmax_cross_entropy<T>(t, logits, labels));
      row.retained = t.element_count();
      row.searched_maps = t.element_count(kTagSearched);
    } catch (const BudgetExceeded&) {
      row.exceeded = true;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dmasknas
