// dmasknas command line: data generation, search, training, evaluation and reports.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dmasknas/concrete.hpp"
#include "dmasknas/counters.hpp"
#include "dmasknas/data.hpp"
#include "dmasknas/search.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dmasknas;

namespace {

using Real = float;

// One command-line option; `key` is also its config-file name.
struct Opt {
  std::string key;
  json def;
  std::string help;
};

const std::vector<Opt> kCommon = {
    {"seed", 0, "run seed"},
    {"space", "desk-f", "search space name or path"},
    {"run_dir", "", "run directory (default $DMASKNAS_RUN_DIR/<space>-seed<seed>)"},
};

const std::vector<Opt> kData = {
    {"data", "", "directory with images.idx and labels.idx (default: synthetic)"},
    {"samples", 512, "synthetic sample count"},
    {"classes", 8, "synthetic class count"},
    {"data_seed", 1, "synthetic data seed"},
    {"noise", 0.08, "synthetic pixel noise"},
    {"class_fraction", 1.0, "keep this seeded fraction of the classes (at least two)"},
};

std::vector<Opt> search_opts() {
  const json d = SearchConfig{}.to_json();
  std::vector<Opt> v;
  for (const char* k : {"epochs", "batch", "lambda", "cost_mode", "cost_unit", "tau0", "rho", "lr_w",
                        "momentum", "weight_decay", "lr_alpha", "clip", "split", "mask_mode"})
    v.push_back({k, d.at(k), ""});
  v.push_back({"resume", false, "continue from the run's checkpoint"});
  v.push_back({"stop_after", 0, "stop after this many epochs in this invocation"});
  return v;
}

std::vector<Opt> train_opts() {
  const TrainConfig d;
  return {{"arch", "", "descriptor (default <run_dir>/descriptor.json)"},
          {"epochs", d.epochs, ""},
          {"batch", d.batch, ""},
          {"lr_w", d.sgd.lr, ""},
          {"momentum", d.sgd.momentum, ""},
          {"weight_decay", d.sgd.weight_decay, ""},
          {"clip", d.clip, ""}};
}

struct Command {
  std::string name, help;
  std::vector<Opt> opts;
  std::map<std::string, std::string> raw;
  CLI::App* app = nullptr;
};

std::vector<Command> make_commands() {
  auto join = [](std::vector<std::vector<Opt>> parts) {
    std::vector<Opt> v = kCommon;
    for (auto& p : parts) v.insert(v.end(), p.begin(), p.end());
    return v;
  };
  std::vector<Command> cmds;
  auto add = [&](std::string name, std::string help, std::vector<Opt> opts) {
    Command c;
    c.name = std::move(name);
    c.help = std::move(help);
    c.opts = std::move(opts);
    cmds.push_back(std::move(c));
  };
  add("gen-data", "write a synthetic dataset as IDX files",
      join({kData,
            {{"size", 0, "image size (default: the space's full resolution)"},
             {"channels", 0, "image channels (default: the space's input channels)"},
             {"out", "", "output directory (default <run_dir>/data)"},
             {"probe_max", 0.6, "reject data a linear probe classifies this well"},
             {"learn_min", 0.9, "reference network test accuracy required (0: skip)"}}}));
  add("search", "run the architecture search", join({kData, search_opts()}));
  add("train", "train a descriptor from scratch", join({kData, train_opts()}));
  add("eval", "top-1 accuracy of a trained model",
      join({kData,
            {{"arch", "", "descriptor (default <run_dir>/descriptor.json)"},
             {"model", "", "weights (default <run_dir>/model.json)"}}}));
  add("export", "extract the descriptor from a search checkpoint",
      join({{{"checkpoint", "", "default <run_dir>/checkpoints/search.json"},
             {"out", "", "output file (default: stdout)"}}}));
  add("cost-report", "per-layer FLOP and parameter table of a descriptor",
      join({{{"arch", "", "descriptor (default <run_dir>/descriptor.json)"}}}));
  add("memory-report", "tape retention against the number of filter options",
      join({{{"options", "2,4,8,16,32", "comma-separated option counts"},
             {"mode", "masked", "masked, naive or both"},
             {"batch", 4, ""},
             {"budget", 0, "tape element budget (0: unlimited)"}}}));
  cmds[6].opts[1].def = "mem-bench";
  return cmds;
}

std::string flag_name(const std::string& key) {
  std::string s = "--" + key;
  for (char& c : s)
    if (c == '_') c = '-';
  return s;
}

// Parse a flag string into the JSON type of its default.
json coerce(const Opt& o, const std::string& s) {
  try {
    std::size_t used = 0;
    switch (o.def.type()) {
      case json::value_t::boolean:
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        break;
      case json::value_t::number_unsigned:
      case json::value_t::number_integer: {
        if (!s.empty() && s[0] == '-') break;
        const auto v = std::stoull(s, &used, 0);
        if (used == s.size()) return v;
        break;
      }
      case json::value_t::number_float: {
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
        break;
      }
      default:
        return s;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid value '" + s + "' for " + flag_name(o.key));
}

void check_type(const Opt& o, const json& v, const std::string& where) {
  const bool ok = o.def.is_boolean()          ? v.is_boolean()
                  : o.def.is_number_float()   ? v.is_number()
                  : o.def.is_number_integer() ? v.is_number_unsigned()
                                              : v.is_string();
  if (!ok) throw ConfigError(where + ": wrong type for '" + o.key + "'");
}

// defaults < config file (top level, then the subcommand's object) < flags.
json effective_options(const std::vector<Command>& all, const Command& cmd,
                       const std::string& config_path) {
  json eff = json::object();
  for (const auto& o : cmd.opts) eff[o.key] = o.def;
  auto find = [&](const std::string& k) -> const Opt* {
    for (const auto& o : cmd.opts)
      if (o.key == k) return &o;
    return nullptr;
  };
  if (!config_path.empty()) {
    const json file = detail::parse_json_text(read_text_file(config_path), config_path);
    if (!file.is_object()) throw ConfigError(config_path + ": expected a JSON object");
    auto apply = [&](const json& obj, bool strict) {
      for (const auto& [k, v] : obj.items()) {
        if (v.is_object()) continue;
        const Opt* o = find(k);
        if (!o) {
          bool known = false;
          for (const auto& c : all)
            for (const auto& x : c.opts) known |= x.key == k;
          if (strict || !known)
            throw ConfigError(config_path + ": unknown key '" + k + "' for " + cmd.name);
          continue;
        }
        check_type(*o, v, config_path);
        eff[k] = v;
      }
    };
    // Top-level keys may belong to other subcommands; nested ones must match.
    apply(file, false);
    if (file.contains(cmd.name)) apply(file.at(cmd.name), true);
  }
  for (const auto& o : cmd.opts) {
    auto* opt = cmd.app->get_option_no_throw(flag_name(o.key));
    if (opt && opt->count() > 0) eff[o.key] = o.def.is_boolean() && cmd.raw.at(o.key).empty()
                                                  ? json(true)
                                                  : coerce(o, cmd.raw.at(o.key));
  }
  return eff;
}

fs::path run_dir(const json& o) {
  const auto explicit_dir = o.at("run_dir").get<std::string>();
  if (!explicit_dir.empty()) return explicit_dir;
  const char* env = std::getenv("DMASKNAS_RUN_DIR");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  const fs::path space = o.at("space").get<std::string>();
  return root / (space.stem().string() + "-seed" + std::to_string(o.at("seed").get<std::uint64_t>()));
}

fs::path or_default(const json& o, const char* key, const fs::path& fallback) {
  const auto s = o.at(key).get<std::string>();
  return s.empty() ? fallback : fs::path(s);
}

void save_options(const fs::path& dir, const std::string& name, const json& o) {
  write_file_atomic(dir / ("cli-" + name + ".json"), o.dump(2) + "\n");
}

Dataset read_source(const json& o, const SearchSpaceSpec& sp) {
  const auto dir = o.at("data").get<std::string>();
  if (!dir.empty()) {
    const fs::path d(dir);
    if (!fs::exists(d / "images.idx") || !fs::exists(d / "labels.idx"))
      throw IoError(dir + ": missing images.idx or labels.idx");
    return read_idx(d / "images.idx", d / "labels.idx");
  }
  SyntheticConfig c;
  c.classes = o.at("classes").get<std::size_t>();
  c.samples = o.at("samples").get<std::size_t>();
  c.size = sp.resolutions.back();
  c.channels = sp.input_channels;
  c.seed = o.at("data_seed").get<std::uint64_t>();
  c.noise = o.at("noise").get<double>();
  return generate_synthetic(c);
}

// The class subset depends only on data_seed, so held-out draws keep the same classes.
Dataset keep_classes(Dataset ds, const json& o) {
  const double f = o.at("class_fraction").get<double>();
  if (f != 1.0) ds = subsample_classes(ds, f, o.at("data_seed").get<std::uint64_t>());
  return ds;
}

Dataset load_data(const json& o, const SearchSpaceSpec& sp) {
  return keep_classes(read_source(o, sp), o);
}

ArchitectureDescriptor load_descriptor(const fs::path& p, const SearchSpaceSpec& sp) {
  if (!fs::exists(p)) throw IoError(p.string() + ": no such descriptor");
  auto d = deserialize(read_text_file(p));
  validate_descriptor(d, sp);
  return d;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

int cmd_gen_data(const json& o) {
  const auto sp = load_search_space(o.at("space").get<std::string>());
  SyntheticConfig c;
  c.classes = o.at("classes").get<std::size_t>();
  c.samples = o.at("samples").get<std::size_t>();
  const auto size = o.at("size").get<std::size_t>(), ch = o.at("channels").get<std::size_t>();
  c.size = size ? size : sp.resolutions.back();
  c.channels = ch ? ch : sp.input_channels;
  c.seed = o.at("data_seed").get<std::uint64_t>();
  c.noise = o.at("noise").get<double>();
  const Dataset ds = keep_classes(generate_synthetic(c), o);
  const double probe = linear_probe_accuracy(ds);
  const double probe_max = o.at("probe_max").get<double>();
  std::printf("linear_probe_accuracy %.4f\n", probe);
  if (!(probe < probe_max))
    throw Error("data", "linear probe reaches " + format_double(probe) + ", limit " +
                            format_double(probe_max));
  const double learn_min = o.at("learn_min").get<double>();
  if (learn_min > 0) {
    if (c.size != sp.resolutions.back() || c.channels != sp.input_channels || c.classes > sp.classes)
      throw ConfigError("learnability check needs images matching space " + sp.name +
                        " (or --learn-min 0)");
    SyntheticConfig held = c;
    held.seed = c.seed + 1;
    const double acc = reference_test_accuracy<Real>(sp, ds, keep_classes(generate_synthetic(held), o),
                                                    30, c.seed);
    std::printf("reference_test_accuracy %.4f\n", acc);
    if (!(acc >= learn_min))
      throw Error("data", "reference network reaches " + format_double(acc) + " on held-out data, need " +
                              format_double(learn_min));
  }
  const fs::path out = or_default(o, "out", run_dir(o) / "data");
  fs::create_directories(out);
  write_idx(ds, out / "images.idx", out / "labels.idx");
  save_options(out, "gen-data", o);
  std::vector<std::size_t> per(ds.classes, 0);
  for (int l : ds.labels) ++per[std::size_t(l)];
  std::printf("wrote %zu images %zux%zux%zu, %zu classes (%zu-%zu per class) to %s\n", ds.n, ds.c,
              ds.h, ds.w, ds.classes, *std::min_element(per.begin(), per.end()),
              *std::max_element(per.begin(), per.end()), out.string().c_str());
  return 0;
}

int cmd_search(const json& o) {
  SearchConfig cfg;
  cfg.merge(o);
  const auto sp = load_search_space(cfg.space);
  const Dataset ds = load_data(o, sp);
  const RunPaths paths{run_dir(o)};
  save_options(paths.root, "search", o);
  const auto res = run_search<Real>(cfg, sp, ds, paths, o.at("resume").get<bool>(),
                                    o.at("stop_after").get<std::size_t>());
  for (const auto& r : res.log)
    std::printf("epoch %zu %-7s tau %.4f ce %.4f effective_flops %.1f\n", r.epoch, r.phase.c_str(),
                r.tau, r.ce, r.effective_flops);
  if (!res.completed) {
    std::printf("stopped after epoch %zu; resume with --resume\n", res.log.back().epoch);
    return 0;
  }
  ConcreteNet<Real> net(sp, res.descriptor, cfg.seed);
  std::printf("descriptor %s\nresolution %zu flops %.0f params %.0f\n",
              paths.descriptor().string().c_str(), res.descriptor.resolution,
              net.cost(CostMode::flop), net.cost(CostMode::param));
  return 0;
}

TrainConfig train_config(const json& o) {
  TrainConfig c;
  c.epochs = o.at("epochs").get<std::size_t>();
  c.batch = o.at("batch").get<std::size_t>();
  c.sgd.lr = o.at("lr_w").get<double>();
  c.sgd.momentum = o.at("momentum").get<double>();
  c.sgd.weight_decay = o.at("weight_decay").get<double>();
  c.clip = o.at("clip").get<double>();
  c.seed = o.at("seed").get<std::uint64_t>();
  if (c.epochs < 1 || c.batch < 1) throw ConfigError("epochs and batch must be >= 1");
  return c;
}

int cmd_train(const json& o) {
  const auto sp = load_search_space(o.at("space").get<std::string>());
  const fs::path dir = run_dir(o);
  const auto d = load_descriptor(or_default(o, "arch", dir / "descriptor.json"), sp);
  const Dataset ds = load_data(o, sp);
  const TrainConfig cfg = train_config(o);
  ConcreteNet<Real> net(sp, d, cfg.seed);
  save_options(dir, "train", o);
  std::string log = "epoch,train_accuracy\n";
  const auto res = train_final(net, ds, all_indices(ds.n), cfg, [&](std::size_t e, double acc) {
    log += std::to_string(e) + "," + format_double(acc) + "\n";
  });
  write_file_atomic(dir / "logs" / "train.csv", log);
  std::vector<Tensor<Real>> ws;
  for (const auto& e : net.params().entries()) ws.push_back(e.value);
  const json model = {{"descriptor", json::parse(serialize(d))}, {"params", tensors_to_json(ws)}};
  write_file_atomic(dir / "model.json", model.dump() + "\n");
  std::printf("train_accuracy %.4f\nmodel %s\n", res.train_accuracy,
              (dir / "model.json").string().c_str());
  return 0;
}

int cmd_eval(const json& o) {
  const auto sp = load_search_space(o.at("space").get<std::string>());
  const fs::path dir = run_dir(o);
  const auto d = load_descriptor(or_default(o, "arch", dir / "descriptor.json"), sp);
  const fs::path mp = or_default(o, "model", dir / "model.json");
  if (!fs::exists(mp)) throw IoError(mp.string() + ": no such model");
  const json model = detail::parse_json_text(read_text_file(mp), mp.string());
  if (serialize(deserialize(model.at("descriptor").dump())) != serialize(d))
    throw ConfigError(mp.string() + ": model was trained for a different descriptor");
  ConcreteNet<Real> net(sp, d, 0);
  auto ws = tensors_from_json<Real>(model.at("params"));
  auto& entries = net.params().entries();
  if (ws.size() != entries.size()) throw ConfigError(mp.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (ws[i].shape() != entries[i].value.shape())
      throw ConfigError(mp.string() + ": shape mismatch for " + entries[i].name);
    entries[i].value = std::move(ws[i]);
  }
  const Dataset ds = load_data(o, sp);
  std::printf("top1 %.4f\n", evaluate_accuracy(net, ds, all_indices(ds.n)));
  return 0;
}

int cmd_export(const json& o) {
  const fs::path cp = or_default(o, "checkpoint", RunPaths{run_dir(o)}.checkpoint());
  if (!fs::exists(cp)) throw IoError(cp.string() + ": no such checkpoint");
  const json j = detail::parse_json_text(read_text_file(cp), cp.string());
  SearchConfig cfg;
  cfg.merge(j.at("config"));
  Supergraph<Real> sg(load_search_space(cfg.space), cfg.seed);
  auto alphas = tensors_from_json<Real>(j.at("alphas"));
  if (alphas.size() != sg.choices().size()) throw ConfigError("checkpoint does not match its space");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (alphas[i].shape() != sg.choices()[i].alpha().shape())
      throw ConfigError("checkpoint alpha shape mismatch");
    sg.choices()[i].alpha() = std::move(alphas[i]);
  }
  const std::string text = serialize(sg.extract());
  const auto out = o.at("out").get<std::string>();
  if (out.empty())
    std::fputs(text.c_str(), stdout);
  else
    write_file_atomic(out, text);
  return 0;
}

int cmd_cost_report(const json& o) {
  const auto sp = load_search_space(o.at("space").get<std::string>());
  const fs::path dir = run_dir(o);
  const auto d = load_descriptor(or_default(o, "arch", dir / "descriptor.json"), sp);
  ConcreteNet<double> net(sp, d, 0);
  const auto rows = net.cost_rows();
  Tape<double> t;
  const std::size_t full = sp.resolutions.back();
  net.forward(t, net.bind(t), t.constant(Tensor<double>(Shape{1, sp.input_channels, full, full})));
  const Counts c = count_tape(t);
  const double fl = total_of(rows, CostMode::flop), pa = total_of(rows, CostMode::param);
  std::ostringstream os;
  os << format_cost_table(rows);
  os << "counted flops " << format_double(c.macs) << " params " << format_double(c.weights) << "\n";
  const bool match = fl == c.macs && pa == c.weights;
  os << "match " << (match ? "yes" : "no") << "\n";
  std::fputs(os.str().c_str(), stdout);
  write_file_atomic(dir / "reports" / "cost.txt", os.str());
  if (!match) throw NumericError("analytic totals differ from counted operations");
  return 0;
}

std::vector<std::size_t> parse_counts(const std::string& s) {
  std::vector<std::size_t> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long k = 0;
    try {
      k = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || k == 0) throw ConfigError("bad option count '" + item + "'");
    v.push_back(k);
  }
  if (v.empty()) throw ConfigError("no option counts given");
  return v;
}

int cmd_memory_report(const json& o) {
  const auto sp = load_search_space(o.at("space").get<std::string>());
  const auto counts = parse_counts(o.at("options").get<std::string>());
  const auto mode = o.at("mode").get<std::string>();
  if (mode != "masked" && mode != "naive" && mode != "both")
    throw ConfigError("mode must be masked, naive or both");
  const auto batch = o.at("batch").get<std::size_t>();
  const auto budget = o.at("budget").get<std::size_t>();
  const auto seed = o.at("seed").get<std::uint64_t>();
  std::string csv = "mode,options,retained,searched_maps,exceeded\n";
  std::printf("%-7s %8s %14s %14s\n", "mode", "options", "retained", "searched_maps");
  for (const char* m : {"masked", "naive"}) {
    if (mode != "both" && mode != m) continue;
    const auto mm = std::string(m) == "masked" ? MaskMode::masked : MaskMode::naive;
    const auto rows = measure_memory_proxy<Real>(sp, mm, counts, batch, seed, budget);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& r : rows) {
      if (r.exceeded)
        std::printf("%-7s %8zu %14s %14s\n", m, r.options, "exceeded", "-");
      else
        std::printf("%-7s %8zu %14zu %14zu\n", m, r.options, r.retained, r.searched_maps);
      csv += std::string(m) + "," + std::to_string(r.options) + "," + std::to_string(r.retained) +
             "," + std::to_string(r.searched_maps) + "," + (r.exceeded ? "1" : "0") + "\n";
      if (!r.exceeded) {
        lo = std::min(lo, r.retained);
        hi = std::max(hi, r.retained);
      }
    }
    if (hi > 0)
      std::printf("%s spread %.4f%%\n", m, 100.0 * double(hi - lo) / double(lo));
  }
  write_file_atomic(run_dir(o) / "reports" / "memory.csv", csv);
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const std::string& category, const std::string& what) {
  std::fprintf(stderr, "ERROR %s: %s\n", category.c_str(), one_line(what).c_str());
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable masking architecture search"};
  app.require_subcommand(1);
  std::string config_path;
  auto cmds = make_commands();
  for (auto& c : cmds) {
    c.app = app.add_subcommand(c.name, c.help);
    c.app->add_option("--config", config_path, "JSON options file");
    for (const auto& o : c.opts) {
      if (o.def.is_boolean()) {
        c.app->add_flag(flag_name(o.key), c.raw[o.key], o.help);
        continue;
      }
      auto* opt = c.app->add_option(flag_name(o.key), c.raw[o.key], o.help);
      opt->type_name(o.def.is_number_integer() ? "INT" : o.def.is_number() ? "FLOAT" : "TEXT");
      const std::string def = o.def.is_string() ? o.def.get<std::string>() : o.def.dump();
      if (!def.empty()) opt->default_str(def);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }
  try {
    for (auto& c : cmds) {
      if (!c.app->parsed()) continue;
      const json o = effective_options(cmds, c, config_path);
      if (c.name == "gen-data") return cmd_gen_data(o);
      if (c.name == "search") return cmd_search(o);
      if (c.name == "train") return cmd_train(o);
      if (c.name == "eval") return cmd_eval(o);
      if (c.name == "export") return cmd_export(o);
      if (c.name == "cost-report") return cmd_cost_report(o);
      if (c.name == "memory-report") return cmd_memory_report(o);
    }
  } catch (const Error& e) {
    return fail(e.category(), e.what());
  } catch (const json::exception& e) {
    return fail("config", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return fail("usage", "no subcommand");
}
