#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/channel_mask.hpp"
#include "dmasknas/error.hpp"

namespace dmasknas {

using json = nlohmann::json;
using BigInt = boost::multiprecision::cpp_int;

struct BlockType {
  std::string name;
  std::size_t kernel = 3;
  bool se = false;
  Activation act = Activation::relu;
  bool skip = false;

  friend bool operator==(const BlockType&, const BlockType&) = default;
};

// Block-type rows: ir_k{3,5}[_se][_hs] plus skip.
inline BlockType parse_block_type(const std::string& name) {
  if (name == "skip") return BlockType{"skip", 0, false, Activation::relu, true};
  BlockType b;
  b.name = name;
  std::string rest = name;
  auto eat = [&](const std::string& pre) {
    if (rest.rfind(pre, 0) != 0) return false;
    rest = rest.substr(pre.size());
    return true;
  };
  if (!eat("ir_k")) throw ConfigError("unknown block type '" + name + "'");
  if (eat("3"))
    b.kernel = 3;
  else if (eat("5"))
    b.kernel = 5;
  else
    throw ConfigError("unknown kernel in block type '" + name + "'");
  if (eat("_se")) b.se = true;
  if (eat("_hs")) b.act = Activation::hswish;
  if (!rest.empty()) throw ConfigError("unknown block type '" + name + "'");
  return b;
}

struct MicroSpec {
  std::vector<BlockType> types;

  static MicroSpec defaults() {
    MicroSpec m;
    for (const char* n : {"ir_k3", "ir_k5", "ir_k3_hs", "ir_k5_hs", "ir_k3_se", "ir_k5_se",
                          "ir_k3_se_hs", "ir_k5_se_hs", "skip"})
      m.types.push_back(parse_block_type(n));
    return m;
  }
};

enum class StageKind { conv, tbs, avgpool, fc };

// A numeric column: fixed value or (low, high, step) triple, plus its
// expanded options.
struct OptionRange {
  std::vector<double> spec;  // 1 value or 3
  std::vector<double> options;
};

struct StageSpec {
  StageKind kind = StageKind::conv;
  std::string b;
  std::size_t kernel = 1;  // fixed convs
  OptionRange e, f;
  std::size_t n = 1, s = 1;
  std::vector<std::size_t> max_input;  // (H, W, C) or (C) for fc
  Activation act = Activation::relu;   // fixed convs

  std::vector<std::size_t> filters() const {
    std::vector<std::size_t> v;
    for (double x : f.options) v.push_back(static_cast<std::size_t>(x));
    return v;
  }
  std::size_t max_filters() const { return static_cast<std::size_t>(f.options.back()); }
};

struct SearchSpaceSpec {
  std::string name;
  std::size_t input_channels = 3;
  std::vector<std::size_t> resolutions;  // ascending square sizes
  std::vector<StageSpec> stages;
  MicroSpec micro;
  std::size_t se_reduction = 4;
  std::size_t classes = 0;
};

// Expand (low, high, step) into low, low+step, ... <= high.
inline std::vector<double> expand_range(double low, double high, double step) {
  if (!(step > 0)) throw ConfigError("range step must be positive");
  if (low > high) throw ConfigError("range low exceeds high");
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    double v = low + static_cast<double>(i) * step;
    if (v > high + 1e-9 * std::max(1.0, std::abs(high))) break;
    // Snap accumulated error onto a short decimal.
    v = std::round(v * 1e9) / 1e9;
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("range expands to an empty option list");
  return out;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    auto [line, col] = line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(what + ": syntax error: " + std::string(e.what()), line, col);
  }
}

inline OptionRange parse_option_range(const json& j, const std::string& where, bool integral) {
  OptionRange r;
  if (j.is_number()) {
    r.spec = {j.get<double>()};
    r.options = r.spec;
  } else if (j.is_array() && j.size() == 3 && j[0].is_number() && j[1].is_number() &&
             j[2].is_number()) {
    r.spec = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    try {
      r.options = expand_range(r.spec[0], r.spec[1], r.spec[2]);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  } else {
    throw ConfigError(where + ": expected a number or a (low, high, step) triple");
  }
  for (double v : r.options) {
    if (!(v > 0)) throw ConfigError(where + ": options must be positive");
    if (integral && v != std::floor(v)) throw ConfigError(where + ": options must be integers");
  }
  return r;
}

template <class V>
V get_or(const json& j, const char* key, V fallback) {
  return j.contains(key) ? j.at(key).get<V>() : fallback;
}

inline StageKind parse_stage_kind(const std::string& b, std::size_t& kernel) {
  if (b == "TBS") return StageKind::tbs;
  if (b == "avgpl") return StageKind::avgpool;
  if (b == "fc") return StageKind::fc;
  if (b.size() == 3 && b[1] == 'x' && b[0] == b[2] && std::isdigit(static_cast<unsigned char>(b[0]))) {
    kernel = static_cast<std::size_t>(b[0] - '0');
    if (kernel % 2 == 0) throw ConfigError("fixed conv kernel must be odd: '" + b + "'");
    return StageKind::conv;
  }
  throw ConfigError("unknown block column value '" + b + "'");
}

}  // namespace detail

// Per-stage output, validating the declared max_input chain.
inline std::vector<std::size_t> stage_max_output(const StageSpec& st,
                                                 const std::vector<std::size_t>& in) {
  switch (st.kind) {
    case StageKind::conv:
    case StageKind::tbs: {
      std::size_t h = in[0], w = in[1];
      const std::size_t k = st.kind == StageKind::conv ? st.kernel : 3;
      // Every kernel option uses same padding, so extents depend only on stride.
      h = conv_out_extent(h, k, st.s, k / 2);
      w = conv_out_extent(w, k, st.s, k / 2);
      return {h, w, st.max_filters()};
    }
    case StageKind::avgpool:
      return {in[2]};
    case StageKind::fc:
      return {st.max_filters()};
  }
  return {};
}

inline void validate_search_space(const SearchSpaceSpec& sp) {
  if (sp.stages.empty()) throw ConfigError("search space has no stages");
  if (sp.resolutions.empty()) throw ConfigError("search space needs at least one resolution");
  for (std::size_t i = 1; i < sp.resolutions.size(); ++i)
    if (sp.resolutions[i] <= sp.resolutions[i - 1])
      throw ConfigError("resolutions must be strictly increasing");
  if (sp.micro.types.empty()) throw ConfigError("micro search space is empty");
  const auto& first = sp.stages.front();
  if (first.max_input.size() != 3 || first.max_input[0] != sp.resolutions.back() ||
      first.max_input[1] != sp.resolutions.back() || first.max_input[2] != sp.input_channels)
    throw ConfigError("first stage max_input must equal the largest resolution and input channels");
  bool pooled = false;
  for (std::size_t i = 0; i < sp.stages.size(); ++i) {
    const auto& st = sp.stages[i];
    const std::string where = "stage " + std::to_string(i) + " (" + st.b + ")";
    if (st.kind == StageKind::avgpool) {
      if (pooled) throw ConfigError(where + ": more than one avgpl stage");
      pooled = true;
    } else if (st.kind == StageKind::fc) {
      if (!pooled || i + 1 != sp.stages.size())
        throw ConfigError(where + ": fc must be the last stage, after avgpl");
    } else if (pooled) {
      throw ConfigError(where + ": convolution after avgpl");
    }
    if ((st.kind == StageKind::conv || st.kind == StageKind::fc) && st.f.options.size() != 1)
      throw ConfigError(where + ": fixed layers take a single filter count");
    if (i + 1 < sp.stages.size()) {
      const auto out = stage_max_output(st, st.max_input);
      if (out != sp.stages[i + 1].max_input) {
        std::string a, b;
        for (auto v : out) a += (a.empty() ? "" : "x") + std::to_string(v);
        for (auto v : sp.stages[i + 1].max_input) b += (b.empty() ? "" : "x") + std::to_string(v);
        throw ConfigError(where + ": output " + a + " does not chain into next stage max_input " + b);
      }
    }
  }
  if (sp.stages.back().kind != StageKind::fc) throw ConfigError("last stage must be fc");
}

inline SearchSpaceSpec parse_search_space(const std::string& text) {
  const json j = detail::parse_json_text(text, "search space");
  SearchSpaceSpec sp;
  try {
    sp.name = detail::get_or<std::string>(j, "name", "unnamed");
    const json& in = j.at("input");
    sp.input_channels = in.at("channels").get<std::size_t>();
    sp.resolutions = in.at("resolutions").get<std::vector<std::size_t>>();
    sp.se_reduction = detail::get_or<std::size_t>(j, "se_reduction", 4);
    if (j.contains("micro")) {
      for (const auto& name : j.at("micro")) sp.micro.types.push_back(parse_block_type(name.get<std::string>()));
    } else {
      sp.micro = MicroSpec::defaults();
    }
    std::size_t idx = 0;
    for (const json& s : j.at("stages")) {
      StageSpec st;
      const std::string where = "stage " + std::to_string(idx++);
      st.b = s.at("b").get<std::string>();
      st.kind = detail::parse_stage_kind(st.b, st.kernel);
      if (s.contains("e")) st.e = detail::parse_option_range(s.at("e"), where + ".e", false);
      else st.e = detail::parse_option_range(json(1.0), where + ".e", false);
      if (st.kind != StageKind::avgpool)
        st.f = detail::parse_option_range(s.at("f"), where + ".f", true);
      st.n = detail::get_or<std::size_t>(s, "n", 1);
      st.s = detail::get_or<std::size_t>(s, "s", 1);
      st.max_input = s.at("max_input").get<std::vector<std::size_t>>();
      st.act = parse_activation(detail::get_or<std::string>(s, "act", "relu"));
      if (st.n < 1) throw ConfigError(where + ": n must be >= 1");
      if (st.s != 1 && st.s != 2) throw ConfigError(where + ": stride must be 1 or 2");
      const std::size_t want = st.kind == StageKind::fc ? 1 : 3;
      if (st.max_input.size() != want)
        throw ConfigError(where + ": max_input must have " + std::to_string(want) + " entries");
      if (st.kind == StageKind::avgpool) st.f = {{double(st.max_input[2])}, {double(st.max_input[2])}};
      if (st.kind != StageKind::tbs && st.n != 1) throw ConfigError(where + ": only TBS stages repeat");
      sp.stages.push_back(std::move(st));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("search space: ") + e.what());
  }
  sp.classes = sp.stages.empty() ? 0 : sp.stages.back().max_filters();
  validate_search_space(sp);
  return sp;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

#ifndef DMASKNAS_CONFIG_DIR
#define DMASKNAS_CONFIG_DIR "configs"
#endif

// A preset name (looked up in the config directory) or a path to a file.
inline std::filesystem::path resolve_space_path(const std::string& name_or_path) {
  namespace fs = std::filesystem;
  if (fs::exists(name_or_path) && fs::is_regular_file(name_or_path)) return name_or_path;
  std::vector<fs::path> dirs;
  if (const char* env = std::getenv("DMASKNAS_CONFIG_DIR")) dirs.emplace_back(env);
  dirs.emplace_back(DMASKNAS_CONFIG_DIR);
  for (const auto& d : dirs) {
    fs::path p = d / (name_or_path + ".json");
    if (fs::exists(p)) return p;
  }
  throw IoError("search space '" + name_or_path + "' not found");
}

inline SearchSpaceSpec load_search_space(const std::string& name_or_path) {
  return parse_search_space(read_text_file(resolve_space_path(name_or_path)));
}

// One searchable layer after expanding repeats.
struct LayerPlan {
  std::string name;
  std::size_t stage = 0, repeat = 0;
  std::size_t stride = 1;
  std::size_t max_in = 0;                   // input channels (max over options)
  std::vector<std::size_t> f_options;       // output channel options
  ExpansionOptions e;                       // hidden width options
  std::vector<BlockType> types;             // skip removed where shapes change
  bool identity_ok = false;                 // residual / skip allowed
  std::size_t se_width = 1;                 // fixed reduced SE width
  std::size_t in_h = 0, in_w = 0;           // max input extent
};

inline std::vector<LayerPlan> plan_layers(const SearchSpaceSpec& sp) {
  std::vector<LayerPlan> out;
  for (std::size_t si = 0; si < sp.stages.size(); ++si) {
    const auto& st = sp.stages[si];
    if (st.kind != StageKind::tbs) continue;
    std::size_t cin = st.max_input[2], h = st.max_input[0], w = st.max_input[1];
    for (std::size_t r = 0; r < st.n; ++r) {
      LayerPlan lp;
      lp.name = "stage" + std::to_string(si) + "." + std::to_string(r);
      lp.stage = si;
      lp.repeat = r;
      lp.stride = r == 0 ? st.s : 1;
      lp.max_in = cin;
      lp.in_h = h;
      lp.in_w = w;
      lp.f_options = st.filters();
      lp.e = expansion_options(st.e.options, cin);
      lp.identity_ok = lp.stride == 1 && cin == st.max_filters();
      for (const auto& t : sp.micro.types)
        if (!t.skip || lp.identity_ok) lp.types.push_back(t);
      if (lp.types.empty())
        throw ConfigError(lp.name + ": no block types left after removing skip");
      lp.se_width = std::max<std::size_t>(
          1, round_half_up(static_cast<double>(lp.e.widths.back()) /
                           static_cast<double>(sp.se_reduction)));
      out.push_back(std::move(lp));
      h = conv_out_extent(h, 3, r == 0 ? st.s : 1, 1);
      w = conv_out_extent(w, 3, r == 0 ? st.s : 1, 1);
      cin = st.max_filters();
    }
  }
  return out;
}

// Product over searched layers of |types| * |e| * |f|, times |resolutions|.
inline BigInt count_candidates(const SearchSpaceSpec& sp) {
  BigInt total = sp.resolutions.size();
  for (const auto& lp : plan_layers(sp))
    total *= BigInt(lp.types.size()) * BigInt(lp.e.widths.size()) * BigInt(lp.f_options.size());
  return total;
}

// ---------------------------------------------------------------------------
// Architecture descriptors
// ---------------------------------------------------------------------------

struct LayerChoice {
  std::string block;  // block type name
  std::size_t kernel = 0;
  bool se = false;
  std::string act = "relu";
  double e = 1.0;
  std::size_t hidden = 0;
  std::size_t f = 0;
  std::size_t stride = 1;

  friend bool operator==(const LayerChoice&, const LayerChoice&) = default;
};

struct ArchitectureDescriptor {
  static constexpr int kVersion = 1;
  std::string space;
  std::size_t resolution = 0;
  std::vector<LayerChoice> layers;
  std::vector<std::size_t> head;  // fixed widths outside searched layers, in order

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

inline std::string serialize(const ArchitectureDescriptor& d) {
  json j;
  j["version"] = ArchitectureDescriptor::kVersion;
  j["space"] = d.space;
  j["resolution"] = d.resolution;
  j["head"] = d.head;
  json layers = json::array();
  for (const auto& l : d.layers) {
    layers.push_back({{"block", l.block},
                      {"kernel", l.kernel},
                      {"se", l.se},
                      {"act", l.act},
                      {"e", l.e},
                      {"hidden", l.hidden},
                      {"f", l.f},
                      {"stride", l.stride}});
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

inline ArchitectureDescriptor deserialize(const std::string& text) {
  const json j = detail::parse_json_text(text, "descriptor");
  ArchitectureDescriptor d;
  try {
    if (j.at("version").get<int>() != ArchitectureDescriptor::kVersion)
      throw ConfigError("descriptor: unsupported version");
    d.space = j.at("space").get<std::string>();
    d.resolution = j.at("resolution").get<std::size_t>();
    d.head = j.at("head").get<std::vector<std::size_t>>();
    for (const auto& l : j.at("layers")) {
      LayerChoice c;
      c.block = l.at("block").get<std::string>();
      c.kernel = l.at("kernel").get<std::size_t>();
      c.se = l.at("se").get<bool>();
      c.act = l.at("act").get<std::string>();
      c.e = l.at("e").get<double>();
      c.hidden = l.at("hidden").get<std::size_t>();
      c.f = l.at("f").get<std::size_t>();
      c.stride = l.at("stride").get<std::size_t>();
      d.layers.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("descriptor: ") + e.what());
  }
  return d;
}

// Fixed widths recorded in a descriptor: every conv/fc stage outside TBS.
inline std::vector<std::size_t> fixed_widths(const SearchSpaceSpec& sp) {
  std::vector<std::size_t> v;
  for (const auto& st : sp.stages)
    if (st.kind == StageKind::conv || st.kind == StageKind::fc) v.push_back(st.max_filters());
  return v;
}

// Checks every field against the space's option sets.
inline void validate_descriptor(const ArchitectureDescriptor& d, const SearchSpaceSpec& sp) {
  if (std::find(sp.resolutions.begin(), sp.resolutions.end(), d.resolution) == sp.resolutions.end())
    throw ConfigError("descriptor: resolution " + std::to_string(d.resolution) +
                      " is not an option of space " + sp.name);
  if (d.head != fixed_widths(sp)) throw ConfigError("descriptor: fixed widths do not match space");
  const auto plans = plan_layers(sp);
  if (plans.size() != d.layers.size())
    throw ConfigError("descriptor: " + std::to_string(d.layers.size()) + " layers, space has " +
                      std::to_string(plans.size()));
  bool any_block = false;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const auto& p = plans[i];
    const auto& c = d.layers[i];
    const std::string where = "descriptor layer " + std::to_string(i) + " (" + p.name + "): ";
    auto it = std::find_if(p.types.begin(), p.types.end(),
                           [&](const BlockType& b) { return b.name == c.block; });
    if (it == p.types.end()) throw ConfigError(where + "block '" + c.block + "' not allowed");
    if (!it->skip) {
      any_block = true;
      if (c.kernel != it->kernel || c.se != it->se || c.act != to_string(it->act))
        throw ConfigError(where + "block attributes do not match '" + c.block + "'");
    }
    auto ew = std::find(p.e.widths.begin(), p.e.widths.end(), c.hidden);
    if (ew == p.e.widths.end() || p.e.rates[ew - p.e.widths.begin()] != c.e)
      throw ConfigError(where + "expansion " + std::to_string(c.e) + " / width " +
                        std::to_string(c.hidden) + " not an option");
    if (std::find(p.f_options.begin(), p.f_options.end(), c.f) == p.f_options.end())
      throw ConfigError(where + "filter count " + std::to_string(c.f) + " not an option");
    if (c.stride != p.stride) throw ConfigError(where + "stride mismatch");
  }
  if (!plans.empty() && !any_block)
    throw ConfigError("descriptor: every searched layer is skip; the network has no blocks");
}

inline LayerChoice make_choice(const LayerPlan& p, std::size_t type, std::size_t e,
                               std::size_t f) {
  const BlockType& b = p.types.at(type);
  LayerChoice c;
  c.block = b.name;
  c.kernel = b.kernel;
  c.se = b.se;
  c.act = b.skip ? "relu" : to_string(b.act);
  c.e = p.e.rates.at(e);
  c.hidden = p.e.widths.at(e);
  c.f = p.f_options.at(f);
  c.stride = p.stride;
  return c;
}

// Fixed baseline: first non-skip type, widest expansion and filters, full resolution.
inline ArchitectureDescriptor reference_descriptor(const SearchSpaceSpec& sp) {
  ArchitectureDescriptor d;
  d.space = sp.name;
  d.resolution = sp.resolutions.back();
  d.head = fixed_widths(sp);
  for (const auto& p : plan_layers(sp)) {
    std::size_t type = 0;
    while (p.types.at(type).skip) ++type;
    d.layers.push_back(make_choice(p, type, p.e.rates.size() - 1, p.f_options.size() - 1));
  }
  return d;
}

}  // namespace dmasknas
