#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "dmasknas/autodiff/ops.hpp"
#include "dmasknas/error.hpp"
#include "dmasknas/gumbel.hpp"
#include "dmasknas/optim.hpp"

namespace dmasknas {

// 8-bit images, NCHW, with integer labels.
struct Dataset {
  std::size_t n = 0, c = 1, h = 0, w = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t image_size() const noexcept { return c * h * w; }
};

inline constexpr std::uint32_t kIdxImages3 = 0x00000803;
inline constexpr std::uint32_t kIdxImages4 = 0x00000804;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& file) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(file + ": truncated IDX header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

// Box-Muller on the shared uniform source, so noise does not depend on the
// standard library's distribution implementation.
inline double normal(std::mt19937_64& rng) {
  const double u1 = std::max(uniform01(rng), 1e-300), u2 = uniform01(rng);
  return std::sqrt(-2 * std::log(u1)) * std::cos(2 * std::numbers::pi * u2);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * double(n)));
}

}  // namespace detail

// Fisher-Yates with the shared uniform source.
inline void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[detail::uniform_index(rng, i)]);
}

// Images are 0x803 (n, h, w) for one channel, 0x804 (n, c, h, w) otherwise.
inline void write_idx(const Dataset& ds, const std::filesystem::path& images,
                      const std::filesystem::path& labels) {
  {
    std::ofstream os(images, std::ios::binary);
    if (!os) throw IoError("cannot write " + images.string());
    detail::put_u32(os, ds.c == 1 ? kIdxImages3 : kIdxImages4);
    detail::put_u32(os, std::uint32_t(ds.n));
    if (ds.c != 1) detail::put_u32(os, std::uint32_t(ds.c));
    detail::put_u32(os, std::uint32_t(ds.h));
    detail::put_u32(os, std::uint32_t(ds.w));
    os.write(reinterpret_cast<const char*>(ds.pixels.data()), std::streamsize(ds.pixels.size()));
    if (!os) throw IoError("write failed: " + images.string());
  }
  std::ofstream os(labels, std::ios::binary);
  if (!os) throw IoError("cannot write " + labels.string());
  detail::put_u32(os, kIdxLabels);
  detail::put_u32(os, std::uint32_t(ds.n));
  for (int l : ds.labels) os.put(char(l));
  if (!os) throw IoError("write failed: " + labels.string());
}

inline Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset ds;
  {
    std::ifstream is(images, std::ios::binary);
    if (!is) throw IoError("cannot open " + images.string());
    const auto magic = detail::get_u32(is, images.string());
    if (magic != kIdxImages3 && magic != kIdxImages4)
      throw IoError(images.string() + ": bad IDX image magic");
    ds.n = detail::get_u32(is, images.string());
    if (magic == kIdxImages4) ds.c = detail::get_u32(is, images.string());
    ds.h = detail::get_u32(is, images.string());
    ds.w = detail::get_u32(is, images.string());
    ds.pixels.resize(ds.n * ds.image_size());
    if (!is.read(reinterpret_cast<char*>(ds.pixels.data()), std::streamsize(ds.pixels.size())))
      throw IoError(images.string() + ": truncated image data");
  }
  std::ifstream is(labels, std::ios::binary);
  if (!is) throw IoError("cannot open " + labels.string());
  if (detail::get_u32(is, labels.string()) != kIdxLabels)
    throw IoError(labels.string() + ": bad IDX label magic");
  if (detail::get_u32(is, labels.string()) != ds.n)
    throw IoError(labels.string() + ": label count does not match images");
  std::vector<unsigned char> raw(ds.n);
  if (!is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw IoError(labels.string() + ": truncated label data");
  for (auto v : raw) {
    ds.labels.push_back(int(v));
    ds.classes = std::max<std::size_t>(ds.classes, std::size_t(v) + 1);
  }
  return ds;
}

struct SyntheticConfig {
  std::size_t classes = 8, samples = 1024, size = 16, channels = 1;
  std::uint64_t seed = 0;
  double noise = 0.08;
};

// Class k is a sinusoidal stripe pattern with orientation (k mod 4) * 45 deg
// and period size / 2^(1 + k / 4); phase and amplitude are random per image.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (cfg.classes > 256) throw ConfigError("synthetic data supports at most 256 classes");
  if (cfg.size < 4) throw ConfigError("synthetic image size must be >= 4");
  Dataset ds;
  ds.n = cfg.samples;
  ds.c = cfg.channels;
  ds.h = ds.w = cfg.size;
  ds.classes = cfg.classes;
  auto rng = make_stream(cfg.seed, 0x5eed);
  std::vector<std::size_t> order(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) order[i] = i % cfg.classes;
  shuffle_indices(order, rng);
  ds.pixels.resize(ds.n * ds.image_size());
  for (std::size_t i = 0; i < ds.n; ++i) {
    const std::size_t k = order[i];
    ds.labels.push_back(int(k));
    const double theta = double(k % 4) * std::numbers::pi / 4;
    const double period = std::max(2.0, double(cfg.size) / std::pow(2.0, double(1 + k / 4)));
    const double fx = std::cos(theta) / period, fy = std::sin(theta) / period;
    for (std::size_t ch = 0; ch < ds.c; ++ch) {
      const double phase = 2 * std::numbers::pi * uniform01(rng);
      const double amp = 0.3 + 0.15 * uniform01(rng);
      for (std::size_t y = 0; y < ds.h; ++y)
        for (std::size_t x = 0; x < ds.w; ++x) {
          double v = 0.5 + amp * std::sin(2 * std::numbers::pi * (fx * double(x) + fy * double(y)) + phase);
          v += cfg.noise * detail::normal(rng);
          v = std::clamp(v, 0.0, 1.0);
          ds.pixels[((i * ds.c + ch) * ds.h + y) * ds.w + x] = std::uint8_t(std::lround(v * 255));
        }
    }
  }
  return ds;
}

// Pixels scaled to [-1, 1].
template <class T>
Tensor<T> batch_images(const Dataset& ds, std::span<const std::size_t> idx) {
  Tensor<T> x(Shape{idx.size(), ds.c, ds.h, ds.w});
  const std::size_t sz = ds.image_size();
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t k = 0; k < sz; ++k)
      x[b * sz + k] = T(double(ds.pixels[idx[b] * sz + k]) / 127.5 - 1.0);
  return x;
}

inline std::vector<int> batch_labels(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> y;
  for (auto i : idx) y.push_back(ds.labels.at(i));
  return y;
}

struct Split {
  std::vector<std::size_t> first, second;
};

// Seeded permutation; the first round(fraction * n) indices form `first`.
inline Split split_dataset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ConfigError("split fraction must be in (0, 1)");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  auto rng = make_stream(seed, 0x5b17);
  shuffle_indices(perm, rng);
  const auto k = static_cast<std::size_t>(std::llround(fraction * double(n)));
  if (k == 0 || k == n) throw ConfigError("split leaves an empty partition");
  Split s;
  s.first.assign(perm.begin(), perm.begin() + std::ptrdiff_t(k));
  s.second.assign(perm.begin() + std::ptrdiff_t(k), perm.end());
  return s;
}

// Keep a seeded subset of classes (at least two) and relabel them 0..m-1.
inline Dataset subsample_classes(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("class fraction must be in (0, 1]");
  std::vector<std::size_t> cls(ds.classes);
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] = i;
  auto rng = make_stream(seed, 0xc1a5);
  shuffle_indices(cls, rng);
  const std::size_t m =
      std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(fraction * double(ds.classes))));
  cls.resize(std::min(m, cls.size()));
  std::sort(cls.begin(), cls.end());
  std::vector<int> remap(ds.classes, -1);
  for (std::size_t i = 0; i < cls.size(); ++i) remap[cls[i]] = int(i);
  Dataset out = ds;
  out.pixels.clear();
  out.labels.clear();
  out.classes = cls.size();
  const std::size_t sz = ds.image_size();
  for (std::size_t i = 0; i < ds.n; ++i) {
    const int r = remap[std::size_t(ds.labels[i])];
    if (r < 0) continue;
    out.labels.push_back(r);
    out.pixels.insert(out.pixels.end(), ds.pixels.begin() + std::ptrdiff_t(i * sz),
                      ds.pixels.begin() + std::ptrdiff_t((i + 1) * sz));
  }
  out.n = out.labels.size();
  return out;
}

// Held-out accuracy of softmax regression on raw pixels (80/20 split).
inline double linear_probe_accuracy(const Dataset& ds, std::size_t epochs = 40,
                                    std::uint64_t seed = 0) {
  const Split sp = split_dataset(ds.n, 0.8, seed);
  const std::size_t d = ds.image_size(), k = ds.classes;
  Tensor<double> w(Shape{k, d}), b(Shape{k});
  Adam<double> opt(AdamConfig{0.01});
  auto rng = make_stream(seed, 0x11ea);
  std::vector<std::size_t> order = sp.first;
  for (std::size_t e = 0; e < epochs; ++e) {
    shuffle_indices(order, rng);
    for (std::size_t s = 0; s < order.size(); s += 32) {
      std::span<const std::size_t> idx(order.data() + s, std::min<std::size_t>(32, order.size() - s));
      Tape<double> t;
      Var wv = t.leaf(w, true), bv = t.leaf(b, true);
      Var logits = fully_connected(t, t.constant(batch_images<double>(ds, idx)), wv, bv);
      const auto labels = batch_labels(ds, idx);
      auto g = t.backward(softmax_cross_entropy<double>(t, logits, labels));
      opt.step({&w, &b}, {g[wv], g[bv]});
    }
  }
  Tape<double> t;
  Var logits = fully_connected(t, t.constant(batch_images<double>(ds, sp.second)), t.constant(w),
                               t.constant(b));
  const auto& lv = t.value(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sp.second.size(); ++i) {
    std::span<const double> row(lv.data().data() + i * k, k);
    correct += argmax_option<double>(row) == std::size_t(ds.labels[sp.second[i]]);
  }
  return double(correct) / double(sp.second.size());
}

}  // namespace dmasknas
