#pragma once

// Brute-force MAC and weight counters over a recorded forward pass.

#include "dmasknas/autodiff/tape.hpp"

namespace dmasknas {

struct Counts {
  double macs = 0, weights = 0;
};

// Every conv2d / fully_connected node contributes
// (outputs per sample) * (weights per output channel) MACs and its weight count.
template <class T>
Counts count_tape(const Tape<T>& t) {
  Counts c;
  for (std::size_t i = 0; i < t.node_count(); ++i) {
    const Var v = t.at(i);
    const auto& op = t.op_name(v);
    if (op != "conv2d" && op != "fully_connected") continue;
    const Var w = t.inputs(v).at(1);
    const Shape& out = t.shape(v);
    const double per_sample = double(t.value(v).size() / out[0]);
    const double wsize = double(t.value(w).size());
    c.macs += per_sample * (wsize / double(t.shape(w)[0]));
    c.weights += wsize;
  }
  return c;
}

}  // namespace dmasknas
