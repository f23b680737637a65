#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmasknas/autodiff/tensor.hpp"

namespace dmasknas {

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  std::uint32_t tape = 0;
  bool valid() const noexcept { return id >= 0; }
};

namespace detail {
inline std::uint32_t next_tape_uid() {
  static std::atomic<std::uint32_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

template <class T>
class Gradients {
 public:
  bool has(Var v) const { return grads_.count(v.id) != 0; }
  const Tensor<T>& operator[](Var v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end())
      throw Error("autodiff", "no gradient recorded for node " + std::to_string(v.id));
    return it->second;
  }
  const std::unordered_map<int, Tensor<T>>& map() const noexcept { return grads_; }
  void set(int id, Tensor<T> g) { grads_[id] = std::move(g); }

 private:
  std::unordered_map<int, Tensor<T>> grads_;
};

// Recorded computation for reverse-mode differentiation.
//
// Every op appends one node. Nodes whose inputs do not require gradients
// record no backward closure and retain nothing. `element_count()` is the
// number of scalars kept alive for backward: each retained node value is
// counted once, plus op-owned scratch buffers.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() : uid_(detail::next_tape_uid()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    if (!value.all_finite()) throw NumericError("non-finite leaf value");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    n.tag = tag_;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1), uid_};
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Append an op result. `saves` lists nodes whose values the backward
  // closure reads; `extra` counts op-owned scratch elements. Invalid
  // handles in either list are ignored (optional operands).
  Var record(std::string_view op, Tensor<T> out, std::initializer_list<Var> inputs,
             std::initializer_list<Var> saves, std::size_t extra, Backward fn) {
    return record_impl(op, std::move(out), inputs, saves, extra, std::move(fn));
  }
  Var record(std::string_view op, Tensor<T> out, const std::vector<Var>& inputs,
             const std::vector<Var>& saves, std::size_t extra, Backward fn) {
    return record_impl(op, std::move(out), inputs, saves, extra, std::move(fn));
  }

 private:
  template <class Range>
  Var record_impl(std::string_view op, Tensor<T> out, const Range& inputs, const Range& saves,
                  std::size_t extra, Backward fn) {
    bool needs_grad = false;
    for (Var v : inputs) {
      if (!v.valid()) continue;
      check(v);
      needs_grad = needs_grad || nodes_[v.id].requires_grad;
    }
    if (!out.all_finite())
      throw NumericError("non-finite output in " + std::string(op));
    Node n;
    n.value = std::move(out);
    n.requires_grad = needs_grad;
    n.tag = tag_;
    n.op = std::string(op);
    for (Var v : inputs)
      if (v.valid()) n.inputs.push_back(v.id);
    if (needs_grad) {
      n.backward = std::move(fn);
      n.extra = extra;
    }
    nodes_.push_back(std::move(n));
    if (needs_grad) {
      for (Var v : saves)
        if (v.valid()) retain(v);
      add_elements(tag_, extra);
    }
    return Var{static_cast<int>(nodes_.size() - 1), uid_};
  }

 public:
  const Tensor<T>& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  const std::string& op_name(Var v) const {
    check(v);
    return nodes_[v.id].op;
  }
  // Handle of node `i`, for walking the tape in recording order.
  Var at(std::size_t i) const {
    if (i >= nodes_.size()) throw ShapeError("tape node index out of range");
    return Var{static_cast<int>(i), uid_};
  }
  std::vector<Var> inputs(Var v) const {
    check(v);
    std::vector<Var> r;
    for (int id : nodes_[v.id].inputs) r.push_back(Var{id, uid_});
    return r;
  }

  // Scope tag stamped on new nodes; lets callers attribute retained memory.
  void set_tag(int tag) noexcept { tag_ = tag; }
  int tag() const noexcept { return tag_; }

  std::size_t element_count() const noexcept { return element_count_; }
  std::size_t element_count(int tag) const {
    auto it = per_tag_.find(tag);
    return it == per_tag_.end() ? 0 : it->second;
  }
  // Recount from the node list (used to audit the running total).
  std::size_t recount_elements() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) {
      if (n.retained) total += n.value.size();
      total += n.extra;
    }
    return total;
  }
  bool retained(Var v) const {
    check(v);
    return nodes_[v.id].retained;
  }

  void set_element_budget(std::size_t budget) noexcept { budget_ = budget; }

  // Optional log of activation regions, used by gradient checks to detect
  // finite-difference stencils straddling a kink.
  void enable_region_log(bool on) noexcept { log_regions_ = on; }
  bool region_log_enabled() const noexcept { return log_regions_; }
  std::vector<std::uint8_t>& region_log() noexcept { return regions_; }
  const std::vector<std::uint8_t>& region_log() const noexcept { return regions_; }

  // Called from backward closures.
  void accumulate(Var v, Tensor<T> g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    Tensor<T>& slot = grads_[v.id];
    if (slot.empty())
      slot = std::move(g);
    else
      slot += g;
  }
  bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

  Gradients<T> backward(Var loss) {
    check(loss);
    const Tensor<T>& lv = nodes_[loss.id].value;
    if (lv.size() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " +
                       to_string(lv.shape()));
    grads_.assign(nodes_.size(), Tensor<T>{});
    Gradients<T> out;
    if (nodes_[loss.id].requires_grad) grads_[loss.id] = Tensor<T>(lv.shape(), T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (grads_[i].empty()) continue;
      if (n.backward) n.backward(*this, grads_[i]);
      if (!n.is_leaf) grads_[i] = Tensor<T>{};
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.is_leaf || !n.requires_grad) continue;
      if (grads_[i].empty())
        out.set(static_cast<int>(i), Tensor<T>(n.value.shape(), T(0)));
      else
        out.set(static_cast<int>(i), std::move(grads_[i]));
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    bool is_leaf = false;
    bool retained = false;
    int tag = 0;
    std::size_t extra = 0;
    std::string op;
    std::vector<int> inputs;
    Backward backward;
  };

  void check(Var v) const {
    if (v.tape != uid_ || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw Error("autodiff", "node " + std::to_string(v.id) + " is not on this tape");
  }

  void retain(Var v) {
    check(v);
    Node& n = nodes_[v.id];
    if (n.retained) return;
    n.retained = true;
    add_elements(n.tag, n.value.size());
  }

  void add_elements(int tag, std::size_t count) {
    if (count == 0) return;
    element_count_ += count;
    per_tag_[tag] += count;
    if (element_count_ > budget_)
      throw BudgetExceeded("tape retains " + std::to_string(element_count_) +
                           " elements, budget " + std::to_string(budget_));
  }

  std::uint32_t uid_;
  std::deque<Node> nodes_;  // stable references across record()
  std::vector<Tensor<T>> grads_;
  int tag_ = 0;
  std::size_t element_count_ = 0;
  std::map<int, std::size_t> per_tag_;
  std::size_t budget_ = std::numeric_limits<std::size_t>::max();
  bool log_regions_ = false;
  std::vector<std::uint8_t> regions_;
};

}  // namespace dmasknas
