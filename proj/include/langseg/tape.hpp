#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "langseg/dense_map.hpp"

namespace langseg {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode gradient tape.
///
/// Every operation appends a node holding its forward value and, when any of
/// its inputs requires a gradient, a closure that propagates the node's
/// output gradient back to those inputs. `backward()` replays the closures in
/// reverse order. A tape belongs to exactly one forward pass; do not share one
/// across threads.
template <typename Scalar>
class Tape {
 public:
  using Map = DenseMap<Scalar>;
  using Backward = std::function<void(Tape&, const Map& output_grad)>;

  /// A value that never receives a gradient (images, frozen embeddings).
  Var constant(Map value) { return push(std::move(value), false, {}); }

  /// A leaf whose gradient is accumulated by `backward()`.
  Var parameter(Map value) { return push(std::move(value), true, {}); }

  /// Records the result of an operation. `backward` is stored only when at
  /// least one input requires a gradient.
  Var record(Map value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Map& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last `backward()` target with respect to `v`. Exact
  /// zero for values the target does not depend on.
  Map grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    const Map& x = n.value;
    return Map(x.height(), x.width(), x.channels());
  }

  /// Adds `delta` into the gradient slot of `v`; no-op for constants.
  void accumulate(Var v, const typename Map::Matrix& delta) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Map(n.value.height(), n.value.width(), n.value.channels());
      n.has_grad = true;
    }
    n.grad.matrix() += delta;
  }

  /// Seeds d(target)/d(target) = 1 and runs the reverse pass. `target` must
  /// be a 1x1x1 map.
  void backward(Var target) {
    const Map& t = nodes_[target.id].value;
    if (t.size() != 1) throw ShapeError("backward() target must be scalar, got " + t.shape_string());
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Map();
    }
    if (!nodes_[target.id].requires_grad) return;
    accumulate(target, Map::Matrix::Ones(1, 1));
    for (std::size_t i = target.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      // Closures only write to their inputs' slots, never this one.
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Map value;
    Map grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Map value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Map(), requires_grad, false, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace langseg
